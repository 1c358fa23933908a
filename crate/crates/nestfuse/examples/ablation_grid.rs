//! Runs a reduced ablation grid - two SSIM weights x two pooling kinds -
//! training one model per weight and scoring fused outputs over a small
//! pair set, like the `ablate` subcommand but through the library API.
//!
//!     cargo run --release --example ablation_grid

use nestfuse::{
    aggregate, decode, encode, evaluate_pair, fuse_multiscale, render_csv, synthetic_pair,
    train, write_corpus, PoolingKind, TrainConfig,
};

fn main() {
    env_logger::init();
    let dir = tempfile::tempdir().expect("tempdir");
    let corpus = dir.path().join("corpus");
    write_corpus(&corpus, 16, 48, 21).expect("corpus");
    let pairs: Vec<_> = (0..3u64).map(|s| synthetic_pair(s, 48, 48)).collect();

    let mut rows = Vec::new();
    for lambda in [10.0, 100.0] {
        let mut config = TrainConfig::new(&corpus);
        config.image_size = 48;
        config.epochs = 3;
        config.lambda = lambda;
        config.seed = 0;
        let state = train(&config).expect("training").state;
        for pooling in [PoolingKind::Avg, PoolingKind::Max] {
            let mut reports = Vec::new();
            for (ir, vis) in &pairs {
                let fa = encode(ir, &state).expect("encode");
                let fb = encode(vis, &state).expect("encode");
                let fused = decode(&fuse_multiscale(&fa, &fb, pooling).expect("fuse"), &state)
                    .expect("decode");
                reports.push(evaluate_pair(&fused, ir, vis).expect("metrics"));
            }
            let cell = aggregate(&reports).expect("non-empty");
            rows.push((format!("lambda{}_{pooling}", lambda as i64), cell));
        }
    }
    print!("{}", render_csv(&rows));
}
