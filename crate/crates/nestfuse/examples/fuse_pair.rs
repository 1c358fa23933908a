//! Fuses a synthetic infrared/visible pair with each pooling kind after a
//! short training run, and demonstrates the fusion identity: fusing an
//! image with itself reproduces the plain reconstruction exactly.
//!
//!     cargo run --release --example fuse_pair

use nestfuse::{
    decode, encode, fuse_multiscale, save_image, synthetic_pair, train, write_corpus,
    PoolingKind, TrainConfig,
};

fn main() {
    env_logger::init();
    let dir = tempfile::tempdir().expect("tempdir");
    let corpus = dir.path().join("corpus");
    write_corpus(&corpus, 16, 48, 3).expect("corpus");

    let mut config = TrainConfig::new(&corpus);
    config.image_size = 48;
    config.epochs = 3;
    config.seed = 0;
    let state = train(&config).expect("training").state;

    let (ir, vis) = synthetic_pair(11, 48, 48);
    save_image(&ir, &dir.path().join("ir.png")).unwrap();
    save_image(&vis, &dir.path().join("vis.png")).unwrap();
    let fa = encode(&ir, &state).expect("encode ir");
    let fb = encode(&vis, &state).expect("encode vis");

    for pooling in PoolingKind::ALL {
        let fused = fuse_multiscale(&fa, &fb, pooling).expect("fuse");
        let image = decode(&fused, &state).expect("decode");
        let path = dir.path().join(format!("fused_{pooling}.png"));
        save_image(&image, &path).unwrap();
        println!(
            "{pooling:>7}: fused image range [{:.3}, {:.3}] -> {}",
            image.min_value(),
            image.max_value(),
            path.display()
        );
    }

    // Fusion identity: attention weights collapse to 1/2 when both sources
    // are the same image, so fuse(I, I) is exactly reconstruct(I).
    let self_fused = fuse_multiscale(&fa, &fa, PoolingKind::Avg).expect("fuse");
    let via_fusion = decode(&self_fused, &state).expect("decode");
    let direct = decode(&fa, &state).expect("decode");
    println!(
        "fusion identity check: max |fuse(I,I) - reconstruct(I)| = {:.1e}",
        via_fusion.max_abs_diff(&direct)
    );
}
