//! Trains the reconstruction autoencoder on a small synthetic corpus and
//! saves a checkpoint plus the per-iteration loss history.
//!
//!     cargo run --release --example train_autoencoder

use nestfuse::{smoothed_total, train, write_corpus, write_loss_csv, TrainConfig};

fn main() {
    env_logger::init();
    let dir = tempfile::tempdir().expect("tempdir");
    let corpus = dir.path().join("corpus");
    write_corpus(&corpus, 24, 48, 42).expect("corpus");
    println!("synthetic corpus: 24 images of 48x48 at {}", corpus.display());

    let mut config = TrainConfig::new(&corpus);
    config.image_size = 48;
    config.epochs = 4;
    config.lambda = 100.0;
    config.seed = 0;
    config.checkpoint_path = Some(dir.path().join("autoencoder.nf"));

    let outcome = train(&config).expect("training");
    let csv = dir.path().join("loss.csv");
    write_loss_csv(&outcome.history, &csv).expect("loss csv");

    let smooth = smoothed_total(&outcome.history, 5);
    println!(
        "ran {} iterations: smoothed loss {:.2} -> {:.2}",
        outcome.history.len(),
        smooth[4.min(smooth.len() - 1)],
        smooth.last().unwrap()
    );
    println!(
        "checkpoint: {} ({} parameters)",
        config.checkpoint_path.as_ref().unwrap().display(),
        outcome.state.param_count()
    );
    println!("loss history: {}", csv.display());
}
