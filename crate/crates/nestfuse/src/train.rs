//! Training loop: corpus preparation, Adam optimization of the
//! reconstruction objective, per-iteration loss history, and periodic
//! checkpointing.
//!
//! Training reconstructs single images through encode/decode; the fusion
//! strategy is bypassed entirely (this module has no dependency on it).
//! The loop is single-threaded and fully deterministic: a fixed seed and
//! corpus reproduce the loss history bit for bit.

use crate::checkpoint::{save_checkpoint, CheckpointError};
use crate::imgio::{load_image, resize_bilinear};
use crate::loss::{total_loss, total_loss_grad, LossBreakdown, LossError};
use crate::network::{
    backward_trace, forward_trace, init_network, NetworkError, NetworkGrads, NetworkState,
};
use crate::tensor::FeatureMap;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::{Path, PathBuf};

/// Configuration for [`train`]. Defaults mirror the reference settings:
/// 256×256 inputs, 2 epochs, batch 4, λ = 100, Adam at 1e-4.
#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub corpus_dir: PathBuf,
    pub image_size: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lambda: f64,
    pub learning_rate: f64,
    pub seed: u64,
    pub deep_supervision: bool,
    /// Write a checkpoint every this many iterations (0 = only at the
    /// end). Requires `checkpoint_path`.
    pub checkpoint_every: usize,
    /// Where checkpoints are written; `None` trains in memory only.
    pub checkpoint_path: Option<PathBuf>,
}

impl TrainConfig {
    pub fn new(corpus_dir: impl Into<PathBuf>) -> Self {
        Self {
            corpus_dir: corpus_dir.into(),
            image_size: 256,
            epochs: 2,
            batch_size: 4,
            lambda: 100.0,
            learning_rate: 1e-4,
            seed: 0,
            deep_supervision: false,
            checkpoint_every: 0,
            checkpoint_path: None,
        }
    }
}

/// Errors from corpus preparation and training.
#[derive(thiserror::Error, Debug)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("corpus directory {dir} has no decodable images")]
    EmptyCorpus { dir: PathBuf },
    #[error("corpus has {found} images but one batch needs {need}")]
    CorpusTooSmall { found: usize, need: usize },
    #[error("failed to list corpus {dir}: {source}")]
    CorpusIo {
        dir: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("loss became non-finite at iteration {iteration}; aborted (last checkpoint retained)")]
    NanAbort { iteration: usize },
}

/// Result of a training run: the final weights and the per-iteration loss
/// history.
#[derive(Debug)]
pub struct TrainOutcome {
    pub state: NetworkState,
    pub history: Vec<LossBreakdown>,
}

/// Loads every decodable PNG/JPEG in `dir` (sorted by file name for a
/// deterministic order), converts to gray in [0, 1], and resizes to
/// `size`×`size`. Undecodable files are skipped with a warning; an empty
/// result is an error.
pub fn prepare_corpus(dir: &Path, size: usize) -> Result<Vec<FeatureMap>, TrainError> {
    let entries = std::fs::read_dir(dir).map_err(|source| TrainError::CorpusIo {
        dir: dir.to_path_buf(),
        source,
    })?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .map(|e| {
                    let e = e.to_ascii_lowercase();
                    e == "png" || e == "jpg" || e == "jpeg"
                })
                .unwrap_or(false)
        })
        .collect();
    paths.sort();
    let mut images = Vec::with_capacity(paths.len());
    for path in &paths {
        match load_image(path) {
            Ok(img) => images.push(resize_bilinear(&img, size, size)),
            Err(err) => log::warn!("skipping corpus file: {err}"),
        }
    }
    if images.is_empty() {
        return Err(TrainError::EmptyCorpus {
            dir: dir.to_path_buf(),
        });
    }
    Ok(images)
}

struct Adam {
    m: NetworkGrads,
    v: NetworkGrads,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    fn new(state: &NetworkState) -> Self {
        Self {
            m: NetworkGrads::zeros_like(state),
            v: NetworkGrads::zeros_like(state),
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    fn step(&mut self, state: &mut NetworkState, grads: &NetworkGrads, lr: f64, t: usize) {
        let bc1 = (1.0 - self.beta1.powi(t as i32)) as f32;
        let bc2 = (1.0 - self.beta2.powi(t as i32)) as f32;
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let (lr, eps) = (lr as f32, self.eps as f32);
        for (ci, conv) in state.convs_mut().into_iter().enumerate() {
            let g = &grads.convs[ci];
            let m = &mut self.m.convs[ci];
            let v = &mut self.v.convs[ci];
            let update = |p: &mut [f32], g: &[f32], m: &mut [f32], v: &mut [f32]| {
                for i in 0..p.len() {
                    m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                    v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                    let mh = m[i] / bc1;
                    let vh = v[i] / bc2;
                    p[i] -= lr * mh / (vh.sqrt() + eps);
                }
            };
            update(&mut conv.weight, &g.weight, &mut m.weight, &mut v.weight);
            update(&mut conv.bias, &g.bias, &mut m.bias, &mut v.bias);
        }
    }
}

fn validate(config: &TrainConfig) -> Result<(), TrainError> {
    if config.epochs < 1 {
        return Err(TrainError::InvalidConfig("epochs must be >= 1".into()));
    }
    if config.batch_size < 1 {
        return Err(TrainError::InvalidConfig("batch size must be >= 1".into()));
    }
    if !(config.lambda > 0.0) {
        return Err(TrainError::InvalidConfig(format!(
            "lambda must be > 0, got {}",
            config.lambda
        )));
    }
    if !(config.learning_rate >= 0.0 && config.learning_rate.is_finite()) {
        return Err(TrainError::InvalidConfig(format!(
            "learning rate must be finite and >= 0, got {}",
            config.learning_rate
        )));
    }
    if config.image_size == 0 || config.image_size % 16 != 0 {
        return Err(TrainError::InvalidConfig(format!(
            "image size must be a positive multiple of 16, got {}",
            config.image_size
        )));
    }
    if config.checkpoint_every > 0 && config.checkpoint_path.is_none() {
        return Err(TrainError::InvalidConfig(
            "checkpoint_every set without a checkpoint path".into(),
        ));
    }
    Ok(())
}

/// Trains the autoencoder on the configured corpus and returns the final
/// state plus the full loss history (one [`LossBreakdown`] per iteration,
/// `total` recomposed exactly as `pixel + lambda * ssim`).
///
/// Batches of `batch_size` are drawn from a per-epoch shuffle; a trailing
/// partial batch is dropped. A non-finite loss aborts with
/// [`TrainError::NanAbort`], leaving the last written checkpoint intact.
pub fn train(config: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    validate(config)?;
    let images = prepare_corpus(&config.corpus_dir, config.image_size)?;
    if images.len() < config.batch_size {
        return Err(TrainError::CorpusTooSmall {
            found: images.len(),
            need: config.batch_size,
        });
    }

    let mut state = init_network(config.seed, config.deep_supervision);
    state.trained_lambda = Some(config.lambda);
    let mut adam = Adam::new(&state);
    let mut grads = NetworkGrads::zeros_like(&state);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut history = Vec::new();
    let mut indices: Vec<usize> = (0..images.len()).collect();
    let batches_per_epoch = images.len() / config.batch_size;
    let mut iteration = 0usize;

    for _epoch in 0..config.epochs {
        indices.shuffle(&mut rng);
        for batch in indices.chunks_exact(config.batch_size).take(batches_per_epoch) {
            iteration += 1;
            grads.scale(0.0);
            let inv_batch = 1.0 / config.batch_size as f64;
            let mut pixel = 0.0f64;
            let mut ssim = 0.0f64;
            let mut traces = Vec::with_capacity(batch.len());
            let mut peak = [0.0f32; 3];
            for &idx in batch {
                let img = &images[idx];
                let trace = forward_trace(img, &state, config.deep_supervision)?;
                let share = if config.deep_supervision { 1.0 / 3.0 } else { 1.0 };
                let mut grad_outputs = Vec::with_capacity(trace.outputs.len());
                for (q, out) in trace.outputs.iter().enumerate() {
                    peak[q] = peak[q].max(out.max_value());
                    let lb = total_loss(out, img, config.lambda)?;
                    pixel += lb.pixel * share * inv_batch;
                    ssim += lb.ssim * share * inv_batch;
                    let mut g = total_loss_grad(out, img, config.lambda)?;
                    let scale = (share * inv_batch) as f32;
                    for v in g.data_mut() {
                        *v *= scale;
                    }
                    grad_outputs.push(g);
                }
                traces.push((trace, grad_outputs));
            }
            if iteration == 1 {
                let n_outputs = if config.deep_supervision { 3 } else { 1 };
                for (q, p) in peak[..n_outputs].iter().enumerate() {
                    if *p <= 0.0 {
                        log::warn!(
                            "output {} is all-zero on the first batch (dead ReLU at init); \
                             it may never receive gradient - consider another seed",
                            q + 1
                        );
                    }
                }
            }
            let breakdown = LossBreakdown {
                pixel,
                ssim,
                total: pixel + config.lambda * ssim,
                lambda: config.lambda,
            };
            history.push(breakdown);
            if !breakdown.total.is_finite() {
                return Err(TrainError::NanAbort { iteration });
            }
            for (trace, grad_outputs) in &traces {
                backward_trace(&state, trace, grad_outputs, &mut grads);
            }
            adam.step(&mut state, &grads, config.learning_rate, iteration);

            if config.checkpoint_every > 0 && iteration % config.checkpoint_every == 0 {
                if let Some(path) = &config.checkpoint_path {
                    save_checkpoint(&state, path)?;
                }
            }
        }
    }

    if let Some(path) = &config.checkpoint_path {
        save_checkpoint(&state, path)?;
    }
    Ok(TrainOutcome { state, history })
}

/// Writes the loss history as CSV (`iteration,pixel,ssim,total`),
/// atomically via a temp file.
pub fn write_loss_csv(history: &[LossBreakdown], path: &Path) -> std::io::Result<()> {
    let mut out = String::from("iteration,pixel,ssim,total\n");
    for (i, lb) in history.iter().enumerate() {
        out.push_str(&format!(
            "{},{:.6},{:.6},{:.6}\n",
            i + 1,
            lb.pixel,
            lb.ssim,
            lb.total
        ));
    }
    let tmp = path.with_extension("csv.tmp");
    std::fs::write(&tmp, out)?;
    std::fs::rename(&tmp, path)
}

/// Trailing moving average of the total loss: element `t` is the mean of
/// the last `window` totals ending at `t` (fewer at the start).
pub fn smoothed_total(history: &[LossBreakdown], window: usize) -> Vec<f64> {
    assert!(window >= 1);
    let mut out = Vec::with_capacity(history.len());
    for t in 0..history.len() {
        let lo = (t + 1).saturating_sub(window);
        let slice = &history[lo..=t];
        out.push(slice.iter().map(|b| b.total).sum::<f64>() / slice.len() as f64);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::write_corpus;

    fn tiny_config(dir: &Path) -> TrainConfig {
        let mut c = TrainConfig::new(dir);
        c.image_size = 32;
        c.epochs = 1;
        c.batch_size = 4;
        c.lambda = 10.0;
        c.seed = 5;
        c
    }

    #[test]
    fn config_validation_rejects_bad_values() {
        let dir = tempfile::tempdir().unwrap();
        let base = tiny_config(dir.path());
        for breaker in [
            (|c: &mut TrainConfig| c.epochs = 0) as fn(&mut TrainConfig),
            |c| c.batch_size = 0,
            |c| c.lambda = 0.0,
            |c| c.lambda = -1.0,
            |c| c.learning_rate = f64::NAN,
            |c| c.image_size = 40,
            |c| c.checkpoint_every = 5,
        ] {
            let mut c = base.clone();
            breaker(&mut c);
            assert!(matches!(train(&c), Err(TrainError::InvalidConfig(_))));
        }
    }

    #[test]
    fn corpus_is_sorted_skips_junk_and_errors_when_empty() {
        let dir = tempfile::tempdir().unwrap();
        write_corpus(dir.path(), 3, 24, 9).unwrap();
        std::fs::write(dir.path().join("img_0001.png"), b"garbage").unwrap();
        std::fs::write(dir.path().join("notes.txt"), b"not an image").unwrap();
        let corpus = prepare_corpus(dir.path(), 16).unwrap();
        assert_eq!(corpus.len(), 2, "one corrupted file skipped, text ignored");
        for img in &corpus {
            assert_eq!(img.shape(), (1, 16, 16));
            assert!(img.min_value() >= 0.0 && img.max_value() <= 1.0);
        }
        let empty = tempfile::tempdir().unwrap();
        assert!(matches!(
            prepare_corpus(empty.path(), 16),
            Err(TrainError::EmptyCorpus { .. })
        ));
    }

    #[test]
    fn drop_last_batching_sets_iteration_count() {
        let dir = tempfile::tempdir().unwrap();
        write_corpus(dir.path(), 10, 32, 1).unwrap();
        let mut c = tiny_config(dir.path());
        c.learning_rate = 0.0;
        c.epochs = 2;
        let out = train(&c).unwrap();
        // floor(10 / 4) = 2 batches per epoch, 2 epochs.
        assert_eq!(out.history.len(), 4);
    }

    #[test]
    fn zero_learning_rate_leaves_weights_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        write_corpus(dir.path(), 4, 32, 2).unwrap();
        let mut c = tiny_config(dir.path());
        c.learning_rate = 0.0;
        let out = train(&c).unwrap();
        let init = init_network(c.seed, false);
        for ((_, a), (_, b)) in out.state.convs().iter().zip(init.convs()) {
            assert_eq!(a.weight, b.weight);
            assert_eq!(a.bias, b.bias);
        }
    }

    #[test]
    fn training_is_deterministic_and_loss_falls() {
        let dir = tempfile::tempdir().unwrap();
        write_corpus(dir.path(), 12, 32, 3).unwrap();
        let mut c = tiny_config(dir.path());
        c.epochs = 7; // 3 batches per epoch -> 21 iterations
        c.learning_rate = 1e-3;
        let a = train(&c).unwrap();
        let b = train(&c).unwrap();
        assert_eq!(a.history, b.history, "same seed, same curve");
        for ((_, x), (_, y)) in a.state.convs().iter().zip(b.state.convs()) {
            assert_eq!(x.weight, y.weight);
        }
        let first: f64 = a.history[..5].iter().map(|l| l.total).sum::<f64>() / 5.0;
        let last: f64 = a.history[a.history.len() - 5..]
            .iter()
            .map(|l| l.total)
            .sum::<f64>()
            / 5.0;
        assert!(
            last < first,
            "loss should fall over 21 iterations: first {first:.3}, last {last:.3}"
        );
        for lb in &a.history {
            assert_eq!(lb.total, lb.pixel + lb.lambda * lb.ssim, "exact recomposition");
        }
    }

    #[test]
    fn deep_supervision_trains_heads_not_main_output() {
        let dir = tempfile::tempdir().unwrap();
        write_corpus(dir.path(), 4, 32, 4).unwrap();
        let mut c = tiny_config(dir.path());
        c.deep_supervision = true;
        c.learning_rate = 1e-3;
        // Zero-bias init can leave a 1x1 head all-negative (dead ReLU) for
        // some seeds; seed 4 has every head active on this corpus.
        c.seed = 4;
        let out = train(&c).unwrap();
        let init = init_network(c.seed, true);
        assert_eq!(
            out.state.output, init.output,
            "main output conv must receive no gradient under deep supervision"
        );
        let (hi, ho) = (init.heads.unwrap(), out.state.heads.unwrap());
        assert_ne!(hi.o1.weight, ho.o1.weight, "heads must train");
        assert_ne!(out.state.stem.weight, init.stem.weight, "trunk must train");
    }

    #[test]
    fn exploding_run_aborts_and_keeps_last_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        write_corpus(dir.path(), 8, 32, 6).unwrap();
        let ckpt = dir.path().join("last.nf");
        let mut c = tiny_config(dir.path());
        c.epochs = 3;
        c.learning_rate = 1e30;
        c.checkpoint_every = 1;
        c.checkpoint_path = Some(ckpt.clone());
        let err = train(&c).unwrap_err();
        match err {
            TrainError::NanAbort { iteration } => assert!(iteration >= 2),
            other => panic!("expected NanAbort, got {other:?}"),
        }
        let state = crate::checkpoint::load_checkpoint(&ckpt).unwrap();
        assert_eq!(state.trained_lambda, Some(c.lambda));
    }

    #[test]
    fn smoothing_and_csv_output() {
        let mk = |t: f64| LossBreakdown {
            pixel: t,
            ssim: 0.0,
            total: t,
            lambda: 1.0,
        };
        let hist: Vec<_> = [4.0, 2.0, 6.0, 8.0].into_iter().map(mk).collect();
        let s = smoothed_total(&hist, 2);
        assert_eq!(s, vec![4.0, 3.0, 4.0, 7.0]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("loss.csv");
        write_loss_csv(&hist, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("iteration,pixel,ssim,total\n1,4.000000,"));
        assert_eq!(text.lines().count(), 5);
    }
}
