//! NestFuse: infrared/visible image fusion with a nest-connection autoencoder
//! and two-stage (spatial + channel) attention fusion.
//!
//! The crate is organised around five concerns:
//!
//! * [`network`] - the fixed-topology autoencoder: encoder (stem conv plus
//!   four ECB stages) and nest-connection decoder (six DCB nodes plus a 1x1
//!   output conv), with optional deep-supervision heads.
//! * [`fusion`] - the attention fusion strategy applied per scale between
//!   encoder outputs of the two source images.
//! * [`loss`] and [`train`] - pixel + SSIM loss with analytic gradients, and
//!   the Adam training loop over an image corpus.
//! * [`metrics`] - seven full-reference / no-reference fusion quality
//!   metrics (En, SD, MI, FMI_dct, FMI_w, SSIM_a, VIF) and CSV reports.
//! * [`imgio`] and [`checkpoint`] - grayscale PNG/JPEG IO, the pad/crop
//!   wrapper for arbitrary image sizes, and the versioned checkpoint format.
//!
//! The [`cli`] module implements the `train` / `fuse` / `eval` / `ablate`
//! subcommands used by the thin `nestfuse` binary; the `examples/` directory
//! shows the same capabilities through the library API.

pub mod checkpoint;
pub mod cli;
pub mod fusion;
pub mod imgio;
pub mod loss;
pub mod metrics;
pub mod network;
pub mod ops;
pub(crate) mod plane;
pub mod reference;
pub mod synth;
pub mod tensor;
pub mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointError};
pub use fusion::{
    channel_fuse, channel_weights, combine, fuse_multiscale, global_pool, spatial_fuse,
    spatial_weight_maps, FusionError, PoolingKind,
};
pub use imgio::{load_image, pad_crop_wrap, save_image, ImageIoError};
pub use metrics::{
    aggregate, entropy, evaluate_pair, fmi, fusion_mi, mutual_information, render_csv, ssim_a,
    std_dev, vif, write_csv, FeatureKind, MetricsError, MetricsReport, METRIC_COLUMNS,
};
pub use loss::{
    deep_supervised_loss, pixel_loss, pixel_loss_grad, ssim_index, ssim_loss, ssim_loss_grad,
    total_loss, total_loss_grad, LossBreakdown, LossError,
};
pub use network::{
    decode, decode_deep_supervised, encode, init_network, upsample2x, MultiScaleFeatures,
    NetworkError, NetworkState,
};
pub use synth::{synthetic_image, synthetic_pair, write_corpus, write_pairs};
pub use tensor::FeatureMap;
pub use train::{prepare_corpus, smoothed_total, train, write_loss_csv, TrainConfig, TrainError, TrainOutcome};
