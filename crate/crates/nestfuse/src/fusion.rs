//! Attention-based fusion of two sources' multi-scale features.
//!
//! Fusion runs at inference time only; training reconstructs single images
//! and never invokes this module. Each scale is fused independently by two
//! attention models and their results averaged:
//!
//! * **Spatial attention** - per position, the l1 norm across channels
//!   scores each source; softmax-style normalization turns the scores into
//!   weighting maps `beta_k(x, y)`.
//! * **Channel attention** - per channel, a global pooling operator (avg,
//!   max, or nuclear-norm) scores each source; normalization gives scalar
//!   weights `alpha_k(n)` applied to whole channels.
//!
//! Both stages are symmetric in the two sources and positively homogeneous,
//! and their weights sum to 1 at every position/channel. Where both
//! sources score exactly zero the weights fall back to 0.5/0.5, the
//! symmetric continuous limit. Weights are meaningful for non-negative
//! (post-ReLU) features; the functions accept arbitrary values but only
//! apply the degenerate rule on an exactly zero denominator.

use crate::network::MultiScaleFeatures;
use crate::tensor::FeatureMap;
use nalgebra::DMatrix;

/// Global pooling operator used by the channel attention model.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolingKind {
    /// Mean over the channel plane.
    Avg,
    /// Maximum over the channel plane.
    Max,
    /// Nuclear norm (sum of singular values) of the channel plane.
    Nuclear,
}

impl PoolingKind {
    /// All pooling kinds, in CLI flag order.
    pub const ALL: [PoolingKind; 3] = [PoolingKind::Avg, PoolingKind::Max, PoolingKind::Nuclear];
}

impl std::fmt::Display for PoolingKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PoolingKind::Avg => "avg",
            PoolingKind::Max => "max",
            PoolingKind::Nuclear => "nuclear",
        })
    }
}

impl std::str::FromStr for PoolingKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "avg" => Ok(PoolingKind::Avg),
            "max" => Ok(PoolingKind::Max),
            "nuclear" => Ok(PoolingKind::Nuclear),
            other => Err(format!(
                "unknown pooling kind '{other}' (expected avg, max, or nuclear)"
            )),
        }
    }
}

/// Errors from fusion operations.
#[derive(thiserror::Error, Debug)]
pub enum FusionError {
    #[error("sources disagree in shape: {left:?} vs {right:?} (channels, height, width)")]
    ShapeMismatch {
        left: (usize, usize, usize),
        right: (usize, usize, usize),
    },
    #[error("singular value decomposition failed to converge for channel {channel}")]
    SvdFailed { channel: usize },
}

fn check_same_shape(a: &FeatureMap, b: &FeatureMap) -> Result<(), FusionError> {
    if a.shape() != b.shape() {
        return Err(FusionError::ShapeMismatch {
            left: a.shape(),
            right: b.shape(),
        });
    }
    Ok(())
}

/// Spatial attention weighting maps: per position, each source's l1 norm
/// across channels divided by the sum of both. Positions where both norms
/// are exactly zero get 0.5/0.5. Returned maps are single-channel.
pub fn spatial_weight_maps(
    phi1: &FeatureMap,
    phi2: &FeatureMap,
) -> Result<(FeatureMap, FeatureMap), FusionError> {
    check_same_shape(phi1, phi2)?;
    let (c, h, w) = phi1.shape();
    let n = h * w;
    let mut s1 = vec![0.0f32; n];
    let mut s2 = vec![0.0f32; n];
    for ch in 0..c {
        for (acc, &v) in s1.iter_mut().zip(phi1.channel(ch)) {
            *acc += v.abs();
        }
        for (acc, &v) in s2.iter_mut().zip(phi2.channel(ch)) {
            *acc += v.abs();
        }
    }
    let mut b1 = FeatureMap::zeros(1, h, w);
    let mut b2 = FeatureMap::zeros(1, h, w);
    for i in 0..n {
        let denom = s1[i] + s2[i];
        if denom == 0.0 {
            b1.data_mut()[i] = 0.5;
            b2.data_mut()[i] = 0.5;
        } else {
            b1.data_mut()[i] = s1[i] / denom;
            b2.data_mut()[i] = s2[i] / denom;
        }
    }
    Ok((b1, b2))
}

/// Spatial attention fusion: every channel blended per position by the
/// spatial weighting maps.
pub fn spatial_fuse(phi1: &FeatureMap, phi2: &FeatureMap) -> Result<FeatureMap, FusionError> {
    let (b1, b2) = spatial_weight_maps(phi1, phi2)?;
    let (c, h, w) = phi1.shape();
    let mut out = FeatureMap::zeros(c, h, w);
    for ch in 0..c {
        let p1 = phi1.channel(ch);
        let p2 = phi2.channel(ch);
        let w1 = b1.channel(0);
        let w2 = b2.channel(0);
        let o = out.channel_mut(ch);
        for i in 0..p1.len() {
            o[i] = w1[i] * p1[i] + w2[i] * p2[i];
        }
    }
    Ok(out)
}

/// Reduces one H×W channel plane to a scalar. `channel` holds the plane
/// row-major with `height * width` elements.
///
/// On SVD non-convergence the error reports channel index 0; callers
/// pooling a multi-channel stack replace it with the failing index.
pub fn global_pool(
    channel: &[f32],
    height: usize,
    width: usize,
    kind: PoolingKind,
) -> Result<f64, FusionError> {
    assert!(
        height > 0 && width > 0 && channel.len() == height * width,
        "global_pool needs a non-empty height*width plane"
    );
    match kind {
        PoolingKind::Avg => {
            Ok(channel.iter().map(|&v| v as f64).sum::<f64>() / channel.len() as f64)
        }
        PoolingKind::Max => Ok(channel
            .iter()
            .fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64))),
        PoolingKind::Nuclear => nuclear_norm(channel, height, width),
    }
}

/// Side length beyond which the nuclear norm switches from a full SVD to
/// eigenvalues of the (much smaller) Gram matrix.
const GRAM_SIDE_THRESHOLD: usize = 512;

/// Iteration cap for the decompositions; exceeding it reports failure
/// instead of spinning.
const SVD_MAX_ITER: usize = 10_000;

fn nuclear_norm(plane: &[f32], height: usize, width: usize) -> Result<f64, FusionError> {
    if height.max(width) > GRAM_SIDE_THRESHOLD {
        return nuclear_norm_gram(plane, height, width);
    }
    let m = DMatrix::from_row_iterator(height, width, plane.iter().map(|&v| v as f64));
    let svd = m
        .try_svd(false, false, f64::EPSILON, SVD_MAX_ITER)
        .ok_or(FusionError::SvdFailed { channel: 0 })?;
    Ok(svd.singular_values.iter().sum())
}

/// Nuclear norm via the eigenvalues of the smaller Gram matrix; singular
/// values are the square roots of its (non-negative) eigenvalues.
fn nuclear_norm_gram(plane: &[f32], height: usize, width: usize) -> Result<f64, FusionError> {
    let m = DMatrix::from_row_iterator(height, width, plane.iter().map(|&v| v as f64));
    let gram = if height <= width {
        &m * m.transpose()
    } else {
        m.transpose() * &m
    };
    let eig = gram
        .try_symmetric_eigen(f64::EPSILON, SVD_MAX_ITER)
        .ok_or(FusionError::SvdFailed { channel: 0 })?;
    Ok(eig.eigenvalues.iter().map(|&l| l.max(0.0).sqrt()).sum())
}

/// Channel attention weight vectors: per channel, each source's pooled
/// score divided by the sum of both. Channels where the scores sum to
/// exactly zero get 0.5/0.5.
pub fn channel_weights(
    phi1: &FeatureMap,
    phi2: &FeatureMap,
    kind: PoolingKind,
) -> Result<(Vec<f32>, Vec<f32>), FusionError> {
    check_same_shape(phi1, phi2)?;
    let (c, h, w) = phi1.shape();
    let mut a1 = Vec::with_capacity(c);
    let mut a2 = Vec::with_capacity(c);
    for n in 0..c {
        let remap = |e| match e {
            FusionError::SvdFailed { .. } => FusionError::SvdFailed { channel: n },
            other => other,
        };
        let p1 = global_pool(phi1.channel(n), h, w, kind).map_err(remap)?;
        let p2 = global_pool(phi2.channel(n), h, w, kind).map_err(remap)?;
        let denom = p1 + p2;
        if denom == 0.0 {
            a1.push(0.5);
            a2.push(0.5);
        } else {
            a1.push((p1 / denom) as f32);
            a2.push((p2 / denom) as f32);
        }
    }
    Ok((a1, a2))
}

/// Channel attention fusion: each output channel is the two input channels
/// blended by their scalar weights.
pub fn channel_fuse(
    phi1: &FeatureMap,
    phi2: &FeatureMap,
    kind: PoolingKind,
) -> Result<FeatureMap, FusionError> {
    let (a1, a2) = channel_weights(phi1, phi2, kind)?;
    let (c, h, w) = phi1.shape();
    let mut out = FeatureMap::zeros(c, h, w);
    for n in 0..c {
        let w1 = a1[n];
        let w2 = a2[n];
        let p1 = phi1.channel(n);
        let p2 = phi2.channel(n);
        let o = out.channel_mut(n);
        for i in 0..p1.len() {
            o[i] = w1 * p1[i] + w2 * p2[i];
        }
    }
    Ok(out)
}

/// Final per-scale features: the average of the spatial-attention and
/// channel-attention results, `(spatial + channel) * 0.5`.
pub fn combine(spatial: &FeatureMap, channel: &FeatureMap) -> Result<FeatureMap, FusionError> {
    check_same_shape(spatial, channel)?;
    let mut out = spatial.clone();
    for (o, &c) in out.data_mut().iter_mut().zip(channel.data()) {
        *o = (*o + c) * 0.5;
    }
    Ok(out)
}

/// Fuses two sources' multi-scale features scale by scale.
pub fn fuse_multiscale(
    f1: &MultiScaleFeatures,
    f2: &MultiScaleFeatures,
    kind: PoolingKind,
) -> Result<MultiScaleFeatures, FusionError> {
    let fuse_scale = |a: &FeatureMap, b: &FeatureMap| -> Result<FeatureMap, FusionError> {
        let spatial = spatial_fuse(a, b)?;
        let channel = channel_fuse(a, b, kind)?;
        combine(&spatial, &channel)
    };
    Ok(MultiScaleFeatures {
        scales: [
            fuse_scale(&f1.scales[0], &f2.scales[0])?,
            fuse_scale(&f1.scales[1], &f2.scales[1])?,
            fuse_scale(&f1.scales[2], &f2.scales[2])?,
            fuse_scale(&f1.scales[3], &f2.scales[3])?,
        ],
    })
}
