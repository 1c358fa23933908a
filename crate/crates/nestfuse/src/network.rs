//! The nest-connection autoencoder: encoder (stem conv + ECB10..ECB40),
//! decoder (DCB11..DCB31 + 1x1 output conv), optional deep-supervision
//! heads, and the explicit backward pass used by the trainer.
//!
//! The channel plan is fixed:
//!
//! | block  | in  | out | | block  | in  | out |
//! |--------|-----|-----|-|--------|-----|-----|
//! | stem   | 1   | 16  | | DCB11  | 176 | 64  |
//! | ECB10  | 16  | 64  | | DCB21  | 272 | 112 |
//! | ECB20  | 64  | 112 | | DCB31  | 368 | 160 |
//! | ECB30  | 112 | 160 | | DCB12  | 240 | 64  |
//! | ECB40  | 160 | 208 | | DCB22  | 384 | 112 |
//! | output | 64  | 1   | | DCB13  | 304 | 64  |
//!
//! Every ECB/DCB is two 3x3 stride-1 convolutions with internal width 16,
//! each followed by ReLU. Each encoder scale feature is taken before the
//! 2x2 max-pool; the pooled copy feeds the next ECB (ECB40's pool output is
//! unused). Decoder wiring, with `up` = nearest-neighbor 2x upsampling and
//! `[..]` = channel concatenation:
//!
//! ```text
//! X11 = DCB11([F1, up(F2)])          X12 = DCB12([F1, X11, up(X21)])
//! X21 = DCB21([F2, up(F3)])          X22 = DCB22([F2, X21, up(X31)])
//! X31 = DCB31([F3, up(F4)])          X13 = DCB13([F1, X11, X12, up(X22)])
//! output = ReLU(Conv1x1(X13))
//! ```
//!
//! Concatenation order is fixed: encoder skip first, then same-row nodes
//! left to right, then the upsampled deeper node last.

use crate::ops::{
    add_assign, maxpool2, maxpool2_backward, relu_backward_in_place, split_channels,
    upsample2x_backward, Conv2d,
};
use crate::tensor::FeatureMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub use crate::ops::upsample2x;

/// Channel counts of the four encoder scale features F1..F4.
pub const ENCODER_CHANNELS: [usize; 4] = [64, 112, 160, 208];
/// Output width of the stem convolution.
pub const STEM_WIDTH: usize = 16;
/// Internal width of every ECB and DCB.
pub const BLOCK_WIDTH: usize = 16;
/// Input height and width must be divisible by this (four pooling stages).
pub const SIZE_MULTIPLE: usize = 16;
/// Concatenated input widths of the six decoder blocks, in the order
/// DCB11, DCB21, DCB31, DCB12, DCB22, DCB13.
pub const DECODER_INPUT_CHANNELS: [usize; 6] = [176, 272, 368, 240, 384, 304];

/// Errors from network construction and forward passes.
#[derive(thiserror::Error, Debug)]
pub enum NetworkError {
    #[error("encoder input must be single-channel, got {0} channels")]
    InputChannels(usize),
    #[error("input size {height}x{width} is not divisible by {SIZE_MULTIPLE}")]
    SizeNotDivisible { height: usize, width: usize },
    #[error("multi-scale features do not match the network topology: {0}")]
    Topology(String),
    #[error("deep-supervision heads are not present in this network state")]
    MissingHeads,
}

/// Two 3x3 convolutions with ReLU after each; the body of every ECB and DCB.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvBlock {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
}

impl ConvBlock {
    fn zeros(in_channels: usize, out_channels: usize) -> Self {
        Self {
            conv1: Conv2d::zeros(in_channels, BLOCK_WIDTH, 3),
            conv2: Conv2d::zeros(BLOCK_WIDTH, out_channels, 3),
        }
    }

    /// conv1 -> ReLU -> conv2 -> ReLU.
    pub fn forward(&self, x: &FeatureMap) -> FeatureMap {
        self.conv2.forward_relu(&self.conv1.forward_relu(x))
    }

    /// Forward keeping the internal activation for the backward pass.
    fn forward_traced(&self, x: &FeatureMap) -> (FeatureMap, FeatureMap) {
        let t = self.conv1.forward_relu(x);
        let out = self.conv2.forward_relu(&t);
        (t, out)
    }
}

/// The three 1x1 deep-supervision heads attached to X11, X12, X13.
#[derive(Clone, Debug, PartialEq)]
pub struct DeepSupervisionHeads {
    pub o1: Conv2d,
    pub o2: Conv2d,
    pub o3: Conv2d,
}

/// All learnable parameters plus the metadata echoed into checkpoints.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkState {
    pub stem: Conv2d,
    pub ecb10: ConvBlock,
    pub ecb20: ConvBlock,
    pub ecb30: ConvBlock,
    pub ecb40: ConvBlock,
    pub dcb11: ConvBlock,
    pub dcb12: ConvBlock,
    pub dcb13: ConvBlock,
    pub dcb21: ConvBlock,
    pub dcb22: ConvBlock,
    pub dcb31: ConvBlock,
    pub output: Conv2d,
    pub heads: Option<DeepSupervisionHeads>,
    /// The loss trade-off the weights were trained with, if any; echoed into
    /// checkpoints for provenance.
    pub trained_lambda: Option<f64>,
}

/// The four encoder scale features F1..F4 (or their fused counterparts).
#[derive(Clone, Debug, PartialEq)]
pub struct MultiScaleFeatures {
    pub scales: [FeatureMap; 4],
}

impl MultiScaleFeatures {
    /// Checks the channel plan and the halving chain of spatial sizes.
    pub fn validate(&self) -> Result<(), NetworkError> {
        let (_, h0, w0) = self.scales[0].shape();
        for (m, scale) in self.scales.iter().enumerate() {
            let (c, h, w) = scale.shape();
            if c != ENCODER_CHANNELS[m] {
                return Err(NetworkError::Topology(format!(
                    "scale {} has {} channels, expected {}",
                    m + 1,
                    c,
                    ENCODER_CHANNELS[m]
                )));
            }
            if h != h0 >> m || w != w0 >> m || h == 0 || w == 0 {
                return Err(NetworkError::Topology(format!(
                    "scale {} is {}x{}, expected {}x{}",
                    m + 1,
                    h,
                    w,
                    h0 >> m,
                    w0 >> m
                )));
            }
        }
        Ok(())
    }
}

impl NetworkState {
    pub(crate) fn zeros(deep_supervision: bool) -> Self {
        Self {
            stem: Conv2d::zeros(1, STEM_WIDTH, 3),
            ecb10: ConvBlock::zeros(STEM_WIDTH, ENCODER_CHANNELS[0]),
            ecb20: ConvBlock::zeros(ENCODER_CHANNELS[0], ENCODER_CHANNELS[1]),
            ecb30: ConvBlock::zeros(ENCODER_CHANNELS[1], ENCODER_CHANNELS[2]),
            ecb40: ConvBlock::zeros(ENCODER_CHANNELS[2], ENCODER_CHANNELS[3]),
            dcb11: ConvBlock::zeros(DECODER_INPUT_CHANNELS[0], ENCODER_CHANNELS[0]),
            dcb21: ConvBlock::zeros(DECODER_INPUT_CHANNELS[1], ENCODER_CHANNELS[1]),
            dcb31: ConvBlock::zeros(DECODER_INPUT_CHANNELS[2], ENCODER_CHANNELS[2]),
            dcb12: ConvBlock::zeros(DECODER_INPUT_CHANNELS[3], ENCODER_CHANNELS[0]),
            dcb22: ConvBlock::zeros(DECODER_INPUT_CHANNELS[4], ENCODER_CHANNELS[1]),
            dcb13: ConvBlock::zeros(DECODER_INPUT_CHANNELS[5], ENCODER_CHANNELS[0]),
            output: Conv2d::zeros(ENCODER_CHANNELS[0], 1, 1),
            heads: if deep_supervision {
                Some(DeepSupervisionHeads {
                    o1: Conv2d::zeros(ENCODER_CHANNELS[0], 1, 1),
                    o2: Conv2d::zeros(ENCODER_CHANNELS[0], 1, 1),
                    o3: Conv2d::zeros(ENCODER_CHANNELS[0], 1, 1),
                })
            } else {
                None
            },
            trained_lambda: None,
        }
    }

    /// Whether deep-supervision heads are present.
    pub fn has_heads(&self) -> bool {
        self.heads.is_some()
    }

    /// All convolutions with their canonical names, in canonical order
    /// (checkpoint entry order and optimizer traversal order).
    pub fn convs(&self) -> Vec<(&'static str, &Conv2d)> {
        let mut v = vec![
            ("encoder.conv", &self.stem),
            ("encoder.ecb10.conv1", &self.ecb10.conv1),
            ("encoder.ecb10.conv2", &self.ecb10.conv2),
            ("encoder.ecb20.conv1", &self.ecb20.conv1),
            ("encoder.ecb20.conv2", &self.ecb20.conv2),
            ("encoder.ecb30.conv1", &self.ecb30.conv1),
            ("encoder.ecb30.conv2", &self.ecb30.conv2),
            ("encoder.ecb40.conv1", &self.ecb40.conv1),
            ("encoder.ecb40.conv2", &self.ecb40.conv2),
            ("decoder.dcb11.conv1", &self.dcb11.conv1),
            ("decoder.dcb11.conv2", &self.dcb11.conv2),
            ("decoder.dcb12.conv1", &self.dcb12.conv1),
            ("decoder.dcb12.conv2", &self.dcb12.conv2),
            ("decoder.dcb13.conv1", &self.dcb13.conv1),
            ("decoder.dcb13.conv2", &self.dcb13.conv2),
            ("decoder.dcb21.conv1", &self.dcb21.conv1),
            ("decoder.dcb21.conv2", &self.dcb21.conv2),
            ("decoder.dcb22.conv1", &self.dcb22.conv1),
            ("decoder.dcb22.conv2", &self.dcb22.conv2),
            ("decoder.dcb31.conv1", &self.dcb31.conv1),
            ("decoder.dcb31.conv2", &self.dcb31.conv2),
            ("decoder.conv", &self.output),
        ];
        if let Some(h) = &self.heads {
            v.push(("heads.o1", &h.o1));
            v.push(("heads.o2", &h.o2));
            v.push(("heads.o3", &h.o3));
        }
        v
    }

    /// Mutable counterpart of [`Self::convs`], same order.
    pub(crate) fn convs_mut(&mut self) -> Vec<&mut Conv2d> {
        let mut v = vec![
            &mut self.stem,
            &mut self.ecb10.conv1,
            &mut self.ecb10.conv2,
            &mut self.ecb20.conv1,
            &mut self.ecb20.conv2,
            &mut self.ecb30.conv1,
            &mut self.ecb30.conv2,
            &mut self.ecb40.conv1,
            &mut self.ecb40.conv2,
            &mut self.dcb11.conv1,
            &mut self.dcb11.conv2,
            &mut self.dcb12.conv1,
            &mut self.dcb12.conv2,
            &mut self.dcb13.conv1,
            &mut self.dcb13.conv2,
            &mut self.dcb21.conv1,
            &mut self.dcb21.conv2,
            &mut self.dcb22.conv1,
            &mut self.dcb22.conv2,
            &mut self.dcb31.conv1,
            &mut self.dcb31.conv2,
            &mut self.output,
        ];
        if let Some(h) = &mut self.heads {
            v.push(&mut h.o1);
            v.push(&mut h.o2);
            v.push(&mut h.o3);
        }
        v
    }

    /// Total learnable parameter count.
    pub fn param_count(&self) -> usize {
        self.convs().iter().map(|(_, c)| c.param_count()).sum()
    }
}

/// Deterministic Kaiming-style initialization: kernels drawn from
/// N(0, sqrt(2 / fan_in)), biases zero. The same seed always produces a
/// bit-identical state, and the non-head parameters do not depend on the
/// `deep_supervision` flag.
pub fn init_network(seed: u64, deep_supervision: bool) -> NetworkState {
    let mut state = NetworkState::zeros(deep_supervision);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for conv in state.convs_mut() {
        let fan_in = conv.in_channels * conv.kernel * conv.kernel;
        let normal = Normal::new(0.0f64, (2.0 / fan_in as f64).sqrt()).expect("valid std");
        for w in conv.weight.iter_mut() {
            *w = normal.sample(&mut rng) as f32;
        }
        // biases stay zero
    }
    state
}

/// Encoder forward pass: stem conv then the four ECBs, pooling between
/// scales. Scale features are taken before the pool.
pub fn encode(image: &FeatureMap, state: &NetworkState) -> Result<MultiScaleFeatures, NetworkError> {
    let (c, h, w) = image.shape();
    if c != 1 {
        return Err(NetworkError::InputChannels(c));
    }
    if h == 0 || w == 0 || h % SIZE_MULTIPLE != 0 || w % SIZE_MULTIPLE != 0 {
        return Err(NetworkError::SizeNotDivisible { height: h, width: w });
    }
    let stem = state.stem.forward_relu(image);
    let phi1 = state.ecb10.forward(&stem);
    let (p1, _) = maxpool2(&phi1);
    let phi2 = state.ecb20.forward(&p1);
    let (p2, _) = maxpool2(&phi2);
    let phi3 = state.ecb30.forward(&p2);
    let (p3, _) = maxpool2(&phi3);
    let phi4 = state.ecb40.forward(&p3);
    Ok(MultiScaleFeatures {
        scales: [phi1, phi2, phi3, phi4],
    })
}

/// Decoder forward pass over (possibly fused) multi-scale features.
/// Returns a single-channel image clamped to `[0, 1]`.
pub fn decode(fused: &MultiScaleFeatures, state: &NetworkState) -> Result<FeatureMap, NetworkError> {
    let x13 = decode_to_nodes(fused, state)?.2;
    let mut out = state.output.forward_relu(&x13);
    out.clamp_in_place(0.0, 1.0);
    Ok(out)
}

/// Deep-supervised decoder forward: the three head outputs O1, O2, O3 from
/// X11, X12, X13, each ReLU-activated and clamped to `[0, 1]`.
pub fn decode_deep_supervised(
    fused: &MultiScaleFeatures,
    state: &NetworkState,
) -> Result<[FeatureMap; 3], NetworkError> {
    let heads = state.heads.as_ref().ok_or(NetworkError::MissingHeads)?;
    let (x11, x12, x13) = decode_to_nodes(fused, state)?;
    let mut o1 = heads.o1.forward_relu(&x11);
    let mut o2 = heads.o2.forward_relu(&x12);
    let mut o3 = heads.o3.forward_relu(&x13);
    o1.clamp_in_place(0.0, 1.0);
    o2.clamp_in_place(0.0, 1.0);
    o3.clamp_in_place(0.0, 1.0);
    Ok([o1, o2, o3])
}

/// Shared decoder wiring; returns the top-row nodes (X11, X12, X13).
fn decode_to_nodes(
    fused: &MultiScaleFeatures,
    state: &NetworkState,
) -> Result<(FeatureMap, FeatureMap, FeatureMap), NetworkError> {
    fused.validate()?;
    let [f1, f2, f3, f4] = &fused.scales;
    let x11 = state
        .dcb11
        .forward(&FeatureMap::concat_channels(&[f1, &upsample2x(f2)]));
    let x21 = state
        .dcb21
        .forward(&FeatureMap::concat_channels(&[f2, &upsample2x(f3)]));
    let x31 = state
        .dcb31
        .forward(&FeatureMap::concat_channels(&[f3, &upsample2x(f4)]));
    let x12 = state
        .dcb12
        .forward(&FeatureMap::concat_channels(&[f1, &x11, &upsample2x(&x21)]));
    let x22 = state
        .dcb22
        .forward(&FeatureMap::concat_channels(&[f2, &x21, &upsample2x(&x31)]));
    let x13 = state.dcb13.forward(&FeatureMap::concat_channels(&[
        f1,
        &x11,
        &x12,
        &upsample2x(&x22),
    ]));
    Ok((x11, x12, x13))
}

// ---------------------------------------------------------------------------
// Training support: forward with cached activations and the explicit
// backward pass. Only the trainer uses these.
// ---------------------------------------------------------------------------

/// Gradient buffers for one convolution.
#[derive(Clone, Debug)]
pub(crate) struct ConvGrads {
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

impl ConvGrads {
    fn zeros_like(conv: &Conv2d) -> Self {
        Self {
            weight: vec![0.0; conv.weight.len()],
            bias: vec![0.0; conv.bias.len()],
        }
    }
}

/// Gradient buffers mirroring [`NetworkState`], in canonical conv order.
#[derive(Clone, Debug)]
pub(crate) struct NetworkGrads {
    pub convs: Vec<ConvGrads>,
}

impl NetworkGrads {
    pub fn zeros_like(state: &NetworkState) -> Self {
        Self {
            convs: state
                .convs()
                .iter()
                .map(|(_, c)| ConvGrads::zeros_like(c))
                .collect(),
        }
    }

    pub fn scale(&mut self, s: f32) {
        for g in &mut self.convs {
            for v in g.weight.iter_mut() {
                *v *= s;
            }
            for v in g.bias.iter_mut() {
                *v *= s;
            }
        }
    }
}

/// Positions of each conv's gradient buffer inside `NetworkGrads::convs`,
/// matching the canonical order of `NetworkState::convs`.
mod grad_idx {
    pub const STEM: usize = 0;
    pub const ECB0: usize = 1; // conv1 at ECB0 + 2*m, conv2 at +1
    pub const DCB11: usize = 9;
    pub const DCB12: usize = 11;
    pub const DCB13: usize = 13;
    pub const DCB21: usize = 15;
    pub const DCB22: usize = 17;
    pub const DCB31: usize = 19;
    pub const OUTPUT: usize = 21;
    pub const HEADS: usize = 22;
}

/// Cached activations from one traced forward pass.
pub(crate) struct ForwardTrace {
    input: FeatureMap,
    stem_out: FeatureMap,
    phi: [FeatureMap; 4],
    pooled: [FeatureMap; 3],
    pool_idx: [Vec<u8>; 3],
    ecb_t: [FeatureMap; 4],
    /// DCB internals and inputs indexed [dcb11, dcb12, dcb13, dcb21, dcb22, dcb31].
    dcb_t: [FeatureMap; 6],
    dcb_in: [FeatureMap; 6],
    x11: FeatureMap,
    x12: FeatureMap,
    x13: FeatureMap,
    x21: FeatureMap,
    x22: FeatureMap,
    x31: FeatureMap,
    /// Post-ReLU, unclamped network outputs: [O] or [O1, O2, O3].
    pub outputs: Vec<FeatureMap>,
}

/// Autoencoder forward pass that caches every activation needed by
/// [`backward_trace`]. Outputs are post-ReLU and unclamped so the loss sees
/// the differentiable surface. With `deep_supervision`, outputs are the
/// three head images; otherwise the single main output.
pub(crate) fn forward_trace(
    image: &FeatureMap,
    state: &NetworkState,
    deep_supervision: bool,
) -> Result<ForwardTrace, NetworkError> {
    let (c, h, w) = image.shape();
    if c != 1 {
        return Err(NetworkError::InputChannels(c));
    }
    if h == 0 || w == 0 || h % SIZE_MULTIPLE != 0 || w % SIZE_MULTIPLE != 0 {
        return Err(NetworkError::SizeNotDivisible { height: h, width: w });
    }
    if deep_supervision && state.heads.is_none() {
        return Err(NetworkError::MissingHeads);
    }
    let stem_out = state.stem.forward_relu(image);
    let (t1, phi1) = state.ecb10.forward_traced(&stem_out);
    let (p1, i1) = maxpool2(&phi1);
    let (t2, phi2) = state.ecb20.forward_traced(&p1);
    let (p2, i2) = maxpool2(&phi2);
    let (t3, phi3) = state.ecb30.forward_traced(&p2);
    let (p3, i3) = maxpool2(&phi3);
    let (t4, phi4) = state.ecb40.forward_traced(&p3);

    let in11 = FeatureMap::concat_channels(&[&phi1, &upsample2x(&phi2)]);
    let (t11, x11) = state.dcb11.forward_traced(&in11);
    let in21 = FeatureMap::concat_channels(&[&phi2, &upsample2x(&phi3)]);
    let (t21, x21) = state.dcb21.forward_traced(&in21);
    let in31 = FeatureMap::concat_channels(&[&phi3, &upsample2x(&phi4)]);
    let (t31, x31) = state.dcb31.forward_traced(&in31);
    let in12 = FeatureMap::concat_channels(&[&phi1, &x11, &upsample2x(&x21)]);
    let (t12, x12) = state.dcb12.forward_traced(&in12);
    let in22 = FeatureMap::concat_channels(&[&phi2, &x21, &upsample2x(&x31)]);
    let (t22, x22) = state.dcb22.forward_traced(&in22);
    let in13 = FeatureMap::concat_channels(&[&phi1, &x11, &x12, &upsample2x(&x22)]);
    let (t13, x13) = state.dcb13.forward_traced(&in13);

    let outputs = if deep_supervision {
        let heads = state.heads.as_ref().expect("checked above");
        vec![
            heads.o1.forward_relu(&x11),
            heads.o2.forward_relu(&x12),
            heads.o3.forward_relu(&x13),
        ]
    } else {
        vec![state.output.forward_relu(&x13)]
    };

    Ok(ForwardTrace {
        input: image.clone(),
        stem_out,
        phi: [phi1, phi2, phi3, phi4],
        pooled: [p1, p2, p3],
        pool_idx: [i1, i2, i3],
        ecb_t: [t1, t2, t3, t4],
        dcb_t: [t11, t12, t13, t21, t22, t31],
        dcb_in: [in11, in12, in13, in21, in22, in31],
        x11,
        x12,
        x13,
        x21,
        x22,
        x31,
        outputs,
    })
}

/// Backward through one ECB/DCB body; accumulates parameter gradients and
/// returns the gradient with respect to the block input.
fn block_backward(
    block: &ConvBlock,
    input: &FeatureMap,
    t: &FeatureMap,
    out: &FeatureMap,
    mut grad_out: FeatureMap,
    g1: &mut ConvGrads,
    g2: &mut ConvGrads,
) -> FeatureMap {
    relu_backward_in_place(&mut grad_out, out);
    block
        .conv2
        .backward_params(t, &grad_out, &mut g2.weight, &mut g2.bias);
    let mut grad_t = block.conv2.backward_input(&grad_out);
    relu_backward_in_place(&mut grad_t, t);
    block
        .conv1
        .backward_params(input, &grad_t, &mut g1.weight, &mut g1.bias);
    block.conv1.backward_input(&grad_t)
}

/// Backward through a 1x1 output conv (+ ReLU), returning the gradient with
/// respect to its 64-channel input node.
fn head_backward(
    conv: &Conv2d,
    node: &FeatureMap,
    output: &FeatureMap,
    mut grad_out: FeatureMap,
    g: &mut ConvGrads,
) -> FeatureMap {
    relu_backward_in_place(&mut grad_out, output);
    conv.backward_params(node, &grad_out, &mut g.weight, &mut g.bias);
    conv.backward_input(&grad_out)
}

/// Explicit backward pass. `grad_outputs` must match `trace.outputs` in
/// count and shape (gradients of the loss with respect to each unclamped
/// output). Parameter gradients accumulate into `grads`.
pub(crate) fn backward_trace(
    state: &NetworkState,
    trace: &ForwardTrace,
    grad_outputs: &[FeatureMap],
    grads: &mut NetworkGrads,
) {
    use grad_idx::*;
    assert_eq!(grad_outputs.len(), trace.outputs.len(), "output/gradient count mismatch");

    // Output heads -> gradients on the top-row nodes.
    let (mut g_x11, mut g_x12, g_x13);
    if trace.outputs.len() == 3 {
        let heads = state.heads.as_ref().expect("traced with heads");
        g_x11 = head_backward(
            &heads.o1,
            &trace.x11,
            &trace.outputs[0],
            grad_outputs[0].clone(),
            &mut grads.convs[HEADS],
        );
        g_x12 = head_backward(
            &heads.o2,
            &trace.x12,
            &trace.outputs[1],
            grad_outputs[1].clone(),
            &mut grads.convs[HEADS + 1],
        );
        g_x13 = head_backward(
            &heads.o3,
            &trace.x13,
            &trace.outputs[2],
            grad_outputs[2].clone(),
            &mut grads.convs[HEADS + 2],
        );
    } else {
        let (c, h, w) = trace.x11.shape();
        g_x11 = FeatureMap::zeros(c, h, w);
        g_x12 = FeatureMap::zeros(c, h, w);
        g_x13 = head_backward(
            &state.output,
            &trace.x13,
            &trace.outputs[0],
            grad_outputs[0].clone(),
            &mut grads.convs[OUTPUT],
        );
    }

    // DCB13: input [F1, X11, X12, up(X22)].
    let g_in13 = {
        let (a, b) = grads.convs.split_at_mut(DCB13 + 1);
        let (g1, g2) = (&mut a[DCB13], &mut b[0]);
        block_backward(&state.dcb13, &trace.dcb_in[2], &trace.dcb_t[2], &trace.x13, g_x13, g1, g2)
    };
    let mut parts = split_channels(&g_in13, &[64, 64, 64, 112]);
    let g_x22_up = parts.pop().expect("4 parts");
    let p_x12 = parts.pop().expect("3 parts");
    let p_x11 = parts.pop().expect("2 parts");
    let mut g_phi1 = parts.pop().expect("1 part");
    add_assign(&mut g_x11, &p_x11);
    add_assign(&mut g_x12, &p_x12);
    let g_x22 = upsample2x_backward(&g_x22_up);

    // DCB12: input [F1, X11, up(X21)].
    let g_in12 = {
        let (a, b) = grads.convs.split_at_mut(DCB12 + 1);
        let (g1, g2) = (&mut a[DCB12], &mut b[0]);
        block_backward(&state.dcb12, &trace.dcb_in[1], &trace.dcb_t[1], &trace.x12, g_x12, g1, g2)
    };
    let mut parts = split_channels(&g_in12, &[64, 64, 112]);
    let g_x21_up = parts.pop().expect("3 parts");
    let p_x11 = parts.pop().expect("2 parts");
    add_assign(&mut g_phi1, &parts.pop().expect("1 part"));
    add_assign(&mut g_x11, &p_x11);
    let mut g_x21 = upsample2x_backward(&g_x21_up);

    // DCB22: input [F2, X21, up(X31)].
    let g_in22 = {
        let (a, b) = grads.convs.split_at_mut(DCB22 + 1);
        let (g1, g2) = (&mut a[DCB22], &mut b[0]);
        block_backward(&state.dcb22, &trace.dcb_in[4], &trace.dcb_t[4], &trace.x22, g_x22, g1, g2)
    };
    let mut parts = split_channels(&g_in22, &[112, 112, 160]);
    let g_x31_up = parts.pop().expect("3 parts");
    let p_x21 = parts.pop().expect("2 parts");
    let mut g_phi2 = parts.pop().expect("1 part");
    add_assign(&mut g_x21, &p_x21);
    let g_x31 = upsample2x_backward(&g_x31_up);

    // DCB11: input [F1, up(F2)].
    let g_in11 = {
        let (a, b) = grads.convs.split_at_mut(DCB11 + 1);
        let (g1, g2) = (&mut a[DCB11], &mut b[0]);
        block_backward(&state.dcb11, &trace.dcb_in[0], &trace.dcb_t[0], &trace.x11, g_x11, g1, g2)
    };
    let mut parts = split_channels(&g_in11, &[64, 112]);
    let g_phi2_up = parts.pop().expect("2 parts");
    add_assign(&mut g_phi1, &parts.pop().expect("1 part"));
    add_assign(&mut g_phi2, &upsample2x_backward(&g_phi2_up));

    // DCB21: input [F2, up(F3)].
    let g_in21 = {
        let (a, b) = grads.convs.split_at_mut(DCB21 + 1);
        let (g1, g2) = (&mut a[DCB21], &mut b[0]);
        block_backward(&state.dcb21, &trace.dcb_in[3], &trace.dcb_t[3], &trace.x21, g_x21, g1, g2)
    };
    let mut parts = split_channels(&g_in21, &[112, 160]);
    let g_phi3_up = parts.pop().expect("2 parts");
    add_assign(&mut g_phi2, &parts.pop().expect("1 part"));
    let mut g_phi3 = upsample2x_backward(&g_phi3_up);

    // DCB31: input [F3, up(F4)].
    let g_in31 = {
        let (a, b) = grads.convs.split_at_mut(DCB31 + 1);
        let (g1, g2) = (&mut a[DCB31], &mut b[0]);
        block_backward(&state.dcb31, &trace.dcb_in[5], &trace.dcb_t[5], &trace.x31, g_x31, g1, g2)
    };
    let mut parts = split_channels(&g_in31, &[160, 208]);
    let g_phi4_up = parts.pop().expect("2 parts");
    add_assign(&mut g_phi3, &parts.pop().expect("1 part"));
    let g_phi4 = upsample2x_backward(&g_phi4_up);

    // Encoder chain, deepest first. Each ECB's input gradient flows through
    // the preceding max-pool onto the previous scale feature.
    let g_p3 = {
        let (a, b) = grads.convs.split_at_mut(ECB0 + 7);
        let (g1, g2) = (&mut a[ECB0 + 6], &mut b[0]);
        block_backward(&state.ecb40, &trace.pooled[2], &trace.ecb_t[3], &trace.phi[3], g_phi4, g1, g2)
    };
    {
        let (_, ph, pw) = trace.phi[2].shape();
        add_assign(&mut g_phi3, &maxpool2_backward(&g_p3, &trace.pool_idx[2], ph, pw));
    }
    let g_p2 = {
        let (a, b) = grads.convs.split_at_mut(ECB0 + 5);
        let (g1, g2) = (&mut a[ECB0 + 4], &mut b[0]);
        block_backward(&state.ecb30, &trace.pooled[1], &trace.ecb_t[2], &trace.phi[2], g_phi3, g1, g2)
    };
    {
        let (_, ph, pw) = trace.phi[1].shape();
        add_assign(&mut g_phi2, &maxpool2_backward(&g_p2, &trace.pool_idx[1], ph, pw));
    }
    let g_p1 = {
        let (a, b) = grads.convs.split_at_mut(ECB0 + 3);
        let (g1, g2) = (&mut a[ECB0 + 2], &mut b[0]);
        block_backward(&state.ecb20, &trace.pooled[0], &trace.ecb_t[1], &trace.phi[1], g_phi2, g1, g2)
    };
    {
        let (_, ph, pw) = trace.phi[0].shape();
        add_assign(&mut g_phi1, &maxpool2_backward(&g_p1, &trace.pool_idx[0], ph, pw));
    }
    let g_stem = {
        let (a, b) = grads.convs.split_at_mut(ECB0 + 1);
        let (g1, g2) = (&mut a[ECB0], &mut b[0]);
        block_backward(&state.ecb10, &trace.stem_out, &trace.ecb_t[0], &trace.phi[0], g_phi1, g1, g2)
    };
    let mut g_stem = g_stem;
    relu_backward_in_place(&mut g_stem, &trace.stem_out);
    let g = &mut grads.convs[STEM];
    state
        .stem
        .backward_params(&trace.input, &g_stem, &mut g.weight, &mut g.bias);
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn random_image(seed: u64, h: usize, w: usize) -> FeatureMap {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..h * w).map(|_| rng.gen_range(0.0..1.0)).collect();
        FeatureMap::from_vec(1, h, w, data)
    }

    #[test]
    fn topology_matches_channel_plan() {
        let state = init_network(1, true);
        let expect: &[(&str, usize, usize, usize)] = &[
            ("encoder.conv", 1, 16, 3),
            ("encoder.ecb10.conv1", 16, 16, 3),
            ("encoder.ecb10.conv2", 16, 64, 3),
            ("encoder.ecb20.conv1", 64, 16, 3),
            ("encoder.ecb20.conv2", 16, 112, 3),
            ("encoder.ecb30.conv1", 112, 16, 3),
            ("encoder.ecb30.conv2", 16, 160, 3),
            ("encoder.ecb40.conv1", 160, 16, 3),
            ("encoder.ecb40.conv2", 16, 208, 3),
            ("decoder.dcb11.conv1", 176, 16, 3),
            ("decoder.dcb11.conv2", 16, 64, 3),
            ("decoder.dcb12.conv1", 240, 16, 3),
            ("decoder.dcb12.conv2", 16, 64, 3),
            ("decoder.dcb13.conv1", 304, 16, 3),
            ("decoder.dcb13.conv2", 16, 64, 3),
            ("decoder.dcb21.conv1", 272, 16, 3),
            ("decoder.dcb21.conv2", 16, 112, 3),
            ("decoder.dcb22.conv1", 384, 16, 3),
            ("decoder.dcb22.conv2", 16, 112, 3),
            ("decoder.dcb31.conv1", 368, 16, 3),
            ("decoder.dcb31.conv2", 16, 160, 3),
            ("decoder.conv", 64, 1, 1),
            ("heads.o1", 64, 1, 1),
            ("heads.o2", 64, 1, 1),
            ("heads.o3", 64, 1, 1),
        ];
        let convs = state.convs();
        assert_eq!(convs.len(), expect.len());
        for ((name, conv), &(ename, ein, eout, ek)) in convs.iter().zip(expect) {
            assert_eq!(*name, ename);
            assert_eq!((conv.in_channels, conv.out_channels, conv.kernel), (ein, eout, ek), "{name}");
        }
    }

    #[test]
    fn encode_shapes_follow_scale_chain() {
        let state = init_network(2, false);
        let img = random_image(3, 64, 48);
        let feats = encode(&img, &state).unwrap();
        let shapes: Vec<_> = feats.scales.iter().map(|s| s.shape()).collect();
        assert_eq!(
            shapes,
            vec![(64, 64, 48), (112, 32, 24), (160, 16, 12), (208, 8, 6)]
        );
        // 16x16 input: spatial sizes 16, 8, 4, 2.
        let img = random_image(4, 16, 16);
        let feats = encode(&img, &state).unwrap();
        let sizes: Vec<_> = feats.scales.iter().map(|s| (s.height(), s.width())).collect();
        assert_eq!(sizes, vec![(16, 16), (8, 8), (4, 4), (2, 2)]);
    }

    #[test]
    fn encode_rejects_bad_inputs() {
        let state = init_network(5, false);
        let img = FeatureMap::zeros(1, 60, 64);
        assert!(matches!(
            encode(&img, &state),
            Err(NetworkError::SizeNotDivisible { .. })
        ));
        let img = FeatureMap::zeros(3, 64, 64);
        assert!(matches!(encode(&img, &state), Err(NetworkError::InputChannels(3))));
    }

    #[test]
    fn zero_input_zero_biases_gives_zero_everywhere() {
        let state = init_network(6, false);
        let img = FeatureMap::zeros(1, 32, 32);
        let feats = encode(&img, &state).unwrap();
        for s in &feats.scales {
            assert_eq!(s.max_value(), 0.0);
            assert_eq!(s.min_value(), 0.0);
        }
        let out = decode(&feats, &state).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn encode_decode_deterministic_and_nonnegative() {
        let state = init_network(7, false);
        let img = random_image(8, 32, 32);
        let f1 = encode(&img, &state).unwrap();
        let f2 = encode(&img, &state).unwrap();
        for (a, b) in f1.scales.iter().zip(&f2.scales) {
            assert_eq!(a, b, "encode must be bit-deterministic");
            assert!(a.min_value() >= 0.0, "post-ReLU features must be non-negative");
        }
        let d1 = decode(&f1, &state).unwrap();
        let d2 = decode(&f2, &state).unwrap();
        assert_eq!(d1, d2, "decode must be bit-deterministic");
        assert!(d1.min_value() >= 0.0 && d1.max_value() <= 1.0);
    }

    #[test]
    fn init_is_seed_deterministic() {
        let a = init_network(42, true);
        let b = init_network(42, true);
        assert_eq!(a, b);
        let c = init_network(43, true);
        let differs = a
            .convs()
            .iter()
            .zip(c.convs())
            .any(|((_, x), (_, y))| x.weight != y.weight);
        assert!(differs, "different seeds must differ somewhere");
        // Non-head weights must not depend on the deep-supervision flag.
        let d = init_network(42, false);
        assert_eq!(a.stem, d.stem);
        assert_eq!(a.dcb13, d.dcb13);
        assert_eq!(a.output, d.output);
    }

    #[test]
    fn decode_validates_topology() {
        let state = init_network(9, false);
        let img = random_image(10, 32, 32);
        let mut feats = encode(&img, &state).unwrap();
        feats.scales[2] = FeatureMap::zeros(161, 8, 8);
        assert!(matches!(decode(&feats, &state), Err(NetworkError::Topology(_))));
        let mut feats = encode(&img, &state).unwrap();
        feats.scales[1] = FeatureMap::zeros(112, 12, 16);
        assert!(matches!(decode(&feats, &state), Err(NetworkError::Topology(_))));
    }

    #[test]
    fn concat_order_permutation_changes_output() {
        let state = init_network(11, false);
        let img = random_image(12, 32, 32);
        let feats = encode(&img, &state).unwrap();
        let [f1, f2, _, _] = &feats.scales;
        let up2 = upsample2x(f2);
        let correct = state.dcb11.forward(&FeatureMap::concat_channels(&[f1, &up2]));
        let permuted = state.dcb11.forward(&FeatureMap::concat_channels(&[&up2, f1]));
        assert!(
            correct.max_abs_diff(&permuted) > 1e-3,
            "swapping concat order must change the block output"
        );
    }

    #[test]
    fn deep_supervision_outputs_and_errors() {
        let state = init_network(13, true);
        let img = random_image(14, 32, 32);
        let feats = encode(&img, &state).unwrap();
        let [o1, o2, o3] = decode_deep_supervised(&feats, &state).unwrap();
        assert_eq!(o1.shape(), (1, 32, 32));
        assert_eq!(o2.shape(), (1, 32, 32));
        assert_eq!(o3.shape(), (1, 32, 32));
        let plain = init_network(13, false);
        assert!(matches!(
            decode_deep_supervised(&feats, &plain),
            Err(NetworkError::MissingHeads)
        ));
    }

    #[test]
    fn equal_heads_on_equal_nodes_give_equal_outputs() {
        // Degenerate wiring: all DCB weights zero, equal head biases, so
        // X11 = X12 = X13 = 0 and each head output is the shared bias.
        let mut state = init_network(15, true);
        for dcb in [
            &mut state.dcb11,
            &mut state.dcb12,
            &mut state.dcb13,
            &mut state.dcb21,
            &mut state.dcb22,
            &mut state.dcb31,
        ] {
            dcb.conv1.weight.iter_mut().for_each(|w| *w = 0.0);
            dcb.conv2.weight.iter_mut().for_each(|w| *w = 0.0);
        }
        if let Some(h) = &mut state.heads {
            for head in [&mut h.o1, &mut h.o2, &mut h.o3] {
                head.weight.iter_mut().for_each(|w| *w = 0.25);
                head.bias[0] = 0.125;
            }
        }
        let img = random_image(16, 32, 32);
        let feats = encode(&img, &state).unwrap();
        let [o1, o2, o3] = decode_deep_supervised(&feats, &state).unwrap();
        assert_eq!(o1, o2);
        assert_eq!(o2, o3);
        assert!(o1.data().iter().all(|&v| (v - 0.125).abs() < 1e-7));
    }

    #[test]
    fn traced_forward_matches_plain_decode() {
        let state = init_network(17, false);
        let img = random_image(18, 32, 48);
        let trace = forward_trace(&img, &state, false).unwrap();
        let feats = encode(&img, &state).unwrap();
        let plain = decode(&feats, &state).unwrap();
        let mut traced = trace.outputs[0].clone();
        traced.clamp_in_place(0.0, 1.0);
        assert_eq!(plain, traced, "trace and plain paths must agree bit-exactly");
    }
}
