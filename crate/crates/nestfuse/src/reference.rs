//! Slow double-precision reference forward pass.
//!
//! This module re-implements the autoencoder forward pass with naive f64
//! loops and no shared code with the optimized kernels in [`crate::ops`].
//! It exists to verify them: the test suite compares the fast f32 path
//! against this one, and checks the hand-written backward pass against
//! central differences taken on this surface, where numeric differentiation
//! is accurate to ~1e-9.
//!
//! Outputs are post-ReLU and unclamped, matching the surface the loss is
//! differentiated on. Not intended for production inference.

use crate::network::NetworkState;
use crate::ops::Conv2d;
use crate::tensor::FeatureMap;

/// A CHW row-major f64 tensor.
#[derive(Clone, Debug)]
pub struct Map64 {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Map64 {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn from_feature_map(m: &FeatureMap) -> Self {
        Self {
            channels: m.channels(),
            height: m.height(),
            width: m.width(),
            data: m.data().iter().map(|&v| v as f64).collect(),
        }
    }

    fn plane(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    fn plane_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.height * self.width;
        &mut self.data[c * n..(c + 1) * n]
    }
}

/// Same-padded convolution followed by ReLU, all in f64.
fn conv_relu(x: &Map64, conv: &Conv2d) -> Map64 {
    assert_eq!(x.channels, conv.in_channels);
    let (h, w, k) = (x.height, x.width, conv.kernel);
    let pad = k / 2;
    let mut out = Map64::zeros(conv.out_channels, h, w);
    for oc in 0..conv.out_channels {
        let bias = conv.bias[oc] as f64;
        out.plane_mut(oc).fill(bias);
        for ic in 0..conv.in_channels {
            let xin = x.plane(ic);
            for ky in 0..k {
                for kx in 0..k {
                    let wgt =
                        conv.weight[((oc * conv.in_channels + ic) * k + ky) * k + kx] as f64;
                    let oplane = out.plane_mut(oc);
                    // x + kx - pad must land in [0, w).
                    let x_lo = pad.saturating_sub(kx);
                    let x_hi = (w + pad - kx).min(w);
                    for y in 0..h {
                        let yy = y + ky;
                        if yy < pad || yy >= h + pad {
                            continue;
                        }
                        let yin = yy - pad;
                        let orow = &mut oplane[y * w + x_lo..y * w + x_hi];
                        let irow = &xin[yin * w + x_lo + kx - pad..][..x_hi - x_lo];
                        for (o, i) in orow.iter_mut().zip(irow) {
                            *o += wgt * *i;
                        }
                    }
                }
            }
        }
    }
    for v in out.data.iter_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    out
}

fn block(x: &Map64, b: &crate::network::ConvBlock) -> Map64 {
    conv_relu(&conv_relu(x, &b.conv1), &b.conv2)
}

fn maxpool2(x: &Map64) -> Map64 {
    let (h, w) = (x.height / 2, x.width / 2);
    let mut out = Map64::zeros(x.channels, h, w);
    for c in 0..x.channels {
        let xin = x.plane(c);
        let o = out.plane_mut(c);
        for y in 0..h {
            for xo in 0..w {
                let a = xin[(2 * y) * x.width + 2 * xo];
                let b = xin[(2 * y) * x.width + 2 * xo + 1];
                let cc = xin[(2 * y + 1) * x.width + 2 * xo];
                let d = xin[(2 * y + 1) * x.width + 2 * xo + 1];
                o[y * w + xo] = a.max(b).max(cc).max(d);
            }
        }
    }
    out
}

fn upsample2x(x: &Map64) -> Map64 {
    let mut out = Map64::zeros(x.channels, x.height * 2, x.width * 2);
    for c in 0..x.channels {
        let xin = x.plane(c);
        let (w, ow) = (x.width, x.width * 2);
        let o = out.plane_mut(c);
        for y in 0..x.height {
            for xo in 0..w {
                let v = xin[y * w + xo];
                o[(2 * y) * ow + 2 * xo] = v;
                o[(2 * y) * ow + 2 * xo + 1] = v;
                o[(2 * y + 1) * ow + 2 * xo] = v;
                o[(2 * y + 1) * ow + 2 * xo + 1] = v;
            }
        }
    }
    out
}

fn concat(parts: &[&Map64]) -> Map64 {
    let (h, w) = (parts[0].height, parts[0].width);
    let channels = parts.iter().map(|p| p.channels).sum();
    let mut out = Map64::zeros(channels, h, w);
    let mut offset = 0;
    for p in parts {
        assert_eq!((p.height, p.width), (h, w));
        out.data[offset..offset + p.data.len()].copy_from_slice(&p.data);
        offset += p.data.len();
    }
    out
}

/// Reference encoder: the four scale features in f64.
pub fn encode_f64(image: &Map64, state: &NetworkState) -> [Map64; 4] {
    let stem = conv_relu(image, &state.stem);
    let phi1 = block(&stem, &state.ecb10);
    let phi2 = block(&maxpool2(&phi1), &state.ecb20);
    let phi3 = block(&maxpool2(&phi2), &state.ecb30);
    let phi4 = block(&maxpool2(&phi3), &state.ecb40);
    [phi1, phi2, phi3, phi4]
}

/// Reference forward pass. Returns the unclamped post-ReLU outputs: the
/// single main output, or the three head outputs when `deep_supervision`.
pub fn forward_f64(image: &Map64, state: &NetworkState, deep_supervision: bool) -> Vec<Map64> {
    let [phi1, phi2, phi3, phi4] = encode_f64(image, state);
    let x11 = block(&concat(&[&phi1, &upsample2x(&phi2)]), &state.dcb11);
    let x21 = block(&concat(&[&phi2, &upsample2x(&phi3)]), &state.dcb21);
    let x31 = block(&concat(&[&phi3, &upsample2x(&phi4)]), &state.dcb31);
    let x12 = block(&concat(&[&phi1, &x11, &upsample2x(&x21)]), &state.dcb12);
    let x22 = block(&concat(&[&phi2, &x21, &upsample2x(&x31)]), &state.dcb22);
    let x13 = block(&concat(&[&phi1, &x11, &x12, &upsample2x(&x22)]), &state.dcb13);
    if deep_supervision {
        let heads = state.heads.as_ref().expect("heads required");
        vec![
            conv_relu(&x11, &heads.o1),
            conv_relu(&x12, &heads.o2),
            conv_relu(&x13, &heads.o3),
        ]
    } else {
        vec![conv_relu(&x13, &state.output)]
    }
}
