//! Training objective: pixel loss, SSIM loss, their weighted total, the
//! deep-supervised variant, and analytic gradients with respect to the
//! network output.
//!
//! All values are computed in f64. SSIM uses 11×11 Gaussian windows
//! (σ = 1.5, K1 = 0.01, K2 = 0.03) over a dynamic range of 1.0, evaluated
//! on fully interior (valid) windows; images smaller than the window
//! shrink it per axis to `min(dim, 11)` with the Gaussian renormalized.

use crate::plane::{gaussian_kernel, Plane64};
use crate::tensor::FeatureMap;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;
const SSIM_RANGE: f64 = 1.0;

/// Errors from loss computations.
#[derive(thiserror::Error, Debug)]
pub enum LossError {
    #[error("images disagree in shape: {left:?} vs {right:?} (channels, height, width)")]
    ShapeMismatch {
        left: (usize, usize, usize),
        right: (usize, usize, usize),
    },
    #[error("SSIM requires single-channel images, got {0} channels")]
    NotSingleChannel(usize),
    #[error("deep supervision expects exactly 3 outputs, got {0}")]
    WrongOutputCount(usize),
}

/// Per-iteration loss record. `total` is always reconstructed as
/// `pixel + lambda * ssim`, exactly.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub pixel: f64,
    pub ssim: f64,
    pub total: f64,
    pub lambda: f64,
}

fn check_same_shape(a: &FeatureMap, b: &FeatureMap) -> Result<(), LossError> {
    if a.shape() != b.shape() {
        return Err(LossError::ShapeMismatch {
            left: a.shape(),
            right: b.shape(),
        });
    }
    Ok(())
}

fn check_ssim_input(a: &FeatureMap, b: &FeatureMap) -> Result<(), LossError> {
    check_same_shape(a, b)?;
    if a.channels() != 1 {
        return Err(LossError::NotSingleChannel(a.channels()));
    }
    assert!(a.height() >= 1 && a.width() >= 1, "SSIM needs a non-empty image");
    Ok(())
}

/// Squared Frobenius norm of `output - target`.
pub fn pixel_loss(output: &FeatureMap, target: &FeatureMap) -> Result<f64, LossError> {
    check_same_shape(output, target)?;
    Ok(output
        .data()
        .iter()
        .zip(target.data())
        .map(|(&o, &t)| {
            let d = o as f64 - t as f64;
            d * d
        })
        .sum())
}

/// Gradient of [`pixel_loss`] with respect to `output`: `2 (output - target)`.
pub fn pixel_loss_grad(output: &FeatureMap, target: &FeatureMap) -> Result<FeatureMap, LossError> {
    check_same_shape(output, target)?;
    let (c, h, w) = output.shape();
    let data = output
        .data()
        .iter()
        .zip(target.data())
        .map(|(&o, &t)| 2.0 * (o - t))
        .collect();
    Ok(FeatureMap::from_vec(c, h, w, data))
}

/// Mean local SSIM between two single-channel images; range [-1, 1] and
/// exactly 1 for identical images.
pub fn ssim_index(a: &FeatureMap, b: &FeatureMap) -> Result<f64, LossError> {
    check_ssim_input(a, b)?;
    let pa = Plane64::from_channel(a, 0);
    let pb = Plane64::from_channel(b, 0);
    Ok(ssim_eval(&pa, &pb, false).0)
}

/// Structural dissimilarity: `1 - ssim_index`.
pub fn ssim_loss(output: &FeatureMap, target: &FeatureMap) -> Result<f64, LossError> {
    Ok(1.0 - ssim_index(output, target)?)
}

/// Gradient of [`ssim_loss`] with respect to `output`.
pub fn ssim_loss_grad(output: &FeatureMap, target: &FeatureMap) -> Result<FeatureMap, LossError> {
    check_ssim_input(output, target)?;
    let pa = Plane64::from_channel(output, 0);
    let pb = Plane64::from_channel(target, 0);
    let (_, grad) = ssim_eval(&pa, &pb, true);
    let grad = grad.expect("gradient requested");
    let (_, h, w) = output.shape();
    // d(1 - SSIM)/dO = -dSSIM/dO.
    let data = grad.data.iter().map(|&v| -v as f32).collect();
    Ok(FeatureMap::from_vec(1, h, w, data))
}

/// Weighted objective: `pixel + lambda * ssim_loss`. Accepts `lambda >= 0`.
pub fn total_loss(
    output: &FeatureMap,
    target: &FeatureMap,
    lambda: f64,
) -> Result<LossBreakdown, LossError> {
    let pixel = pixel_loss(output, target)?;
    let ssim = ssim_loss(output, target)?;
    Ok(LossBreakdown {
        pixel,
        ssim,
        total: pixel + lambda * ssim,
        lambda,
    })
}

/// Gradient of the total loss with respect to `output`.
pub fn total_loss_grad(
    output: &FeatureMap,
    target: &FeatureMap,
    lambda: f64,
) -> Result<FeatureMap, LossError> {
    let mut grad = pixel_loss_grad(output, target)?;
    let sgrad = ssim_loss_grad(output, target)?;
    for (g, &s) in grad.data_mut().iter_mut().zip(sgrad.data()) {
        *g += lambda as f32 * s;
    }
    Ok(grad)
}

/// Deep-supervised objective: the mean of `total_loss` over the three head
/// outputs.
pub fn deep_supervised_loss(
    target: &FeatureMap,
    outputs: &[FeatureMap],
    lambda: f64,
) -> Result<f64, LossError> {
    if outputs.len() != 3 {
        return Err(LossError::WrongOutputCount(outputs.len()));
    }
    let mut sum = 0.0;
    for o in outputs {
        sum += total_loss(o, target, lambda)?.total;
    }
    Ok(sum / 3.0)
}

/// Shared SSIM evaluation: returns the index and, when requested, its
/// gradient with respect to `a`.
///
/// With G the (shrunk, renormalized) Gaussian window and valid positions p:
/// A = (G*a)(p), B = (G*b)(p), Pa = (G*a²)(p), Pb = (G*b²)(p),
/// Pab = (G*ab)(p), the local map is l(p)·cs(p) with
/// l = (2AB + C1)/(A² + B² + C1) and
/// cs = (2(Pab − AB) + C2)/(Pa − A² + Pb − B² + C2).
/// The gradient flows through A, Pa, and Pab; the field partials are
/// scattered back through the adjoint of the window correlation.
fn ssim_eval(a: &Plane64, b: &Plane64, want_grad: bool) -> (f64, Option<Plane64>) {
    let c1 = (SSIM_K1 * SSIM_RANGE) * (SSIM_K1 * SSIM_RANGE);
    let c2 = (SSIM_K2 * SSIM_RANGE) * (SSIM_K2 * SSIM_RANGE);
    let ky = gaussian_kernel(a.height.min(SSIM_WINDOW), SSIM_SIGMA);
    let kx = gaussian_kernel(a.width.min(SSIM_WINDOW), SSIM_SIGMA);

    let mu_a = a.valid_correlate_sep(&ky, &kx);
    let mu_b = b.valid_correlate_sep(&ky, &kx);
    let p_aa = a.mul(a).valid_correlate_sep(&ky, &kx);
    let p_bb = b.mul(b).valid_correlate_sep(&ky, &kx);
    let p_ab = a.mul(b).valid_correlate_sep(&ky, &kx);

    let n = mu_a.len() as f64;
    let mut value = 0.0;
    let mut d_mu = want_grad.then(|| Plane64::zeros(mu_a.height, mu_a.width));
    let mut d_paa = want_grad.then(|| Plane64::zeros(mu_a.height, mu_a.width));
    let mut d_pab = want_grad.then(|| Plane64::zeros(mu_a.height, mu_a.width));

    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a.data[i], mu_b.data[i]);
        let n1 = 2.0 * ma * mb + c1;
        let d1 = ma * ma + mb * mb + c1;
        let n2 = 2.0 * (p_ab.data[i] - ma * mb) + c2;
        let d2 = (p_aa.data[i] - ma * ma) + (p_bb.data[i] - mb * mb) + c2;
        let l = n1 / d1;
        let cs = n2 / d2;
        value += l * cs;
        if want_grad {
            let dl_da = (2.0 * mb * d1 - 2.0 * ma * n1) / (d1 * d1);
            let dcs_da = (2.0 * ma * n2 - 2.0 * mb * d2) / (d2 * d2);
            d_mu.as_mut().unwrap().data[i] = (cs * dl_da + l * dcs_da) / n;
            d_paa.as_mut().unwrap().data[i] = -(l * n2) / (d2 * d2) / n;
            d_pab.as_mut().unwrap().data[i] = (2.0 * l / d2) / n;
        }
    }
    value /= n;

    let grad = want_grad.then(|| {
        let adj_mu = d_mu.unwrap().adjoint_correlate_sep(&ky, &kx, a.height, a.width);
        let adj_paa = d_paa.unwrap().adjoint_correlate_sep(&ky, &kx, a.height, a.width);
        let adj_pab = d_pab.unwrap().adjoint_correlate_sep(&ky, &kx, a.height, a.width);
        let mut g = Plane64::zeros(a.height, a.width);
        for i in 0..g.len() {
            g.data[i] = adj_mu.data[i]
                + 2.0 * a.data[i] * adj_paa.data[i]
                + b.data[i] * adj_pab.data[i];
        }
        g
    });
    (value, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Images quantized to the 1/256 grid so f32 central-difference steps
    /// of 2^-10 are exact.
    fn quantized_image(seed: u64, h: usize, w: usize) -> FeatureMap {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..h * w)
            .map(|_| rng.gen_range(0u32..=255) as f32 / 256.0)
            .collect();
        FeatureMap::from_vec(1, h, w, data)
    }

    /// Mid-contrast textured image: smooth waves plus noise.
    fn textured_image(seed: u64, h: usize, w: usize) -> FeatureMap {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = FeatureMap::from_fn(h, w, |y, x| {
            0.5 + 0.2 * (x as f32 / 3.0).sin() * (y as f32 / 5.0).cos()
        });
        for v in m.data_mut() {
            *v = (*v + rng.gen_range(-0.1..0.1)).clamp(0.0, 1.0);
        }
        m
    }

    /// Direct per-window SSIM: explicit double loop over every window,
    /// independent of the separable-filter machinery.
    fn ssim_direct(a: &FeatureMap, b: &FeatureMap) -> f64 {
        let (h, w) = (a.height(), a.width());
        let ky = gaussian_kernel(h.min(11), 1.5);
        let kx = gaussian_kernel(w.min(11), 1.5);
        let (c1, c2) = (1e-4, 9e-4);
        let mut sum = 0.0;
        let mut count = 0usize;
        for y in 0..=(h - ky.len()) {
            for x in 0..=(w - kx.len()) {
                let (mut ma, mut mb, mut paa, mut pbb, mut pab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for i in 0..ky.len() {
                    for j in 0..kx.len() {
                        let g = ky[i] * kx[j];
                        let va = a.get(0, y + i, x + j) as f64;
                        let vb = b.get(0, y + i, x + j) as f64;
                        ma += g * va;
                        mb += g * vb;
                        paa += g * va * va;
                        pbb += g * vb * vb;
                        pab += g * va * vb;
                    }
                }
                let saa = paa - ma * ma;
                let sbb = pbb - mb * mb;
                let sab = pab - ma * mb;
                sum += ((2.0 * ma * mb + c1) * (2.0 * sab + c2))
                    / ((ma * ma + mb * mb + c1) * (saa + sbb + c2));
                count += 1;
            }
        }
        sum / count as f64
    }

    #[test]
    fn pixel_loss_examples_and_oracle() {
        let i = quantized_image(1, 4, 4);
        assert_eq!(pixel_loss(&i, &i).unwrap(), 0.0);
        let o = FeatureMap::from_vec(1, 2, 2, vec![1.0; 4]);
        let z = FeatureMap::zeros(1, 2, 2);
        assert_eq!(pixel_loss(&o, &z).unwrap(), 4.0);
        let a = quantized_image(2, 5, 7);
        let b = quantized_image(3, 5, 7);
        let oracle: f64 = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
            .sum();
        let got = pixel_loss(&a, &b).unwrap();
        assert!((got - oracle).abs() <= 1e-7 * oracle.max(1.0));
    }

    #[test]
    fn ssim_identity_and_constant_closed_form() {
        let i = textured_image(4, 20, 20);
        assert!((ssim_index(&i, &i).unwrap() - 1.0).abs() < 1e-12);
        // Constant images: contrast/structure terms are exactly 1, leaving
        // the luminance term (2ab + C1) / (a² + b² + C1).
        let a = FeatureMap::from_vec(1, 16, 16, vec![0.2; 256]);
        let b = FeatureMap::from_vec(1, 16, 16, vec![0.4; 256]);
        let expect = (2.0 * 0.2 * 0.4 + 1e-4) / (0.04f64 + 0.16 + 1e-4);
        assert!((ssim_index(&a, &b).unwrap() - expect).abs() < 1e-9);
    }

    #[test]
    fn ssim_matches_direct_reference_and_detects_inversion() {
        for seed in [5u64, 6, 7] {
            let i = textured_image(seed, 24, 18);
            let inv = i.map(|v| 1.0 - v);
            let fast = ssim_index(&i, &inv).unwrap();
            let direct = ssim_direct(&i, &inv);
            assert!((fast - direct).abs() < 1e-9, "seed {seed}: {fast} vs {direct}");
            assert!(fast < 0.2, "inverted image should score low, got {fast}");
            let j = textured_image(seed + 100, 24, 18);
            let fast = ssim_index(&i, &j).unwrap();
            let direct = ssim_direct(&i, &j);
            assert!((fast - direct).abs() < 1e-9);
        }
    }

    #[test]
    fn ssim_window_shrinks_on_small_images() {
        for (h, w) in [(8, 8), (4, 12), (1, 1), (2, 30)] {
            let i = quantized_image(8, h, w);
            assert!((ssim_index(&i, &i).unwrap() - 1.0).abs() < 1e-12, "{h}x{w}");
        }
    }

    #[test]
    fn total_loss_breakdown_and_lambda_grid() {
        let o = quantized_image(9, 12, 12);
        let t = quantized_image(10, 12, 12);
        for lambda in [0.0, 1.0, 10.0, 100.0, 1000.0] {
            let lb = total_loss(&o, &t, lambda).unwrap();
            assert_eq!(lb.total, lb.pixel + lambda * lb.ssim, "exact recomposition");
            assert!(lb.pixel >= 0.0 && lb.total.is_finite());
        }
        let zero = total_loss(&o, &t, 0.0).unwrap();
        assert_eq!(zero.total, zero.pixel);
        let same = total_loss(&o, &o, 100.0).unwrap();
        assert_eq!(same.pixel, 0.0);
        assert!(same.ssim.abs() < 1e-12 && same.total.abs() < 1e-9);
    }

    #[test]
    fn deep_supervised_loss_examples() {
        let i = quantized_image(11, 10, 10);
        let same = [i.clone(), i.clone(), i.clone()];
        assert!(deep_supervised_loss(&i, &same, 100.0).unwrap() < 1e-9);
        let o = quantized_image(12, 10, 10);
        let rep = [o.clone(), o.clone(), o.clone()];
        let ds = deep_supervised_loss(&i, &rep, 100.0).unwrap();
        let single = total_loss(&o, &i, 100.0).unwrap().total;
        assert!((ds - single).abs() < 1e-12);
        // Distinct outputs against the scalar-averaging oracle.
        let o2 = quantized_image(13, 10, 10);
        let o3 = quantized_image(14, 10, 10);
        let distinct = [o.clone(), o2.clone(), o3.clone()];
        let ds = deep_supervised_loss(&i, &distinct, 42.0).unwrap();
        let oracle = (total_loss(&o, &i, 42.0).unwrap().total
            + total_loss(&o2, &i, 42.0).unwrap().total
            + total_loss(&o3, &i, 42.0).unwrap().total)
            / 3.0;
        assert!((ds - oracle).abs() <= 1e-7 * oracle.abs().max(1.0));
        assert!(matches!(
            deep_supervised_loss(&i, &distinct[..2], 1.0),
            Err(LossError::WrongOutputCount(2))
        ));
    }

    /// Central-difference check of the analytic gradients on 8×8 images.
    /// Inputs sit on the 1/256 grid and the step is 2^-10, so perturbed
    /// values are exact in f32.
    #[test]
    fn gradients_match_central_differences() {
        let o = quantized_image(15, 8, 8);
        let t = quantized_image(16, 8, 8);
        let h = (2.0f32).powi(-10);
        let checks: [(&str, Box<dyn Fn(&FeatureMap) -> f64>, FeatureMap); 3] = [
            (
                "pixel",
                Box::new(|x: &FeatureMap| pixel_loss(x, &t).unwrap()),
                pixel_loss_grad(&o, &t).unwrap(),
            ),
            (
                "ssim",
                Box::new(|x: &FeatureMap| ssim_loss(x, &t).unwrap()),
                ssim_loss_grad(&o, &t).unwrap(),
            ),
            (
                "total",
                Box::new(|x: &FeatureMap| total_loss(x, &t, 100.0).unwrap().total),
                total_loss_grad(&o, &t, 100.0).unwrap(),
            ),
        ];
        for (name, f, analytic) in &checks {
            for idx in 0..o.len() {
                let mut plus = o.clone();
                plus.data_mut()[idx] += h;
                let mut minus = o.clone();
                minus.data_mut()[idx] -= h;
                let numeric = (f(&plus) - f(&minus)) / (2.0 * h as f64);
                let got = analytic.data()[idx] as f64;
                let rel = (got - numeric).abs() / numeric.abs().max(1e-4);
                assert!(
                    rel <= 1e-3,
                    "{name} grad mismatch at {idx}: analytic {got:.6e} vs numeric {numeric:.6e}"
                );
            }
        }
    }

    #[test]
    fn shape_and_channel_errors() {
        let a = FeatureMap::zeros(1, 4, 4);
        let b = FeatureMap::zeros(1, 4, 5);
        assert!(matches!(pixel_loss(&a, &b), Err(LossError::ShapeMismatch { .. })));
        assert!(matches!(ssim_index(&a, &b), Err(LossError::ShapeMismatch { .. })));
        let c = FeatureMap::zeros(2, 4, 4);
        let d = FeatureMap::zeros(2, 4, 4);
        assert!(matches!(ssim_index(&c, &d), Err(LossError::NotSingleChannel(2))));
        assert!(pixel_loss(&c, &d).is_ok(), "pixel loss accepts multi-channel maps");
    }
}
