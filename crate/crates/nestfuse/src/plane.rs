//! Double-precision single-channel image planes and the small set of
//! filtering primitives shared by the loss and metrics modules.

use crate::tensor::FeatureMap;

/// A row-major H×W plane of f64 samples.
#[derive(Clone, Debug, PartialEq)]
pub(crate) struct Plane64 {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Plane64 {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; height * width],
        }
    }

    /// Copies one channel of an f32 feature map.
    pub fn from_channel(m: &FeatureMap, channel: usize) -> Self {
        Self {
            height: m.height(),
            width: m.width(),
            data: m.channel(channel).iter().map(|&v| v as f64).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    /// Elementwise product.
    pub fn mul(&self, other: &Plane64) -> Plane64 {
        assert_eq!((self.height, self.width), (other.height, other.width));
        Plane64 {
            height: self.height,
            width: self.width,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| a * b)
                .collect(),
        }
    }

    /// Separable valid correlation: vertical kernel `ky` then horizontal
    /// `kx`. Output is (H - len(ky) + 1) × (W - len(kx) + 1).
    pub fn valid_correlate_sep(&self, ky: &[f64], kx: &[f64]) -> Plane64 {
        assert!(ky.len() <= self.height && kx.len() <= self.width);
        let th = self.height - ky.len() + 1;
        let mut tmp = Plane64::zeros(th, self.width);
        for (i, &k) in ky.iter().enumerate() {
            for y in 0..th {
                let src = &self.data[(y + i) * self.width..(y + i + 1) * self.width];
                let dst = &mut tmp.data[y * self.width..(y + 1) * self.width];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d += k * s;
                }
            }
        }
        let ow = self.width - kx.len() + 1;
        let mut out = Plane64::zeros(th, ow);
        for (j, &k) in kx.iter().enumerate() {
            for y in 0..th {
                let src = &tmp.data[y * self.width + j..y * self.width + j + ow];
                let dst = &mut out.data[y * ow..(y + 1) * ow];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d += k * s;
                }
            }
        }
        out
    }

    /// Adjoint of [`Self::valid_correlate_sep`]: scatters this (small)
    /// plane back onto an `out_h` × `out_w` grid through the same kernels.
    pub fn adjoint_correlate_sep(
        &self,
        ky: &[f64],
        kx: &[f64],
        out_h: usize,
        out_w: usize,
    ) -> Plane64 {
        assert_eq!(self.height + ky.len() - 1, out_h);
        assert_eq!(self.width + kx.len() - 1, out_w);
        // Horizontal scatter first: (h, w) -> (h, out_w).
        let mut tmp = Plane64::zeros(self.height, out_w);
        for (j, &k) in kx.iter().enumerate() {
            for y in 0..self.height {
                let src = &self.data[y * self.width..(y + 1) * self.width];
                let dst = &mut tmp.data[y * out_w + j..y * out_w + j + self.width];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d += k * s;
                }
            }
        }
        // Vertical scatter: (h, out_w) -> (out_h, out_w).
        let mut out = Plane64::zeros(out_h, out_w);
        for (i, &k) in ky.iter().enumerate() {
            for y in 0..self.height {
                let src = &tmp.data[y * out_w..(y + 1) * out_w];
                let dst = &mut out.data[(y + i) * out_w..(y + i + 1) * out_w];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d += k * s;
                }
            }
        }
        out
    }

    /// Keeps every second row and column, starting at (0, 0).
    pub fn decimate2(&self) -> Plane64 {
        let h = self.height.div_ceil(2);
        let w = self.width.div_ceil(2);
        let mut out = Plane64::zeros(h, w);
        for y in 0..h {
            for x in 0..w {
                out.data[y * w + x] = self.data[(2 * y) * self.width + 2 * x];
            }
        }
        out
    }
}

/// Normalized 1D Gaussian kernel of length `n`, centered, with the given
/// standard deviation.
pub(crate) fn gaussian_kernel(n: usize, sigma: f64) -> Vec<f64> {
    assert!(n >= 1 && sigma > 0.0);
    let c = (n as f64 - 1.0) / 2.0;
    let mut k: Vec<f64> = (0..n)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    for v in k.iter_mut() {
        *v /= sum;
    }
    k
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_plane(seed: u64, h: usize, w: usize) -> Plane64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Plane64 {
            height: h,
            width: w,
            data: (0..h * w).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        }
    }

    #[test]
    fn gaussian_kernel_is_normalized_and_symmetric() {
        for n in [1, 2, 5, 11] {
            let k = gaussian_kernel(n, 1.5);
            assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for i in 0..n {
                assert!((k[i] - k[n - 1 - i]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn valid_correlation_matches_direct_window_sums() {
        let p = random_plane(1, 6, 7);
        let ky = gaussian_kernel(3, 1.0);
        let kx = gaussian_kernel(4, 1.0);
        let out = p.valid_correlate_sep(&ky, &kx);
        assert_eq!((out.height, out.width), (4, 4));
        for y in 0..out.height {
            for x in 0..out.width {
                let mut acc = 0.0;
                for i in 0..ky.len() {
                    for j in 0..kx.len() {
                        acc += ky[i] * kx[j] * p.data[(y + i) * p.width + x + j];
                    }
                }
                assert!((out.data[y * out.width + x] - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn adjoint_satisfies_inner_product_identity() {
        // <conv(x), y> == <x, adjoint(y)> for random x, y.
        let x = random_plane(2, 9, 8);
        let ky = gaussian_kernel(5, 1.5);
        let kx = gaussian_kernel(3, 1.5);
        let cx = x.valid_correlate_sep(&ky, &kx);
        let y = random_plane(3, cx.height, cx.width);
        let ay = y.adjoint_correlate_sep(&ky, &kx, x.height, x.width);
        let lhs: f64 = cx.data.iter().zip(&y.data).map(|(&a, &b)| a * b).sum();
        let rhs: f64 = x.data.iter().zip(&ay.data).map(|(&a, &b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12, "{lhs} vs {rhs}");
    }

    #[test]
    fn decimation_takes_even_indices() {
        let p = Plane64 {
            height: 3,
            width: 4,
            data: (0..12).map(|v| v as f64).collect(),
        };
        let d = p.decimate2();
        assert_eq!((d.height, d.width), (2, 2));
        assert_eq!(d.data, vec![0.0, 2.0, 8.0, 10.0]);
    }
}
