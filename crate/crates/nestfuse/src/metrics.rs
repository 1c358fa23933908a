//! Fusion quality metrics: entropy (En), standard deviation (SD), fusion
//! mutual information (MI), feature mutual information on DCT and wavelet
//! features (FMI_dct, FMI_w), two-source average SSIM (SSIM_a), and
//! pixel-domain visual information fidelity (VIF) - plus per-pair reports,
//! aggregation, and CSV rendering.
//!
//! Histogram metrics quantize intensities to 8 bits (256 bins) first, so
//! their magnitudes live on the familiar 0–255 scale. All metrics are pure
//! functions of their inputs.

use crate::loss::ssim_index;
use crate::plane::{gaussian_kernel, Plane64};
use crate::tensor::FeatureMap;
use std::path::Path;

const BINS: usize = 256;
const DCT_BLOCK: usize = 8;
const VIF_SCALES: usize = 4;
const VIF_SIGMA_NSQ: f64 = 2.0;
const VIF_EPS: f64 = 1e-10;

/// Errors from metric computation.
#[derive(thiserror::Error, Debug)]
pub enum MetricsError {
    #[error("shape mismatch: {left:?} vs {right:?}")]
    ShapeMismatch {
        left: (usize, usize, usize),
        right: (usize, usize, usize),
    },
    #[error("image is {height}x{width} but this metric needs at least {min_height}x{min_width}")]
    TooSmall {
        height: usize,
        width: usize,
        min_height: usize,
        min_width: usize,
    },
    #[error("metrics failed for pair {pair}: {source}")]
    Pair {
        pair: String,
        #[source]
        source: Box<MetricsError>,
    },
}

impl MetricsError {
    /// Wraps the error with the identifier of the pair being evaluated.
    pub fn for_pair(self, pair: impl Into<String>) -> MetricsError {
        MetricsError::Pair {
            pair: pair.into(),
            source: Box::new(self),
        }
    }
}

/// Feature domain for [`fmi`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeatureKind {
    /// Magnitudes of 8×8 block DCT coefficients.
    Dct,
    /// Magnitudes of single-level Haar detail coefficients.
    Wavelet,
}

fn check_shapes(a: &FeatureMap, b: &FeatureMap) -> Result<(), MetricsError> {
    if a.shape() != b.shape() {
        return Err(MetricsError::ShapeMismatch {
            left: a.shape(),
            right: b.shape(),
        });
    }
    Ok(())
}

/// Quantizes to 8-bit levels with the same rounding the PNG writer uses.
fn quantize(img: &FeatureMap) -> Vec<u8> {
    img.data()
        .iter()
        .map(|&v| ((v as f64) * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8)
        .collect()
}

fn histogram(levels: &[u8]) -> [u64; BINS] {
    let mut h = [0u64; BINS];
    for &v in levels {
        h[v as usize] += 1;
    }
    h
}

fn entropy_of_counts(counts: &[u64], total: u64) -> f64 {
    let total = total as f64;
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total;
            -p * p.log2()
        })
        .sum()
}

/// Shannon entropy (base 2) of the 256-bin intensity histogram. Ranges
/// over [0, 8] bits for 8-bit data.
pub fn entropy(img: &FeatureMap) -> f64 {
    let levels = quantize(img);
    entropy_of_counts(&histogram(&levels), levels.len() as u64)
}

/// Population standard deviation of the 8-bit intensities (0–255 scale).
pub fn std_dev(img: &FeatureMap) -> f64 {
    let levels = quantize(img);
    let n = levels.len() as f64;
    let mean = levels.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = levels
        .iter()
        .map(|&v| {
            let d = v as f64 - mean;
            d * d
        })
        .sum::<f64>()
        / n;
    var.sqrt()
}

/// Mutual information I(A;B) = H(A) + H(B) − H(A,B) over a 256×256 joint
/// intensity histogram, in bits.
pub fn mutual_information(a: &FeatureMap, b: &FeatureMap) -> Result<f64, MetricsError> {
    check_shapes(a, b)?;
    let (la, lb) = (quantize(a), quantize(b));
    Ok(mutual_information_levels(&la, &lb))
}

fn mutual_information_levels(la: &[u8], lb: &[u8]) -> f64 {
    let mut joint = vec![0u64; BINS * BINS];
    for (&x, &y) in la.iter().zip(lb) {
        joint[x as usize * BINS + y as usize] += 1;
    }
    let total = la.len() as u64;
    let ha = entropy_of_counts(&histogram(la), total);
    let hb = entropy_of_counts(&histogram(lb), total);
    let hab = entropy_of_counts(&joint, total);
    ha + hb - hab
}

/// Fusion mutual information: I(F;I1) + I(F;I2).
///
/// Note the scale: as the sum of two mutual informations this column is
/// bounded by 2·H(F), i.e. twice the fused image's entropy, and reaches
/// that ceiling exactly when both sources carry the fused image's full
/// intensity information (F = I1 = I2 gives MI = 2·En). Published fusion
/// tables that list MI at roughly twice the entropy column are reporting
/// this same summed quantity, not a single pairwise MI on the
/// [0, min(H(F), H(I))] scale.
pub fn fusion_mi(
    fused: &FeatureMap,
    source1: &FeatureMap,
    source2: &FeatureMap,
) -> Result<f64, MetricsError> {
    Ok(mutual_information(fused, source1)? + mutual_information(fused, source2)?)
}

/// Orthonormal 2D DCT-II magnitudes of every non-overlapping 8×8 block,
/// concatenated in block raster order.
fn dct_features(img: &FeatureMap) -> Vec<f64> {
    let (h, w) = (img.height(), img.width());
    let n = DCT_BLOCK;
    // cos((2x + 1) u pi / 2n) table and orthonormal scale factors.
    let mut cos = [[0.0f64; DCT_BLOCK]; DCT_BLOCK];
    for u in 0..n {
        for x in 0..n {
            cos[u][x] = ((2 * x + 1) as f64 * u as f64 * std::f64::consts::PI
                / (2.0 * n as f64))
                .cos();
        }
    }
    let scale = |u: usize| {
        if u == 0 {
            (1.0 / n as f64).sqrt()
        } else {
            (2.0 / n as f64).sqrt()
        }
    };
    let plane = Plane64::from_channel(img, 0);
    let mut features = Vec::with_capacity((h / n) * (w / n) * n * n);
    for by in 0..h / n {
        for bx in 0..w / n {
            for u in 0..n {
                for v in 0..n {
                    let mut acc = 0.0;
                    for y in 0..n {
                        for x in 0..n {
                            acc += plane.data[(by * n + y) * w + bx * n + x]
                                * cos[u][y]
                                * cos[v][x];
                        }
                    }
                    features.push((scale(u) * scale(v) * acc).abs());
                }
            }
        }
    }
    features
}

/// Magnitudes of the three single-level Haar detail bands (horizontal,
/// vertical, diagonal) over non-overlapping 2×2 blocks.
fn haar_features(img: &FeatureMap) -> Vec<f64> {
    let (h, w) = (img.height(), img.width());
    let plane = Plane64::from_channel(img, 0);
    let mut features = Vec::with_capacity(3 * (h / 2) * (w / 2));
    for y in 0..h / 2 {
        for x in 0..w / 2 {
            let p00 = plane.data[(2 * y) * w + 2 * x];
            let p01 = plane.data[(2 * y) * w + 2 * x + 1];
            let p10 = plane.data[(2 * y + 1) * w + 2 * x];
            let p11 = plane.data[(2 * y + 1) * w + 2 * x + 1];
            features.push(((p00 + p01 - p10 - p11) * 0.5).abs());
            features.push(((p00 - p01 + p10 - p11) * 0.5).abs());
            features.push(((p00 - p01 - p10 + p11) * 0.5).abs());
        }
    }
    features
}

/// Bins a feature array into 256 levels spanning its own min–max range.
fn bin_features(f: &[f64]) -> Vec<u8> {
    let min = f.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = f.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(max > min) {
        return vec![0; f.len()];
    }
    let scale = BINS as f64 / (max - min);
    f.iter()
        .map(|&v| (((v - min) * scale) as usize).min(BINS - 1) as u8)
        .collect()
}

/// Normalized mutual information 2·I(X;Y)/(H(X)+H(Y)) of two binned
/// feature arrays; identical constant arrays count as perfectly informative.
fn feature_nmi(fx: &[f64], fy: &[f64]) -> f64 {
    let (bx, by) = (bin_features(fx), bin_features(fy));
    let total = bx.len() as u64;
    let hx = entropy_of_counts(&histogram(&bx), total);
    let hy = entropy_of_counts(&histogram(&by), total);
    if hx + hy == 0.0 {
        return 1.0;
    }
    let i = mutual_information_levels(&bx, &by);
    (2.0 * i / (hx + hy)).clamp(0.0, 1.0)
}

/// Feature mutual information: normalized MI between fused-image features
/// and each source's features, averaged over the two sources. Features are
/// 8×8 block DCT magnitudes or Haar detail magnitudes per [`FeatureKind`].
pub fn fmi(
    fused: &FeatureMap,
    source1: &FeatureMap,
    source2: &FeatureMap,
    kind: FeatureKind,
) -> Result<f64, MetricsError> {
    check_shapes(fused, source1)?;
    check_shapes(fused, source2)?;
    let (h, w) = (fused.height(), fused.width());
    let min = match kind {
        FeatureKind::Dct => DCT_BLOCK,
        FeatureKind::Wavelet => 2,
    };
    if h < min || w < min {
        return Err(MetricsError::TooSmall {
            height: h,
            width: w,
            min_height: min,
            min_width: min,
        });
    }
    let extract = |img: &FeatureMap| match kind {
        FeatureKind::Dct => dct_features(img),
        FeatureKind::Wavelet => haar_features(img),
    };
    let ff = extract(fused);
    let n1 = feature_nmi(&ff, &extract(source1));
    let n2 = feature_nmi(&ff, &extract(source2));
    Ok((n1 + n2) * 0.5)
}

/// Average structural similarity against the two sources:
/// (SSIM(F,I1) + SSIM(F,I2)) / 2, using the training SSIM.
pub fn ssim_a(
    fused: &FeatureMap,
    source1: &FeatureMap,
    source2: &FeatureMap,
) -> Result<f64, MetricsError> {
    check_shapes(fused, source1)?;
    check_shapes(fused, source2)?;
    let s1 = ssim_index(fused, source1).expect("shapes checked");
    let s2 = ssim_index(fused, source2).expect("shapes checked");
    Ok((s1 + s2) * 0.5)
}

/// Pixel-domain VIF of `dist` against `ref_img`, both on the 0–255 scale.
fn vif_single(reference: &Plane64, distorted: &Plane64) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    let mut r = reference.clone();
    let mut d = distorted.clone();
    for scale in 1..=VIF_SCALES {
        let n = (1usize << (VIF_SCALES - scale + 1)) + 1; // 17, 9, 5, 3
        let k = gaussian_kernel(n, n as f64 / 5.0);
        if scale > 1 {
            if r.height < n || r.width < n {
                break;
            }
            r = r.valid_correlate_sep(&k, &k).decimate2();
            d = d.valid_correlate_sep(&k, &k).decimate2();
        }
        if r.height < n || r.width < n {
            continue;
        }
        let mu1 = r.valid_correlate_sep(&k, &k);
        let mu2 = d.valid_correlate_sep(&k, &k);
        let m11 = r.mul(&r).valid_correlate_sep(&k, &k);
        let m22 = d.mul(&d).valid_correlate_sep(&k, &k);
        let m12 = r.mul(&d).valid_correlate_sep(&k, &k);
        for i in 0..mu1.len() {
            let s1 = (m11.data[i] - mu1.data[i] * mu1.data[i]).max(0.0);
            let s2 = (m22.data[i] - mu2.data[i] * mu2.data[i]).max(0.0);
            let s12 = m12.data[i] - mu1.data[i] * mu2.data[i];
            let mut g = s12 / (s1 + VIF_EPS);
            let mut sv = s2 - g * s12;
            if s1 < VIF_EPS {
                g = 0.0;
                sv = s2;
            }
            if s2 < VIF_EPS {
                g = 0.0;
                sv = 0.0;
            }
            if g < 0.0 {
                sv = s2;
                g = 0.0;
            }
            num += (1.0 + g * g * s1 / (sv.max(VIF_EPS) + VIF_SIGMA_NSQ)).log10();
            den += (1.0 + s1 / VIF_SIGMA_NSQ).log10();
        }
    }
    if den == 0.0 {
        1.0
    } else {
        num / den
    }
}

/// Visual information fidelity of the fused image, averaged over the two
/// sources: a 4-scale pixel-domain variance-ratio measure of how much
/// source information survives fusion. Needs at least 32×32 input.
pub fn vif(
    fused: &FeatureMap,
    source1: &FeatureMap,
    source2: &FeatureMap,
) -> Result<f64, MetricsError> {
    check_shapes(fused, source1)?;
    check_shapes(fused, source2)?;
    let (h, w) = (fused.height(), fused.width());
    if h < 32 || w < 32 {
        return Err(MetricsError::TooSmall {
            height: h,
            width: w,
            min_height: 32,
            min_width: 32,
        });
    }
    let to_255 = |img: &FeatureMap| {
        let mut p = Plane64::from_channel(img, 0);
        for v in p.data.iter_mut() {
            *v *= 255.0;
        }
        p
    };
    let f = to_255(fused);
    let v1 = vif_single(&to_255(source1), &f);
    let v2 = vif_single(&to_255(source2), &f);
    Ok((v1 + v2) * 0.5)
}

/// All seven metrics for one fused image against its two sources.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsReport {
    pub entropy: f64,
    pub std_dev: f64,
    pub mutual_information: f64,
    pub fmi_dct: f64,
    pub fmi_wavelet: f64,
    pub ssim_a: f64,
    pub vif: f64,
}

/// CSV column names, in report order.
pub const METRIC_COLUMNS: [&str; 7] = ["En", "SD", "MI", "FMI_dct", "FMI_w", "SSIM_a", "VIF"];

impl MetricsReport {
    /// Metric values in [`METRIC_COLUMNS`] order.
    pub fn values(&self) -> [f64; 7] {
        [
            self.entropy,
            self.std_dev,
            self.mutual_information,
            self.fmi_dct,
            self.fmi_wavelet,
            self.ssim_a,
            self.vif,
        ]
    }
}

/// Evaluates every metric for one (fused, source1, source2) triple.
pub fn evaluate_pair(
    fused: &FeatureMap,
    source1: &FeatureMap,
    source2: &FeatureMap,
) -> Result<MetricsReport, MetricsError> {
    Ok(MetricsReport {
        entropy: entropy(fused),
        std_dev: std_dev(fused),
        mutual_information: fusion_mi(fused, source1, source2)?,
        fmi_dct: fmi(fused, source1, source2, FeatureKind::Dct)?,
        fmi_wavelet: fmi(fused, source1, source2, FeatureKind::Wavelet)?,
        ssim_a: ssim_a(fused, source1, source2)?,
        vif: vif(fused, source1, source2)?,
    })
}

/// Arithmetic mean of the reports, metric by metric. `None` when empty.
pub fn aggregate(reports: &[MetricsReport]) -> Option<MetricsReport> {
    if reports.is_empty() {
        return None;
    }
    let n = reports.len() as f64;
    let mut sums = [0.0f64; 7];
    for r in reports {
        for (s, v) in sums.iter_mut().zip(r.values()) {
            *s += v;
        }
    }
    Some(MetricsReport {
        entropy: sums[0] / n,
        std_dev: sums[1] / n,
        mutual_information: sums[2] / n,
        fmi_dct: sums[3] / n,
        fmi_wavelet: sums[4] / n,
        ssim_a: sums[5] / n,
        vif: sums[6] / n,
    })
}

/// Renders the report table as CSV: a header, one row per pair, and a
/// final `AVERAGE` row, floats with 5 decimals.
pub fn render_csv(rows: &[(String, MetricsReport)]) -> String {
    render_csv_with("pair", rows)
}

/// [`render_csv`] with a custom name for the row-label column.
pub fn render_csv_with(label: &str, rows: &[(String, MetricsReport)]) -> String {
    let mut out = String::from(label);
    for c in METRIC_COLUMNS {
        out.push(',');
        out.push_str(c);
    }
    out.push('\n');
    let mut push_row = |name: &str, r: &MetricsReport| {
        out.push_str(name);
        for v in r.values() {
            out.push_str(&format!(",{v:.5}"));
        }
        out.push('\n');
    };
    for (name, r) in rows {
        push_row(name, r);
    }
    let reports: Vec<MetricsReport> = rows.iter().map(|(_, r)| *r).collect();
    if let Some(avg) = aggregate(&reports) {
        push_row("AVERAGE", &avg);
    }
    out
}

/// Writes [`render_csv`] output atomically (temp file + rename).
pub fn write_csv(rows: &[(String, MetricsReport)], path: &Path) -> std::io::Result<()> {
    write_csv_with("pair", rows, path)
}

/// [`write_csv`] with a custom name for the row-label column.
pub fn write_csv_with(
    label: &str,
    rows: &[(String, MetricsReport)],
    path: &Path,
) -> std::io::Result<()> {
    let tmp = path.with_extension("csv.tmp");
    std::fs::write(&tmp, render_csv_with(label, rows))?;
    std::fs::rename(&tmp, path)
}
