//! Deterministic synthetic gray-scale scenes.
//!
//! The trainer and the test suite need image corpora with natural-image
//! statistics (smooth shading, blobs, edges, texture, noise) that can be
//! regenerated from a seed anywhere. A scene is a random mixture of
//! Gaussian blobs, rectangles, a global gradient, and sinusoidal texture;
//! rendering the same geometry with different component gains yields
//! aligned "infrared"/"visible" style pairs whose structures correlate
//! while their tones differ.

use crate::imgio::save_image;
use crate::tensor::FeatureMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::io;
use std::path::{Path, PathBuf};

struct Blob {
    cx: f32,
    cy: f32,
    radius: f32,
    amp: f32,
}

struct Rect {
    x0: f32,
    y0: f32,
    x1: f32,
    y1: f32,
    amp: f32,
}

struct Wave {
    fx: f32,
    fy: f32,
    phase: f32,
    amp: f32,
}

/// Shared scene geometry; gains control how strongly each component shows
/// in a particular rendering.
struct Scene {
    blobs: Vec<Blob>,
    rects: Vec<Rect>,
    gradient: (f32, f32, f32),
    waves: Vec<Wave>,
}

/// Per-rendering component gains and tone curve.
struct Rendering {
    blob_gain: f32,
    rect_gain: f32,
    gradient_gain: f32,
    wave_gain: f32,
    noise_amp: f32,
    gamma: f32,
    invert_gradient: bool,
}

impl Scene {
    fn random(rng: &mut ChaCha8Rng) -> Self {
        let blobs = (0..rng.gen_range(4..9))
            .map(|_| Blob {
                cx: rng.gen_range(0.05..0.95),
                cy: rng.gen_range(0.05..0.95),
                radius: rng.gen_range(0.04..0.25),
                amp: rng.gen_range(0.3..1.0) * if rng.gen_bool(0.3) { -1.0 } else { 1.0 },
            })
            .collect();
        let rects = (0..rng.gen_range(2..6))
            .map(|_| {
                let x0 = rng.gen_range(0.0..0.8);
                let y0 = rng.gen_range(0.0..0.8);
                Rect {
                    x0,
                    y0,
                    x1: (x0 + rng.gen_range(0.1..0.5)).min(1.0),
                    y1: (y0 + rng.gen_range(0.1..0.5)).min(1.0),
                    amp: rng.gen_range(-0.5..0.5),
                }
            })
            .collect();
        let gradient = (
            rng.gen_range(0.0..0.5),
            rng.gen_range(-0.6..0.6),
            rng.gen_range(-0.6..0.6),
        );
        let waves = (0..2)
            .map(|_| Wave {
                fx: rng.gen_range(1.5..9.0),
                fy: rng.gen_range(1.5..9.0),
                phase: rng.gen_range(0.0..std::f32::consts::TAU),
                amp: rng.gen_range(0.05..0.2),
            })
            .collect();
        Self {
            blobs,
            rects,
            gradient,
            waves,
        }
    }

    fn render(&self, h: usize, w: usize, r: &Rendering, rng: &mut ChaCha8Rng) -> FeatureMap {
        let mut img = FeatureMap::zeros(1, h, w);
        for y in 0..h {
            let v = y as f32 / h as f32;
            for x in 0..w {
                let u = x as f32 / w as f32;
                let mut val = r.gradient_gain
                    * (self.gradient.0
                        + self.gradient.1 * if r.invert_gradient { 1.0 - u } else { u }
                        + self.gradient.2 * v);
                for b in &self.blobs {
                    let d2 = (u - b.cx).powi(2) + (v - b.cy).powi(2);
                    val += r.blob_gain * b.amp * (-d2 / (2.0 * b.radius * b.radius)).exp();
                }
                for rc in &self.rects {
                    if u >= rc.x0 && u < rc.x1 && v >= rc.y0 && v < rc.y1 {
                        val += r.rect_gain * rc.amp;
                    }
                }
                for wv in &self.waves {
                    val += r.wave_gain
                        * wv.amp
                        * (std::f32::consts::TAU * (wv.fx * u + wv.fy * v) + wv.phase).sin();
                }
                img.data_mut()[y * w + x] = val;
            }
        }
        for px in img.data_mut() {
            *px += rng.gen_range(-r.noise_amp..r.noise_amp);
        }
        // Min-max normalize into [0.02, 0.98], then apply the tone curve.
        let (lo, hi) = (img.min_value(), img.max_value());
        let span = (hi - lo).max(1e-6);
        for px in img.data_mut() {
            let unit = (*px - lo) / span;
            *px = 0.02 + 0.96 * unit.powf(r.gamma);
        }
        img
    }
}

/// One deterministic synthetic gray image in [0, 1].
pub fn synthetic_image(seed: u64, height: usize, width: usize) -> FeatureMap {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scene = Scene::random(&mut rng);
    let rendering = Rendering {
        blob_gain: 1.0,
        rect_gain: 1.0,
        gradient_gain: 1.0,
        wave_gain: 1.0,
        noise_amp: 0.02,
        gamma: rng.gen_range(0.75..1.3),
        invert_gradient: false,
    };
    scene.render(height, width, &rendering, &mut rng)
}

/// A structurally aligned pair rendered from one scene: the first image
/// emphasizes blob "heat" with muted texture (infrared-like), the second
/// emphasizes texture and edges (visible-like).
pub fn synthetic_pair(seed: u64, height: usize, width: usize) -> (FeatureMap, FeatureMap) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scene = Scene::random(&mut rng);
    let ir = Rendering {
        blob_gain: rng.gen_range(1.2..1.6),
        rect_gain: rng.gen_range(0.3..0.6),
        gradient_gain: rng.gen_range(0.4..0.8),
        wave_gain: rng.gen_range(0.15..0.4),
        noise_amp: 0.015,
        gamma: rng.gen_range(0.8..1.1),
        invert_gradient: false,
    };
    let vis = Rendering {
        blob_gain: rng.gen_range(0.35..0.7),
        rect_gain: rng.gen_range(0.9..1.3),
        gradient_gain: rng.gen_range(0.8..1.2),
        wave_gain: rng.gen_range(0.8..1.2),
        noise_amp: 0.025,
        gamma: rng.gen_range(0.9..1.25),
        invert_gradient: rng.gen_bool(0.5),
    };
    let a = scene.render(height, width, &ir, &mut rng);
    let b = scene.render(height, width, &vis, &mut rng);
    (a, b)
}

fn io_other(e: crate::imgio::ImageIoError) -> io::Error {
    io::Error::other(e.to_string())
}

/// Writes `count` synthetic images into `dir` as `img_NNNN.png`.
pub fn write_corpus(dir: &Path, count: usize, size: usize, seed: u64) -> io::Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut paths = Vec::with_capacity(count);
    for i in 0..count {
        let img = synthetic_image(seed.wrapping_add(i as u64), size, size);
        let path = dir.join(format!("img_{i:04}.png"));
        save_image(&img, &path).map_err(io_other)?;
        paths.push(path);
    }
    Ok(paths)
}

/// Writes `count` aligned pairs under `dir/ir` and `dir/vis` with matching
/// stems `pair_NNNN.png`.
pub fn write_pairs(
    dir: &Path,
    count: usize,
    size: usize,
    seed: u64,
) -> io::Result<Vec<(PathBuf, PathBuf)>> {
    let ir_dir = dir.join("ir");
    let vis_dir = dir.join("vis");
    std::fs::create_dir_all(&ir_dir)?;
    std::fs::create_dir_all(&vis_dir)?;
    let mut paths = Vec::with_capacity(count);
    for i in 0..count {
        let (ir, vis) = synthetic_pair(seed.wrapping_add(i as u64), size, size);
        let ip = ir_dir.join(format!("pair_{i:04}.png"));
        let vp = vis_dir.join(format!("pair_{i:04}.png"));
        save_image(&ir, &ip).map_err(io_other)?;
        save_image(&vis, &vp).map_err(io_other)?;
        paths.push((ip, vp));
    }
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn images_are_deterministic_and_in_range() {
        let a = synthetic_image(7, 64, 48);
        let b = synthetic_image(7, 64, 48);
        assert_eq!(a, b);
        assert!(a.min_value() >= 0.0 && a.max_value() <= 1.0);
        let c = synthetic_image(8, 64, 48);
        assert_ne!(a, c, "different seeds give different scenes");
    }

    #[test]
    fn pairs_share_structure_but_differ() {
        let (ir, vis) = synthetic_pair(3, 64, 64);
        assert_eq!(ir.shape(), vis.shape());
        assert_ne!(ir, vis);
        // Structural alignment: the two renderings correlate positively.
        let n = ir.len() as f64;
        let (mi, mv) = (
            ir.data().iter().map(|&v| v as f64).sum::<f64>() / n,
            vis.data().iter().map(|&v| v as f64).sum::<f64>() / n,
        );
        let mut cov = 0.0;
        let mut vi = 0.0;
        let mut vv = 0.0;
        for (&a, &b) in ir.data().iter().zip(vis.data()) {
            let (da, db) = (a as f64 - mi, b as f64 - mv);
            cov += da * db;
            vi += da * da;
            vv += db * db;
        }
        let corr = cov / (vi.sqrt() * vv.sqrt()).max(1e-12);
        assert!(corr.abs() > 0.2, "pair correlation too weak: {corr}");
    }

    #[test]
    fn corpus_files_land_on_disk_sorted() {
        let dir = tempfile::tempdir().unwrap();
        let paths = write_corpus(dir.path(), 5, 32, 11).unwrap();
        assert_eq!(paths.len(), 5);
        for p in &paths {
            assert!(p.exists());
        }
        let pairs = write_pairs(dir.path(), 3, 32, 12).unwrap();
        assert_eq!(pairs.len(), 3);
        assert!(dir.path().join("ir/pair_0000.png").exists());
        assert!(dir.path().join("vis/pair_0002.png").exists());
    }
}
