//! Image loading/saving and the padding wrapper that lets the 16-divisible
//! network run on arbitrary image sizes.

use crate::tensor::FeatureMap;
use image::DynamicImage;
use std::path::{Path, PathBuf};

/// Weights for RGB → luminance conversion.
const LUMA_R: f32 = 0.299;
const LUMA_G: f32 = 0.587;
const LUMA_B: f32 = 0.114;

/// Errors from image decoding and encoding.
#[derive(thiserror::Error, Debug)]
pub enum ImageIoError {
    #[error("failed to read image {path}: {source}")]
    Decode {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("failed to write image {path}: {source}")]
    Encode {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("expected a single-channel image to save, got {0} channels")]
    NotSingleChannel(usize),
}

/// Loads a PNG or JPEG as a single-channel map in [0, 1]. Grayscale files
/// pass through value-identical; color is reduced by the luminance
/// weighting 0.299 R + 0.587 G + 0.114 B.
pub fn load_image(path: &Path) -> Result<FeatureMap, ImageIoError> {
    let img = image::open(path).map_err(|source| ImageIoError::Decode {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(to_gray_map(&img))
}

/// Converts a decoded image to the internal gray representation.
pub fn to_gray_map(img: &DynamicImage) -> FeatureMap {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data: Vec<f32> = match img {
        DynamicImage::ImageLuma8(g) => g.pixels().map(|p| p.0[0] as f32 / 255.0).collect(),
        DynamicImage::ImageLuma16(g) => g.pixels().map(|p| p.0[0] as f32 / 65535.0).collect(),
        DynamicImage::ImageLumaA8(g) => g.pixels().map(|p| p.0[0] as f32 / 255.0).collect(),
        DynamicImage::ImageLumaA16(g) => g.pixels().map(|p| p.0[0] as f32 / 65535.0).collect(),
        other => {
            let rgb = other.to_rgb32f();
            rgb.pixels()
                .map(|p| LUMA_R * p.0[0] + LUMA_G * p.0[1] + LUMA_B * p.0[2])
                .collect()
        }
    };
    FeatureMap::from_vec(1, h, w, data)
}

/// Saves a single-channel map as an 8-bit grayscale image, quantizing with
/// round-half-up: `floor(v * 255 + 0.5)`, clamped to [0, 255]. The format
/// follows the file extension; PNG is the intended output.
pub fn save_image(img: &FeatureMap, path: &Path) -> Result<(), ImageIoError> {
    if img.channels() != 1 {
        return Err(ImageIoError::NotSingleChannel(img.channels()));
    }
    let encode_err = |source| ImageIoError::Encode {
        path: path.to_path_buf(),
        source,
    };
    let (h, w) = (img.height(), img.width());
    let pixels: Vec<u8> = img
        .data()
        .iter()
        .map(|&v| (v * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8)
        .collect();
    let buf = image::GrayImage::from_raw(w as u32, h as u32, pixels)
        .expect("buffer length matches dimensions");
    let format = image::ImageFormat::from_path(path).map_err(encode_err)?;
    let mut bytes = std::io::Cursor::new(Vec::new());
    buf.write_to(&mut bytes, format).map_err(encode_err)?;
    // Atomic write: temp file in the same directory, then rename.
    let tmp = path.with_extension("img.tmp");
    std::fs::write(&tmp, bytes.into_inner())
        .and_then(|()| std::fs::rename(&tmp, path))
        .map_err(|e| encode_err(image::ImageError::IoError(e)))
}

/// Bilinear resize with the pixel-center convention and edge clamping.
/// Resizing to the same size is an exact identity.
pub fn resize_bilinear(img: &FeatureMap, out_h: usize, out_w: usize) -> FeatureMap {
    assert_eq!(img.channels(), 1, "resize expects a single-channel image");
    assert!(out_h > 0 && out_w > 0);
    let (h, w) = (img.height(), img.width());
    let mut out = FeatureMap::zeros(1, out_h, out_w);
    let sy = h as f32 / out_h as f32;
    let sx = w as f32 / out_w as f32;
    for y in 0..out_h {
        let fy = ((y as f32 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f32);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let wy = fy - y0 as f32;
        for x in 0..out_w {
            let fx = ((x as f32 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f32);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let wx = fx - x0 as f32;
            let top = (1.0 - wx) * img.get(0, y0, x0) + wx * img.get(0, y0, x1);
            let bot = (1.0 - wx) * img.get(0, y1, x0) + wx * img.get(0, y1, x1);
            out.data_mut()[y * out_w + x] = (1.0 - wy) * top + wy * bot;
        }
    }
    out
}

/// Mirror index for reflect padding without edge duplication; tiles
/// indefinitely so any pad amount works, even past tiny images.
fn reflect_index(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * n - 2;
    let m = i % period;
    if m < n {
        m
    } else {
        period - m
    }
}

fn next_multiple(n: usize, step: usize) -> usize {
    n.div_ceil(step) * step
}

/// Reflect-pads (bottom and right) to the next multiple of 16 per side.
/// Returns a clone when no padding is needed.
pub(crate) fn pad_to_multiple(img: &FeatureMap) -> FeatureMap {
    assert_eq!(img.channels(), 1, "padding expects a single-channel image");
    let (h, w) = (img.height(), img.width());
    assert!(h > 0 && w > 0, "cannot pad an empty image");
    let ph = next_multiple(h, 16);
    let pw = next_multiple(w, 16);
    if (ph, pw) == (h, w) {
        return img.clone();
    }
    let mut p = FeatureMap::zeros(1, ph, pw);
    for y in 0..ph {
        let sy = reflect_index(y, h);
        for x in 0..pw {
            let sx = reflect_index(x, w);
            p.data_mut()[y * pw + x] = img.data()[sy * w + sx];
        }
    }
    p
}

/// Crops to the top-left `h`×`w` region.
pub(crate) fn crop_to(img: &FeatureMap, h: usize, w: usize) -> FeatureMap {
    let (ph, pw) = (img.height(), img.width());
    assert!(h <= ph && w <= pw, "crop larger than image");
    if (ph, pw) == (h, w) {
        return img.clone();
    }
    let mut cropped = FeatureMap::zeros(1, h, w);
    for y in 0..h {
        let src = &img.data()[y * pw..y * pw + w];
        cropped.data_mut()[y * w..(y + 1) * w].copy_from_slice(src);
    }
    cropped
}

/// Runs `f` on a version of `img` reflect-padded (bottom and right) to the
/// next multiple of 16 per side, then crops the result back to the
/// original size. `f` must preserve the image size it is given.
pub fn pad_crop_wrap<E>(
    img: &FeatureMap,
    f: impl FnOnce(&FeatureMap) -> Result<FeatureMap, E>,
) -> Result<FeatureMap, E> {
    let (h, w) = (img.height(), img.width());
    let padded = pad_to_multiple(img);
    let (ph, pw) = (padded.height(), padded.width());
    let out = f(&padded)?;
    assert_eq!(
        out.shape(),
        (1, ph, pw),
        "pad_crop_wrap callback must preserve the padded size"
    );
    Ok(crop_to(&out, h, w))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::convert::Infallible;

    fn tmp_dir() -> tempfile::TempDir {
        tempfile::tempdir().expect("tempdir")
    }

    #[test]
    fn gray_png_round_trip_is_pixel_identical() {
        let img = FeatureMap::from_fn(9, 13, |y, x| ((y * 13 + x) % 256) as f32 / 255.0);
        let dir = tmp_dir();
        let path = dir.path().join("gray.png");
        save_image(&img, &path).unwrap();
        let back = load_image(&path).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn extreme_gray_values_map_to_unit_range_exactly() {
        let img = FeatureMap::from_vec(1, 1, 2, vec![0.0, 1.0]);
        let dir = tmp_dir();
        let path = dir.path().join("extremes.png");
        save_image(&img, &path).unwrap();
        let back = load_image(&path).unwrap();
        assert_eq!(back.data(), &[0.0, 1.0]);
    }

    #[test]
    fn rgb_red_converts_to_luminance() {
        let rgb = image::RgbImage::from_pixel(3, 2, image::Rgb([255, 0, 0]));
        let dir = tmp_dir();
        let path = dir.path().join("red.png");
        rgb.save(&path).unwrap();
        let gray = load_image(&path).unwrap();
        assert_eq!(gray.shape(), (1, 2, 3));
        for &v in gray.data() {
            assert!((v - 0.299).abs() < 1e-6, "got {v}");
        }
    }

    #[test]
    fn sixteen_bit_gray_scales_to_unit() {
        let mut g = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::new(2, 1);
        g.put_pixel(0, 0, image::Luma([0]));
        g.put_pixel(1, 0, image::Luma([65535]));
        let dir = tmp_dir();
        let path = dir.path().join("gray16.png");
        g.save(&path).unwrap();
        let gray = load_image(&path).unwrap();
        assert_eq!(gray.data(), &[0.0, 1.0]);
    }

    #[test]
    fn decode_error_names_the_path() {
        let dir = tmp_dir();
        let path = dir.path().join("missing.png");
        let err = load_image(&path).unwrap_err();
        assert!(err.to_string().contains("missing.png"));
        std::fs::write(&path, b"not an image").unwrap();
        assert!(matches!(load_image(&path), Err(ImageIoError::Decode { .. })));
    }

    #[test]
    fn save_rejects_multichannel() {
        let img = FeatureMap::zeros(3, 4, 4);
        let dir = tmp_dir();
        let err = save_image(&img, &dir.path().join("multi.png")).unwrap_err();
        assert!(matches!(err, ImageIoError::NotSingleChannel(3)));
    }

    #[test]
    fn resize_same_size_is_identity_and_means_are_preserved() {
        let img = FeatureMap::from_fn(20, 30, |y, x| ((y * 7 + x * 3) % 50) as f32 / 50.0);
        assert_eq!(resize_bilinear(&img, 20, 30), img);
        let small = resize_bilinear(&img, 10, 15);
        assert_eq!(small.shape(), (1, 10, 15));
        let mean = |m: &FeatureMap| m.data().iter().sum::<f32>() / m.len() as f32;
        assert!((mean(&small) - mean(&img)).abs() < 0.02, "downsampling keeps the mean");
        let big = resize_bilinear(&img, 41, 61);
        assert_eq!(big.shape(), (1, 41, 61));
        assert!(big.min_value() >= img.min_value() - 1e-6);
        assert!(big.max_value() <= img.max_value() + 1e-6);
    }

    #[test]
    fn pad_crop_identity_returns_input_exactly() {
        for (h, w) in [(13, 5), (256, 256), (300, 400), (1, 1), (16, 17)] {
            let img = FeatureMap::from_fn(h, w, |y, x| ((y * 31 + x * 7) % 97) as f32 / 97.0);
            let out =
                pad_crop_wrap(&img, |p| Ok::<_, Infallible>(p.clone())).unwrap();
            assert_eq!(out, img, "{h}x{w}");
        }
    }

    #[test]
    fn pad_sizes_follow_ceil_arithmetic() {
        let img = FeatureMap::zeros(1, 300, 400);
        pad_crop_wrap(&img, |p| {
            assert_eq!(p.shape(), (1, 304, 400));
            Ok::<_, Infallible>(p.clone())
        })
        .unwrap();
        let img = FeatureMap::zeros(1, 256, 256);
        pad_crop_wrap(&img, |p| {
            assert_eq!(p.shape(), (1, 256, 256), "no padding for multiples of 16");
            Ok::<_, Infallible>(p.clone())
        })
        .unwrap();
    }

    #[test]
    fn reflect_padding_mirrors_without_edge_duplication() {
        // Row [a, b, c] tiled by reflection: a b c b a b ...
        let img = FeatureMap::from_vec(1, 1, 3, vec![1.0, 2.0, 3.0]);
        pad_crop_wrap(&img, |p| {
            assert_eq!(p.shape(), (1, 16, 16));
            let row: Vec<f32> = p.data()[..6].to_vec();
            assert_eq!(row, vec![1.0, 2.0, 3.0, 2.0, 1.0, 2.0]);
            // Vertical: height 1 repeats the single row.
            assert_eq!(p.get(0, 7, 0), 1.0);
            Ok::<_, Infallible>(p.clone())
        })
        .unwrap();
    }

    #[test]
    fn padding_leaves_the_interior_untouched_beyond_the_receptive_field() {
        use crate::network::{decode, encode, init_network};
        use crate::synth::synthetic_image;

        // Cropping one row and column off a multiple-of-16 image changes
        // only what reflection pads back in. The network's receptive field
        // spans about 45 px, so every output pixel at least 48 px away from
        // the bottom/right edges must come out identical either way.
        let state = init_network(2, false);
        let full = synthetic_image(33, 112, 112);
        let direct = decode(&encode(&full, &state).unwrap(), &state).unwrap();
        let cropped = crop_to(&full, 111, 111);
        let wrapped =
            pad_crop_wrap(&cropped, |p| decode(&encode(p, &state)?, &state)).unwrap();
        let mut worst = 0.0f32;
        for y in 0..111 - 48 {
            for x in 0..111 - 48 {
                worst = worst.max((direct.get(0, y, x) - wrapped.get(0, y, x)).abs());
            }
        }
        assert!(worst <= 1e-6, "interior deviates by {worst}");
    }
}
