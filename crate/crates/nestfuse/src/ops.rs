//! Convolution, pooling, and upsampling kernels and their hand-written
//! adjoints.
//!
//! 3x3 convolutions use a direct register-blocked kernel (an 8-channel x
//! 8-pixel accumulator tile compiled with AVX2+FMA where available) rather
//! than an im2col/GEMM lowering: with nine taps the lowered matrix is nine
//! times the input, and on one core the decoder's wide concatenated inputs
//! make that pure memory traffic. 1x1 convolutions and the weight-gradient
//! reduction are clean GEMMs and stay on the GEMM backend.
//!
//! Everything here is deterministic: loops are sequential and blocking is
//! fixed, so repeated calls on equal inputs produce bit-identical results.

use crate::tensor::FeatureMap;

/// One convolution layer: `kernel` is 1 or 3, stride 1, zero padding
/// `kernel / 2`, so spatial size is always preserved.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    /// Row-major `[out_channels][in_channels][kernel][kernel]`.
    pub weight: Vec<f32>,
    /// One bias per output channel.
    pub bias: Vec<f32>,
}

impl Conv2d {
    /// A zero-initialized layer of the given shape.
    pub fn zeros(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        assert!(kernel == 1 || kernel == 3, "only 1x1 and 3x3 kernels are used");
        Self {
            in_channels,
            out_channels,
            kernel,
            weight: vec![0.0; out_channels * in_channels * kernel * kernel],
            bias: vec![0.0; out_channels],
        }
    }

    /// Number of weight + bias parameters.
    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    /// Convolution with same-size output.
    pub fn forward(&self, x: &FeatureMap) -> FeatureMap {
        assert_eq!(x.channels(), self.in_channels, "conv input channel mismatch");
        let (_, h, w) = x.shape();
        let mut y = FeatureMap::zeros(self.out_channels, h, w);
        for oc in 0..self.out_channels {
            y.channel_mut(oc).fill(self.bias[oc]);
        }
        if self.kernel == 1 {
            conv1x1_accumulate(x, &self.weight, self.in_channels, self.out_channels, &mut y);
        } else {
            conv3x3_accumulate(x, &self.weight, self.in_channels, self.out_channels, &mut y);
        }
        y
    }

    /// Convolution followed by ReLU.
    pub fn forward_relu(&self, x: &FeatureMap) -> FeatureMap {
        let mut y = self.forward(x);
        relu_in_place(&mut y);
        y
    }

    /// Gradient with respect to the input: the adjoint convolution, i.e. a
    /// same-padding convolution of `grad_y` with the spatially flipped,
    /// in/out-transposed kernel.
    pub fn backward_input(&self, grad_y: &FeatureMap) -> FeatureMap {
        assert_eq!(grad_y.channels(), self.out_channels, "conv grad channel mismatch");
        let (_, h, w) = grad_y.shape();
        let k = self.kernel;
        // flipped[ic][oc][ky][kx] = weight[oc][ic][k-1-ky][k-1-kx]
        let mut flipped = vec![0.0f32; self.weight.len()];
        for oc in 0..self.out_channels {
            for ic in 0..self.in_channels {
                for ky in 0..k {
                    for kx in 0..k {
                        flipped[((ic * self.out_channels + oc) * k + ky) * k + kx] = self.weight
                            [((oc * self.in_channels + ic) * k + (k - 1 - ky)) * k + (k - 1 - kx)];
                    }
                }
            }
        }
        let mut gx = FeatureMap::zeros(self.in_channels, h, w);
        if k == 1 {
            conv1x1_accumulate(grad_y, &flipped, self.out_channels, self.in_channels, &mut gx);
        } else {
            conv3x3_accumulate(grad_y, &flipped, self.out_channels, self.in_channels, &mut gx);
        }
        gx
    }

    /// Gradients with respect to weights and biases, accumulated into
    /// `grad_w` / `grad_b` (callers zero or reuse them across a batch).
    pub fn backward_params(
        &self,
        x: &FeatureMap,
        grad_y: &FeatureMap,
        grad_w: &mut [f32],
        grad_b: &mut [f32],
    ) {
        assert_eq!(grad_w.len(), self.weight.len());
        assert_eq!(grad_b.len(), self.bias.len());
        let (_, h, w) = x.shape();
        let plane = h * w;
        for oc in 0..self.out_channels {
            let mut s = 0.0f32;
            for &g in grad_y.channel(oc) {
                s += g;
            }
            grad_b[oc] += s;
        }
        if self.kernel == 1 {
            // grad_w[oc][ic] += sum_n grad_y[oc][n] * x[ic][n]
            unsafe {
                matrixmultiply::sgemm(
                    self.out_channels,
                    plane,
                    self.in_channels,
                    1.0,
                    grad_y.data().as_ptr(),
                    plane as isize,
                    1,
                    x.data().as_ptr(),
                    1,
                    plane as isize,
                    1.0,
                    grad_w.as_mut_ptr(),
                    self.in_channels as isize,
                    1,
                );
            }
        } else {
            grad_weights_3x3(x, grad_y, self.in_channels, self.out_channels, grad_w);
        }
    }
}

/// Target size in floats for the im2col tile used by the 3x3 weight-gradient
/// GEMM; tiles stay cache-resident without repeated large allocations.
const IM2COL_TILE_FLOATS: usize = 1 << 20;

/// y += conv1x1(x, weight): one GEMM over the flattened planes.
fn conv1x1_accumulate(
    x: &FeatureMap,
    weight: &[f32],
    in_channels: usize,
    out_channels: usize,
    y: &mut FeatureMap,
) {
    let plane = x.plane_len();
    unsafe {
        matrixmultiply::sgemm(
            out_channels,
            in_channels,
            plane,
            1.0,
            weight.as_ptr(),
            in_channels as isize,
            1,
            x.data().as_ptr(),
            plane as isize,
            1,
            1.0,
            y.data_mut().as_mut_ptr(),
            plane as isize,
            1,
        );
    }
}

/// Output channels per register block of the direct 3x3 kernel.
const OC_BLOCK: usize = 8;
/// Pixels per register block of the direct 3x3 kernel.
const X_VEC: usize = 8;

/// y += conv3x3(x, weight) with zero padding 1.
///
/// Direct register-blocked kernel. The input is copied once into a
/// zero-padded buffer and the weights are repacked so each block of eight
/// output channels sits contiguously per tap. The inner loop then keeps an
/// 8 output-channel x 8 pixel accumulator tile live in registers across the
/// whole `in_channels * 9` reduction, so every input element is read once
/// per output block instead of being expanded ninefold the way an
/// im2col/GEMM lowering would.
fn conv3x3_accumulate(
    x: &FeatureMap,
    weight: &[f32],
    in_channels: usize,
    out_channels: usize,
    y: &mut FeatureMap,
) {
    let (_, h, w) = x.shape();
    let wp = w + 2;
    let mut padded = vec![0.0f32; in_channels * (h + 2) * wp];
    for c in 0..in_channels {
        let src = x.channel(c);
        for row in 0..h {
            let at = (c * (h + 2) + row + 1) * wp + 1;
            padded[at..at + w].copy_from_slice(&src[row * w..(row + 1) * w]);
        }
    }
    // Tap r = (ic*3 + ky)*3 + kx reads the padded input at
    // row_start(row, x0) + offsets[r]; the table flattens the (ic, ky, kx)
    // nest into one loop the compiler unrolls only moderately, which keeps
    // the accumulator tile out of spill territory.
    let kdim = in_channels * 9;
    let offsets: Vec<usize> = (0..kdim)
        .map(|r| {
            let (ic, ky, kx) = (r / 9, (r / 3) % 3, r % 3);
            (ic * (h + 2) + ky) * wp + kx
        })
        .collect();
    #[cfg(target_arch = "x86_64")]
    {
        if std::arch::is_x86_feature_detected!("avx512f") {
            let packed = pack_weights(weight, kdim, out_channels, 16);
            unsafe {
                conv3x3_blocks_avx512(&padded, &packed, &offsets, out_channels, h, w, y)
            };
            return;
        }
        if std::arch::is_x86_feature_detected!("avx2")
            && std::arch::is_x86_feature_detected!("fma")
        {
            let packed = pack_weights(weight, kdim, out_channels, OC_BLOCK);
            unsafe {
                conv3x3_blocks_avx2(&padded, &packed, &offsets, out_channels, h, w, y)
            };
            return;
        }
    }
    let packed = pack_weights(weight, kdim, out_channels, OC_BLOCK);
    conv3x3_blocks(&padded, &packed, &offsets, out_channels, h, w, y);
}

/// Transposes `weight` (`[out][kdim]` row-major) into per-block column
/// panels: `packed[(block * kdim + r) * ocb + o] = weight[(block*ocb + o) *
/// kdim + r]`, zero-filled where the last block runs past `out_channels`,
/// so a kernel block reads its `ocb` weights for tap `r` as one contiguous
/// run.
fn pack_weights(weight: &[f32], kdim: usize, out_channels: usize, ocb: usize) -> Vec<f32> {
    let blocks = out_channels.div_ceil(ocb);
    let mut packed = vec![0.0f32; blocks * kdim * ocb];
    for oc in 0..out_channels {
        let (block, o) = (oc / ocb, oc % ocb);
        for r in 0..kdim {
            packed[(block * kdim + r) * ocb + o] = weight[oc * kdim + r];
        }
    }
    packed
}

/// The AVX-512 build of the direct kernel: a 16 output-channel x 16 pixel
/// accumulator tile in sixteen zmm registers. Doubling both tile sides
/// relative to the AVX2 kernel halves the broadcast-load count per MAC and
/// halves how often the padded input is re-streamed.
///
/// # Safety
/// Requires the avx512f CPU feature; slice geometry is validated by the
/// caller ([`conv3x3_accumulate`]).
#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f")]
unsafe fn conv3x3_blocks_avx512(
    padded: &[f32],
    packed: &[f32],
    offsets: &[usize],
    out_channels: usize,
    h: usize,
    w: usize,
    y: &mut FeatureMap,
) {
    use std::arch::x86_64::*;
    const OCB: usize = 16;
    const XV: usize = 16;
    let wp = w + 2;
    let kdim = offsets.len();
    let blocks = out_channels.div_ceil(OCB);
    for row in 0..h {
        for block in 0..blocks {
            let wblock = &packed[block * kdim * OCB..(block + 1) * kdim * OCB];
            let ocb = OCB.min(out_channels - block * OCB);
            let mut x0 = 0;
            while x0 + XV <= w {
                let pbase = padded.as_ptr().add(row * wp + x0);
                let mut a00 = _mm512_setzero_ps();
                let (mut a01, mut a02, mut a03) = (a00, a00, a00);
                let (mut a04, mut a05, mut a06, mut a07) = (a00, a00, a00, a00);
                let (mut a08, mut a09, mut a10, mut a11) = (a00, a00, a00, a00);
                let (mut a12, mut a13, mut a14, mut a15) = (a00, a00, a00, a00);
                for (r, &off) in offsets.iter().enumerate() {
                    let xv = _mm512_loadu_ps(pbase.add(off));
                    let wr = wblock.as_ptr().add(r * OCB);
                    macro_rules! tap {
                        ($acc:ident, $o:literal) => {
                            $acc = _mm512_fmadd_ps(_mm512_set1_ps(*wr.add($o)), xv, $acc);
                        };
                    }
                    tap!(a00, 0);
                    tap!(a01, 1);
                    tap!(a02, 2);
                    tap!(a03, 3);
                    tap!(a04, 4);
                    tap!(a05, 5);
                    tap!(a06, 6);
                    tap!(a07, 7);
                    tap!(a08, 8);
                    tap!(a09, 9);
                    tap!(a10, 10);
                    tap!(a11, 11);
                    tap!(a12, 12);
                    tap!(a13, 13);
                    tap!(a14, 14);
                    tap!(a15, 15);
                }
                let acc = [
                    a00, a01, a02, a03, a04, a05, a06, a07, a08, a09, a10, a11, a12, a13,
                    a14, a15,
                ];
                for (o, a) in acc.iter().enumerate().take(ocb) {
                    let dst = y
                        .channel_mut(block * OCB + o)
                        .as_mut_ptr()
                        .add(row * w + x0);
                    _mm512_storeu_ps(dst, _mm512_add_ps(_mm512_loadu_ps(dst), *a));
                }
                x0 += XV;
            }
            scalar_tail(padded, wblock, offsets, ocb, OCB, block, w, row, x0, y);
        }
    }
}

/// The AVX2+FMA build of the direct kernel: the 8x8 accumulator tile lives
/// in eight ymm registers and each weight is a single broadcast-load + FMA.
/// Written with explicit intrinsics because plain `a * b + c` must not be
/// contracted to FMA under Rust's FP semantics.
///
/// # Safety
/// Requires the avx2 and fma CPU features; slice geometry is validated by
/// the caller ([`conv3x3_accumulate`]).
#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn conv3x3_blocks_avx2(
    padded: &[f32],
    packed: &[f32],
    offsets: &[usize],
    out_channels: usize,
    h: usize,
    w: usize,
    y: &mut FeatureMap,
) {
    use std::arch::x86_64::*;
    let wp = w + 2;
    let kdim = offsets.len();
    let blocks = out_channels.div_ceil(OC_BLOCK);
    // Rows outer, output blocks inner: the three input rows a tap sweep
    // reads stay cache-resident while every output block consumes them.
    for row in 0..h {
        for block in 0..blocks {
            let wblock = &packed[block * kdim * OC_BLOCK..(block + 1) * kdim * OC_BLOCK];
            let ocb = OC_BLOCK.min(out_channels - block * OC_BLOCK);
            let mut x0 = 0;
            while x0 + X_VEC <= w {
                let pbase = padded.as_ptr().add(row * wp + x0);
                // Eight named accumulators so they stay in ymm registers;
                // an array would be kept on the stack by the store loop's
                // runtime bound.
                let (mut a0, mut a1, mut a2, mut a3) = (
                    _mm256_setzero_ps(),
                    _mm256_setzero_ps(),
                    _mm256_setzero_ps(),
                    _mm256_setzero_ps(),
                );
                let (mut a4, mut a5, mut a6, mut a7) = (a0, a0, a0, a0);
                for (r, &off) in offsets.iter().enumerate() {
                    let xv = _mm256_loadu_ps(pbase.add(off));
                    let wr = wblock.as_ptr().add(r * OC_BLOCK);
                    macro_rules! tap {
                        ($acc:ident, $o:literal) => {
                            $acc =
                                _mm256_fmadd_ps(_mm256_broadcast_ss(&*wr.add($o)), xv, $acc);
                        };
                    }
                    tap!(a0, 0);
                    tap!(a1, 1);
                    tap!(a2, 2);
                    tap!(a3, 3);
                    tap!(a4, 4);
                    tap!(a5, 5);
                    tap!(a6, 6);
                    tap!(a7, 7);
                }
                let acc = [a0, a1, a2, a3, a4, a5, a6, a7];
                for (o, a) in acc.iter().enumerate().take(ocb) {
                    let dst = y
                        .channel_mut(block * OC_BLOCK + o)
                        .as_mut_ptr()
                        .add(row * w + x0);
                    _mm256_storeu_ps(dst, _mm256_add_ps(_mm256_loadu_ps(dst), *a));
                }
                x0 += X_VEC;
            }
            scalar_tail(padded, wblock, offsets, ocb, OC_BLOCK, block, w, row, x0, y);
        }
    }
}

/// Baseline-ISA build of the direct kernel for CPUs without AVX2/FMA.
fn conv3x3_blocks(
    padded: &[f32],
    packed: &[f32],
    offsets: &[usize],
    out_channels: usize,
    h: usize,
    w: usize,
    y: &mut FeatureMap,
) {
    let wp = w + 2;
    let kdim = offsets.len();
    for row in 0..h {
        for block in 0..out_channels.div_ceil(OC_BLOCK) {
            let wblock = &packed[block * kdim * OC_BLOCK..(block + 1) * kdim * OC_BLOCK];
            let ocb = OC_BLOCK.min(out_channels - block * OC_BLOCK);
            let mut x0 = 0;
            while x0 + X_VEC <= w {
                let pbase = row * wp + x0;
                let mut acc = [[0.0f32; X_VEC]; OC_BLOCK];
                for (r, &off) in offsets.iter().enumerate() {
                    let xv: [f32; X_VEC] =
                        padded[pbase + off..pbase + off + X_VEC].try_into().unwrap();
                    let wr: [f32; OC_BLOCK] =
                        wblock[r * OC_BLOCK..][..OC_BLOCK].try_into().unwrap();
                    for o in 0..OC_BLOCK {
                        for l in 0..X_VEC {
                            acc[o][l] += wr[o] * xv[l];
                        }
                    }
                }
                for o in 0..ocb {
                    let dst =
                        &mut y.channel_mut(block * OC_BLOCK + o)[row * w + x0..][..X_VEC];
                    for (d, a) in dst.iter_mut().zip(&acc[o]) {
                        *d += a;
                    }
                }
                x0 += X_VEC;
            }
            scalar_tail(padded, wblock, offsets, ocb, OC_BLOCK, block, w, row, x0, y);
        }
    }
}

/// Finishes output columns `x0 .. w` of one row with plain scalar math;
/// used by every kernel build for widths that are not a multiple of its
/// pixel vector. `stride` is the packed-weight block width.
#[allow(clippy::too_many_arguments)]
#[inline]
fn scalar_tail(
    padded: &[f32],
    wblock: &[f32],
    offsets: &[usize],
    ocb: usize,
    stride: usize,
    block: usize,
    w: usize,
    row: usize,
    mut x0: usize,
    y: &mut FeatureMap,
) {
    let wp = w + 2;
    while x0 < w {
        let pbase = row * wp + x0;
        let mut acc = [0.0f32; 16];
        for (r, &off) in offsets.iter().enumerate() {
            let xs = padded[pbase + off];
            let wr = &wblock[r * stride..][..stride];
            for (a, &wv) in acc.iter_mut().zip(wr) {
                *a += wv * xs;
            }
        }
        for (o, &a) in acc.iter().enumerate().take(ocb) {
            y.channel_mut(block * stride + o)[row * w + x0] += a;
        }
        x0 += 1;
    }
}

/// grad_w += d(conv3x3)/dw pairing `grad_y` with im2col tiles of `x`.
fn grad_weights_3x3(
    x: &FeatureMap,
    grad_y: &FeatureMap,
    in_channels: usize,
    out_channels: usize,
    grad_w: &mut [f32],
) {
    let (_, h, w) = x.shape();
    let plane = h * w;
    let kdim = in_channels * 9;
    let rows_per_tile = (IM2COL_TILE_FLOATS / (kdim * w)).clamp(1, h);
    let tile_cap = rows_per_tile * w;
    let mut tile = vec![0.0f32; kdim * tile_cap];
    let mut y0 = 0;
    while y0 < h {
        let rows = rows_per_tile.min(h - y0);
        let t = rows * w;
        im2col_rows(x, in_channels, y0, rows, &mut tile, t);
        // grad_w[oc][r] += sum_t grad_y[oc][p0 + t] * tile[r][t]
        unsafe {
            matrixmultiply::sgemm(
                out_channels,
                t,
                kdim,
                1.0,
                grad_y.data().as_ptr().add(y0 * w),
                plane as isize,
                1,
                tile.as_ptr(),
                1,
                t as isize,
                1.0,
                grad_w.as_mut_ptr(),
                kdim as isize,
                1,
            );
        }
        y0 += rows;
    }
}

/// Fills `tile[r][0..t]` with im2col rows (3x3, pad 1) for output rows
/// `y0 .. y0+rows`; `t = rows * w` is the tile's column count.
fn im2col_rows(
    x: &FeatureMap,
    in_channels: usize,
    y0: usize,
    rows: usize,
    tile: &mut [f32],
    t: usize,
) {
    let (_, h, w) = x.shape();
    for ic in 0..in_channels {
        let src = x.channel(ic);
        for ky in 0..3 {
            for kx in 0..3 {
                let r = (ic * 3 + ky) * 3 + kx;
                let dst = &mut tile[r * t..(r + 1) * t];
                for yy in 0..rows {
                    let seg = &mut dst[yy * w..(yy + 1) * w];
                    let sy = (y0 + yy) as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        seg.fill(0.0);
                        continue;
                    }
                    let row = &src[sy as usize * w..(sy as usize + 1) * w];
                    match kx {
                        0 => {
                            seg[0] = 0.0;
                            seg[1..].copy_from_slice(&row[..w - 1]);
                        }
                        1 => seg.copy_from_slice(row),
                        _ => {
                            seg[..w - 1].copy_from_slice(&row[1..]);
                            seg[w - 1] = 0.0;
                        }
                    }
                }
            }
        }
    }
}

/// ReLU applied in place.
pub fn relu_in_place(x: &mut FeatureMap) {
    for v in x.data_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Backward of ReLU given the post-activation output: zeroes the gradient
/// wherever the output is zero (subgradient 0 at the kink).
pub fn relu_backward_in_place(grad: &mut FeatureMap, output: &FeatureMap) {
    assert_eq!(grad.shape(), output.shape());
    for (g, &o) in grad.data_mut().iter_mut().zip(output.data()) {
        if o <= 0.0 {
            *g = 0.0;
        }
    }
}

/// 2x2 stride-2 max pooling. Returns the pooled map and, per output cell,
/// the winning position code `dy*2 + dx` (ties keep the first maximum in
/// scan order (0,0), (0,1), (1,0), (1,1)).
pub fn maxpool2(x: &FeatureMap) -> (FeatureMap, Vec<u8>) {
    let (c, h, w) = x.shape();
    assert!(h % 2 == 0 && w % 2 == 0, "maxpool2 requires even spatial dims");
    let (oh, ow) = (h / 2, w / 2);
    let mut y = FeatureMap::zeros(c, oh, ow);
    let mut idx = vec![0u8; c * oh * ow];
    for ch in 0..c {
        let src = x.channel(ch);
        let dst = y.channel_mut(ch);
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f32::NEG_INFINITY;
                let mut code = 0u8;
                for dy in 0..2 {
                    for dx in 0..2 {
                        let v = src[(2 * oy + dy) * w + 2 * ox + dx];
                        if v > best {
                            best = v;
                            code = (dy * 2 + dx) as u8;
                        }
                    }
                }
                dst[oy * ow + ox] = best;
                idx[(ch * oh + oy) * ow + ox] = code;
            }
        }
    }
    (y, idx)
}

/// Adjoint of [`maxpool2`]: routes each gradient cell to the stored argmax.
pub fn maxpool2_backward(grad_y: &FeatureMap, idx: &[u8], in_h: usize, in_w: usize) -> FeatureMap {
    let (c, oh, ow) = grad_y.shape();
    assert_eq!(idx.len(), c * oh * ow);
    assert_eq!((in_h / 2, in_w / 2), (oh, ow));
    let mut gx = FeatureMap::zeros(c, in_h, in_w);
    for ch in 0..c {
        let src = grad_y.channel(ch);
        let dst = gx.channel_mut(ch);
        for oy in 0..oh {
            for ox in 0..ow {
                let code = idx[(ch * oh + oy) * ow + ox] as usize;
                let (dy, dx) = (code / 2, code % 2);
                dst[(2 * oy + dy) * in_w + 2 * ox + dx] += src[oy * ow + ox];
            }
        }
    }
    gx
}

/// Nearest-neighbor 2x upsampling: each pixel becomes a 2x2 block.
pub fn upsample2x(x: &FeatureMap) -> FeatureMap {
    let (c, h, w) = x.shape();
    let mut y = FeatureMap::zeros(c, 2 * h, 2 * w);
    for ch in 0..c {
        let src = x.channel(ch);
        let dst = y.channel_mut(ch);
        for yy in 0..h {
            for xx in 0..w {
                let v = src[yy * w + xx];
                let base = 2 * yy * 2 * w + 2 * xx;
                dst[base] = v;
                dst[base + 1] = v;
                dst[base + 2 * w] = v;
                dst[base + 2 * w + 1] = v;
            }
        }
    }
    y
}

/// Adjoint of [`upsample2x`]: sums each 2x2 block of the gradient.
pub fn upsample2x_backward(grad_y: &FeatureMap) -> FeatureMap {
    let (c, h2, w2) = grad_y.shape();
    assert!(h2 % 2 == 0 && w2 % 2 == 0);
    let (h, w) = (h2 / 2, w2 / 2);
    let mut gx = FeatureMap::zeros(c, h, w);
    for ch in 0..c {
        let src = grad_y.channel(ch);
        let dst = gx.channel_mut(ch);
        for yy in 0..h {
            for xx in 0..w {
                let base = 2 * yy * w2 + 2 * xx;
                dst[yy * w + xx] = src[base] + src[base + 1] + src[base + w2] + src[base + w2 + 1];
            }
        }
    }
    gx
}

/// a += b, elementwise.
pub fn add_assign(a: &mut FeatureMap, b: &FeatureMap) {
    assert_eq!(a.shape(), b.shape());
    for (x, &y) in a.data_mut().iter_mut().zip(b.data()) {
        *x += y;
    }
}

/// Splits a gradient over a channel concatenation back into per-part
/// gradients with the given channel counts.
pub fn split_channels(grad: &FeatureMap, parts: &[usize]) -> Vec<FeatureMap> {
    let (c, h, w) = grad.shape();
    assert_eq!(parts.iter().sum::<usize>(), c, "split does not cover all channels");
    let mut out = Vec::with_capacity(parts.len());
    let mut at = 0;
    for &p in parts {
        let mut m = FeatureMap::zeros(p, h, w);
        m.data_mut()
            .copy_from_slice(&grad.data()[at * h * w..(at + p) * h * w]);
        out.push(m);
        at += p;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_map(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> FeatureMap {
        let data = (0..c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
        FeatureMap::from_vec(c, h, w, data)
    }

    /// Brute-force f64 convolution, the oracle for the GEMM path.
    fn conv_naive(x: &FeatureMap, conv: &Conv2d) -> Vec<f64> {
        let (_, h, w) = x.shape();
        let k = conv.kernel as isize;
        let pad = k / 2;
        let mut out = vec![0.0f64; conv.out_channels * h * w];
        for oc in 0..conv.out_channels {
            for y in 0..h as isize {
                for xx in 0..w as isize {
                    let mut acc = conv.bias[oc] as f64;
                    for ic in 0..conv.in_channels {
                        for ky in 0..k {
                            for kx in 0..k {
                                let (sy, sx) = (y + ky - pad, xx + kx - pad);
                                if sy < 0 || sy >= h as isize || sx < 0 || sx >= w as isize {
                                    continue;
                                }
                                let wv = conv.weight[((oc * conv.in_channels + ic)
                                    * conv.kernel
                                    + ky as usize)
                                    * conv.kernel
                                    + kx as usize];
                                acc += wv as f64
                                    * x.get(ic, sy as usize, sx as usize) as f64;
                            }
                        }
                    }
                    out[(oc * h + y as usize) * w + xx as usize] = acc;
                }
            }
        }
        out
    }

    fn random_conv(rng: &mut ChaCha8Rng, ic: usize, oc: usize, k: usize) -> Conv2d {
        let mut conv = Conv2d::zeros(ic, oc, k);
        for v in conv.weight.iter_mut() {
            *v = rng.gen_range(-0.5..0.5);
        }
        for v in conv.bias.iter_mut() {
            *v = rng.gen_range(-0.2..0.2);
        }
        conv
    }

    #[test]
    fn conv3x3_matches_naive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for &(ic, oc, h, w) in &[
            (3usize, 5usize, 6usize, 7usize),
            (1, 4, 5, 1),
            (2, 3, 4, 2),
            (4, 2, 1, 6),
            (7, 16, 8, 8),
            (2, 2, 2, 3),
        ] {
            let x = random_map(&mut rng, ic, h, w);
            let conv = random_conv(&mut rng, ic, oc, 3);
            let got = conv.forward(&x);
            let want = conv_naive(&x, &conv);
            for (i, (&g, &e)) in got.data().iter().zip(&want).enumerate() {
                assert!(
                    (g as f64 - e).abs() < 1e-4,
                    "conv3x3 mismatch at {i} ({ic},{oc},{h},{w}): {g} vs {e}"
                );
            }
        }
    }

    #[test]
    fn conv1x1_matches_naive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = random_map(&mut rng, 6, 5, 4);
        let conv = random_conv(&mut rng, 6, 3, 1);
        let got = conv.forward(&x);
        let want = conv_naive(&x, &conv);
        for (&g, &e) in got.data().iter().zip(&want) {
            assert!((g as f64 - e).abs() < 1e-5);
        }
    }

    #[test]
    fn backward_input_is_adjoint_of_forward() {
        // <conv(x), g> must equal <x, conv_adjoint(g)> up to rounding.
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for &k in &[1usize, 3] {
            let x = random_map(&mut rng, 4, 6, 5);
            let g = random_map(&mut rng, 3, 6, 5);
            let mut conv = random_conv(&mut rng, 4, 3, k);
            conv.bias.iter_mut().for_each(|b| *b = 0.0);
            let y = conv.forward(&x);
            let gx = conv.backward_input(&g);
            let lhs: f64 = y
                .data()
                .iter()
                .zip(g.data())
                .map(|(&a, &b)| a as f64 * b as f64)
                .sum();
            let rhs: f64 = x
                .data()
                .iter()
                .zip(gx.data())
                .map(|(&a, &b)| a as f64 * b as f64)
                .sum();
            assert!((lhs - rhs).abs() < 1e-3 * lhs.abs().max(1.0), "k={k}: {lhs} vs {rhs}");
        }
    }

    #[test]
    fn backward_params_matches_naive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        for &k in &[1usize, 3] {
            let (ic, oc, h, w) = (3, 4, 5, 6);
            let x = random_map(&mut rng, ic, h, w);
            let g = random_map(&mut rng, oc, h, w);
            let conv = random_conv(&mut rng, ic, oc, k);
            let mut gw = vec![0.0f32; conv.weight.len()];
            let mut gb = vec![0.0f32; oc];
            conv.backward_params(&x, &g, &mut gw, &mut gb);
            let pad = (k / 2) as isize;
            for o in 0..oc {
                let want_b: f64 = g.channel(o).iter().map(|&v| v as f64).sum();
                assert!((gb[o] as f64 - want_b).abs() < 1e-4);
                for i in 0..ic {
                    for ky in 0..k as isize {
                        for kx in 0..k as isize {
                            let mut want = 0.0f64;
                            for y in 0..h as isize {
                                for xx in 0..w as isize {
                                    let (sy, sx) = (y + ky - pad, xx + kx - pad);
                                    if sy < 0 || sy >= h as isize || sx < 0 || sx >= w as isize {
                                        continue;
                                    }
                                    want += g.get(o, y as usize, xx as usize) as f64
                                        * x.get(i, sy as usize, sx as usize) as f64;
                                }
                            }
                            let got =
                                gw[((o * ic + i) * k as usize + ky as usize) * k as usize
                                    + kx as usize] as f64;
                            assert!(
                                (got - want).abs() < 1e-4,
                                "k={k} grad_w[{o},{i},{ky},{kx}] {got} vs {want}"
                            );
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn maxpool_takes_first_maximum_on_ties() {
        let x = FeatureMap::from_vec(1, 2, 2, vec![2.0, 2.0, 2.0, 2.0]);
        let (y, idx) = maxpool2(&x);
        assert_eq!(y.data(), &[2.0]);
        assert_eq!(idx, vec![0]);
        let x = FeatureMap::from_vec(1, 2, 4, vec![1.0, 5.0, 0.0, 0.0, 5.0, 2.0, 0.0, 7.0]);
        let (y, idx) = maxpool2(&x);
        assert_eq!(y.data(), &[5.0, 7.0]);
        assert_eq!(idx, vec![1, 3]);
    }

    #[test]
    fn maxpool_backward_routes_to_argmax() {
        let x = FeatureMap::from_vec(1, 2, 2, vec![1.0, 4.0, 3.0, 2.0]);
        let (_, idx) = maxpool2(&x);
        let g = FeatureMap::from_vec(1, 1, 1, vec![2.5]);
        let gx = maxpool2_backward(&g, &idx, 2, 2);
        assert_eq!(gx.data(), &[0.0, 2.5, 0.0, 0.0]);
    }

    #[test]
    fn upsample_replicates_blocks() {
        // 2x1x1 map [[a]],[[b]] -> 2x2x2 map, each channel constant.
        let x = FeatureMap::from_vec(2, 1, 1, vec![3.0, -1.0]);
        let y = upsample2x(&x);
        assert_eq!(y.channel(0), &[3.0; 4]);
        assert_eq!(y.channel(1), &[-1.0; 4]);
        // 1x2x2 [[1,2],[3,4]] -> 2x2 blocks of 1,2,3,4.
        let x = FeatureMap::from_vec(1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let y = upsample2x(&x);
        assert_eq!(
            y.data(),
            &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0, 3.0, 3.0, 4.0, 4.0]
        );
    }

    #[test]
    fn upsample_preserves_channel_means() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let x = random_map(&mut rng, 3, 4, 5);
        let y = upsample2x(&x);
        for c in 0..3 {
            let m1: f64 = x.channel(c).iter().map(|&v| v as f64).sum::<f64>() / 20.0;
            let m2: f64 = y.channel(c).iter().map(|&v| v as f64).sum::<f64>() / 80.0;
            assert!((m1 - m2).abs() < 1e-6);
        }
    }

    #[test]
    fn upsample_backward_sums_blocks() {
        let g = FeatureMap::from_vec(1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let gx = upsample2x_backward(&g);
        assert_eq!(gx.data(), &[1.0 + 2.0 + 3.0 + 4.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let x = random_map(&mut rng, 2, 3, 3);
        let g = random_map(&mut rng, 2, 6, 6);
        // Adjoint identity: <up(x), g> = <x, up_adj(g)>.
        let y = upsample2x(&x);
        let gx = upsample2x_backward(&g);
        let lhs: f64 = y
            .data()
            .iter()
            .zip(g.data())
            .map(|(&a, &b)| a as f64 * b as f64)
            .sum();
        let rhs: f64 = x
            .data()
            .iter()
            .zip(gx.data())
            .map(|(&a, &b)| a as f64 * b as f64)
            .sum();
        assert!((lhs - rhs).abs() < 1e-4);
    }

    #[test]
    fn relu_and_mask() {
        let mut x = FeatureMap::from_vec(1, 1, 4, vec![-1.0, 0.0, 2.0, -0.5]);
        relu_in_place(&mut x);
        assert_eq!(x.data(), &[0.0, 0.0, 2.0, 0.0]);
        let mut g = FeatureMap::from_vec(1, 1, 4, vec![1.0, 1.0, 1.0, 1.0]);
        relu_backward_in_place(&mut g, &x);
        assert_eq!(g.data(), &[0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn split_inverts_concat() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let a = random_map(&mut rng, 2, 3, 3);
        let b = random_map(&mut rng, 5, 3, 3);
        let cat = FeatureMap::concat_channels(&[&a, &b]);
        let parts = split_channels(&cat, &[2, 5]);
        assert_eq!(parts[0], a);
        assert_eq!(parts[1], b);
    }
}
