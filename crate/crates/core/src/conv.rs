//! 3D cross-correlation, its adjoint (transposed convolution) and the
//! analytic gradients of both.
//!
//! All three kernels (gather, scatter, weight correlation) share one
//! geometry: a "wide" tensor sampled by a strided window to produce a
//! "narrow" one. Forward conv gathers wide→narrow; its input gradient and the
//! transposed convolution scatter narrow→wide. Sums are accumulated in `f64`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, dim_err, Result};
use crate::tensor::{FeatureTensor, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct KernelShape {
    pub cout: usize,
    pub cin: usize,
    pub kh: usize,
    pub kw: usize,
    pub kb: usize,
}

impl KernelShape {
    pub const fn new(cout: usize, cin: usize, kh: usize, kw: usize, kb: usize) -> Self {
        KernelShape { cout, cin, kh, kw, kb }
    }

    pub fn taps(&self) -> usize {
        self.kh * self.kw * self.kb
    }

    pub fn weight_count(&self) -> usize {
        self.cout * self.cin * self.taps()
    }

    pub fn extent(&self) -> [usize; 3] {
        [self.kh, self.kw, self.kb]
    }
}

/// One filter bank: weights laid out `(cout, cin, kh, kw, kb)` plus a bias per
/// output channel.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvKernel<T = f32> {
    pub shape: KernelShape,
    pub weights: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> ConvKernel<T> {
    pub fn zeros(shape: KernelShape) -> Self {
        ConvKernel {
            shape,
            weights: vec![T::zero(); shape.weight_count()],
            bias: vec![T::zero(); shape.cout],
        }
    }

    pub fn new(shape: KernelShape, weights: Vec<T>, bias: Vec<T>) -> Result<Self> {
        if weights.len() != shape.weight_count() || bias.len() != shape.cout {
            return dim_err(format!(
                "kernel {:?} needs {} weights and {} biases, got {} and {}",
                shape,
                shape.weight_count(),
                shape.cout,
                weights.len(),
                bias.len()
            ));
        }
        Ok(ConvKernel { shape, weights, bias })
    }

    /// Kernel with a single unit tap at the centre of each `(o, o)` filter.
    pub fn delta(channels: usize, k: [usize; 3]) -> Self {
        let shape = KernelShape::new(channels, channels, k[0], k[1], k[2]);
        let mut kernel = Self::zeros(shape);
        let centre = ((k[0] / 2) * k[1] + k[1] / 2) * k[2] + k[2] / 2;
        for c in 0..channels {
            kernel.weights[(c * channels + c) * shape.taps() + centre] = T::one();
        }
        kernel
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    /// Swap the two channel axes; the bias is reset to zero since its length
    /// changes.
    pub fn transpose_channels(&self) -> Self {
        let s = self.shape;
        let taps = s.taps();
        let mut out = Self::zeros(KernelShape { cout: s.cin, cin: s.cout, ..s });
        for o in 0..s.cout {
            for i in 0..s.cin {
                let src = (o * s.cin + i) * taps;
                let dst = (i * s.cout + o) * taps;
                out.weights[dst..dst + taps].copy_from_slice(&self.weights[src..src + taps]);
            }
        }
        out
    }

    pub fn cast<U: Scalar>(&self) -> ConvKernel<U> {
        ConvKernel {
            shape: self.shape,
            weights: self.weights.iter().map(|v| U::of_f64(v.as_f64())).collect(),
            bias: self.bias.iter().map(|v| U::of_f64(v.as_f64())).collect(),
        }
    }
}

/// Stride and zero padding per (height, width, band) axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConvSpec {
    pub stride: [usize; 3],
    pub padding: [usize; 3],
}

impl ConvSpec {
    pub const fn new(stride: [usize; 3], padding: [usize; 3]) -> Self {
        ConvSpec { stride, padding }
    }

    /// Stride 1 with `k / 2` padding: extents preserved for odd kernels.
    pub fn same(k: [usize; 3]) -> Self {
        ConvSpec { stride: [1, 1, 1], padding: [k[0] / 2, k[1] / 2, k[2] / 2] }
    }

    /// Spatial stride 2, band stride 1, `k / 2` padding.
    pub fn spatial_down2(k: [usize; 3]) -> Self {
        ConvSpec { stride: [2, 2, 1], padding: [k[0] / 2, k[1] / 2, k[2] / 2] }
    }

    /// Output extents of a forward convolution over `input`.
    pub fn conv_output(&self, input: [usize; 3], k: [usize; 3]) -> Result<[usize; 3]> {
        let mut out = [0; 3];
        for a in 0..3 {
            if self.stride[a] == 0 {
                return config_err("stride must be positive");
            }
            let padded = input[a] + 2 * self.padding[a];
            if padded < k[a] {
                return config_err(format!(
                    "axis {a}: extent {} with padding {} is smaller than kernel {}",
                    input[a], self.padding[a], k[a]
                ));
            }
            out[a] = (padded - k[a]) / self.stride[a] + 1;
        }
        Ok(out)
    }

    /// Output extents of the transposed convolution over `input`.
    pub fn tconv_output(
        &self,
        input: [usize; 3],
        k: [usize; 3],
        output_padding: [usize; 3],
    ) -> Result<[usize; 3]> {
        let mut out = [0; 3];
        for a in 0..3 {
            if self.stride[a] == 0 {
                return config_err("stride must be positive");
            }
            if output_padding[a] >= self.stride[a] {
                return config_err(format!(
                    "axis {a}: output padding {} must be below stride {}",
                    output_padding[a], self.stride[a]
                ));
            }
            let full = (input[a] - 1) * self.stride[a] + k[a] + output_padding[a];
            if full <= 2 * self.padding[a] {
                return config_err(format!("axis {a}: transposed output extent is not positive"));
            }
            out[a] = full - 2 * self.padding[a];
        }
        Ok(out)
    }
}

/// Gradients of a convolution with respect to its input and kernel.
#[derive(Debug, Clone)]
pub struct ConvGrads<T = f32> {
    pub grad_input: FeatureTensor<T>,
    pub grad_kernel: ConvKernel<T>,
}

/// Geometry shared by the three kernels. `wide` is the extent the window
/// slides over, `narrow` the extent of window positions.
#[derive(Clone, Copy)]
struct Geometry {
    wide: [usize; 3],
    narrow: [usize; 3],
    k: [usize; 3],
    stride: [usize; 3],
    pad: [usize; 3],
}

impl Geometry {
    /// Window positions `p` along axis `a` for which `p*s + tap - pad` falls
    /// inside the wide extent.
    #[inline]
    fn valid(&self, a: usize, tap: usize) -> (usize, usize) {
        let s = self.stride[a] as isize;
        let off = tap as isize - self.pad[a] as isize;
        let wide = self.wide[a] as isize;
        // p*s + off >= 0  and  p*s + off < wide
        let lo = if off >= 0 { 0 } else { (-off + s - 1) / s };
        let hi = if wide - off <= 0 { 0 } else { (wide - off + s - 1) / s };
        let hi = hi.min(self.narrow[a] as isize);
        if hi <= lo {
            (0, 0)
        } else {
            (lo as usize, hi as usize)
        }
    }

    #[inline]
    fn wide_index(&self, a: usize, p: usize, tap: usize) -> usize {
        p * self.stride[a] + tap - self.pad[a]
    }
}

/// Weight accessor: `w(o, i, tap) = weights[o*so + i*si + tap]`, where `o`
/// indexes narrow-side channels and `i` wide-side channels.
#[derive(Clone, Copy)]
struct WeightView<'a, T> {
    weights: &'a [T],
    so: usize,
    si: usize,
}

impl<T: Scalar> WeightView<'_, T> {
    #[inline]
    fn at(&self, o: usize, i: usize, tap: usize) -> f64 {
        self.weights[o * self.so + i * self.si + tap].as_f64()
    }
}

#[inline(always)]
fn axpy_strided<T: Scalar>(acc: &mut [f64], src: &[T], w: f64, lo: usize, hi: usize, s: usize, off: usize) {
    if s == 1 {
        let src = &src[lo + off..hi + off];
        for (a, &x) in acc[lo..hi].iter_mut().zip(src) {
            *a += w * x.as_f64();
        }
    } else {
        for p in lo..hi {
            acc[p] += w * src[p * s + off].as_f64();
        }
    }
}


/// Stride-1 helpers. Tensors are re-laid out on the zero-padded grid so that
/// every tap becomes one long contiguous axpy/dot; positions of the padded
/// layout that do not correspond to an output are computed and discarded.
/// Elements per cache tile of the unit-stride kernels.
const TILE: usize = 1024;

struct PaddedLayout {
    /// padded extents
    ext: [usize; 3],
    /// strides of the padded grid
    sh: usize,
    sw: usize,
    /// length of the output-indexed run
    run: usize,
}

impl PaddedLayout {
    fn new(g: &Geometry) -> Self {
        let ext = [g.wide[0] + 2 * g.pad[0], g.wide[1] + 2 * g.pad[1], g.wide[2] + 2 * g.pad[2]];
        let sw = ext[2];
        let sh = ext[1] * ext[2];
        let [nh, nw, nb] = g.narrow;
        let run = (nh - 1) * sh + (nw - 1) * sw + nb;
        PaddedLayout { ext, sh, sw, run }
    }

    fn volume(&self) -> usize {
        self.ext[0] * self.sh
    }

    fn tap_offset(&self, th: usize, tw: usize, tb: usize) -> usize {
        th * self.sh + tw * self.sw + tb
    }

    /// Copy a wide slab into the padded grid.
    fn pad_wide<T: Scalar>(&self, g: &Geometry, src: &[T]) -> Vec<f64> {
        let mut out = vec![0.0; self.volume()];
        let [h, w, b] = g.wide;
        for ih in 0..h {
            for iw in 0..w {
                let dst = (ih + g.pad[0]) * self.sh + (iw + g.pad[1]) * self.sw + g.pad[2];
                let row = &src[(ih * w + iw) * b..(ih * w + iw + 1) * b];
                for (d, &v) in out[dst..dst + b].iter_mut().zip(row) {
                    *d = v.as_f64();
                }
            }
        }
        out
    }

    /// Place a narrow slab on the output-indexed run (zeros elsewhere).
    fn spread_narrow<T: Scalar>(&self, g: &Geometry, src: &[T]) -> Vec<f64> {
        let mut out = vec![0.0; self.run];
        let [h, w, b] = g.narrow;
        for oh in 0..h {
            for ow in 0..w {
                let dst = oh * self.sh + ow * self.sw;
                let row = &src[(oh * w + ow) * b..(oh * w + ow + 1) * b];
                for (d, &v) in out[dst..dst + b].iter_mut().zip(row) {
                    *d = v.as_f64();
                }
            }
        }
        out
    }
}

#[inline(always)]
fn axpy(acc: &mut [f64], src: &[f64], w: f64) {
    for (a, &x) in acc.iter_mut().zip(src) {
        *a += w * x;
    }
}

#[inline(always)]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    // four lanes keep the reduction order fixed and let it vectorise
    let mut lanes = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        for l in 0..4 {
            lanes[l] += a[4 * c + l] * b[4 * c + l];
        }
    }
    let mut tail = 0.0;
    for j in 4 * chunks..a.len() {
        tail += a[j] * b[j];
    }
    (lanes[0] + lanes[1]) + (lanes[2] + lanes[3]) + tail
}

fn is_unit_stride(g: &Geometry) -> bool {
    g.stride == [1, 1, 1]
}

fn gather_unit_stride<T: Scalar>(
    wide: &[T],
    narrow: &mut [T],
    ci: usize,
    co: usize,
    g: Geometry,
    w: WeightView<'_, T>,
    bias: Option<&[T]>,
) {
    let lay = PaddedLayout::new(&g);
    let wide_vol = g.wide.iter().product::<usize>();
    let narrow_vol = g.narrow.iter().product::<usize>();
    let batch = wide.len() / (ci * wide_vol);
    let padded: Vec<Vec<f64>> = (0..batch * ci)
        .into_par_iter()
        .map(|slab| lay.pad_wide(&g, &wide[slab * wide_vol..(slab + 1) * wide_vol]))
        .collect();
    let [kh, kw, kb] = g.k;
    let [nh, nw, nb] = g.narrow;
    let taps = kh * kw * kb;
    let offsets: Vec<usize> = (0..taps).map(|t| lay.tap_offset(t / (kw * kb), (t / kb) % kw, t % kb)).collect();
    narrow.par_chunks_mut(narrow_vol).enumerate().for_each(|(slab, out)| {
        let n = slab / co;
        let o = slab % co;
        let mut acc = vec![0.0f64; lay.run];
        let wts: Vec<f64> = (0..ci * taps).map(|it| w.at(o, it / taps, it % taps)).collect();
        for start in (0..lay.run).step_by(TILE) {
            let end = (start + TILE).min(lay.run);
            let tile = &mut acc[start..end];
            for i in 0..ci {
                let src = &padded[n * ci + i];
                for (t, &off) in offsets.iter().enumerate() {
                    let wv = wts[i * taps + t];
                    if wv != 0.0 {
                        axpy(tile, &src[off + start..off + end], wv);
                    }
                }
            }
        }
        let b0 = bias.map_or(0.0, |b| b[o].as_f64());
        for oh in 0..nh {
            for ow in 0..nw {
                let a = oh * lay.sh + ow * lay.sw;
                let d = (oh * nw + ow) * nb;
                for (dst, &v) in out[d..d + nb].iter_mut().zip(&acc[a..a + nb]) {
                    *dst = T::of_f64(v + b0);
                }
            }
        }
    });
}

fn scatter_unit_stride<T: Scalar>(
    narrow: &[T],
    wide: &mut [T],
    ci: usize,
    co: usize,
    g: Geometry,
    w: WeightView<'_, T>,
    bias: Option<&[T]>,
) {
    let lay = PaddedLayout::new(&g);
    let wide_vol = g.wide.iter().product::<usize>();
    let narrow_vol = g.narrow.iter().product::<usize>();
    let batch = narrow.len() / (co * narrow_vol);
    let spread: Vec<Vec<f64>> = (0..batch * co)
        .into_par_iter()
        .map(|slab| lay.spread_narrow(&g, &narrow[slab * narrow_vol..(slab + 1) * narrow_vol]))
        .collect();
    let [kh, kw, kb] = g.k;
    let [h, ww, wb] = g.wide;
    let taps = kh * kw * kb;
    let offsets: Vec<usize> = (0..taps).map(|t| lay.tap_offset(t / (kw * kb), (t / kb) % kw, t % kb)).collect();
    wide.par_chunks_mut(wide_vol).enumerate().for_each(|(slab, out)| {
        let n = slab / ci;
        let i = slab % ci;
        let mut acc = vec![0.0f64; lay.volume()];
        let wts: Vec<f64> = (0..co * taps).map(|ot| w.at(ot / taps, i, ot % taps)).collect();
        for start in (0..lay.run).step_by(TILE) {
            let end = (start + TILE).min(lay.run);
            for o in 0..co {
                let src = &spread[n * co + o][start..end];
                for (t, &off) in offsets.iter().enumerate() {
                    let wv = wts[o * taps + t];
                    if wv != 0.0 {
                        axpy(&mut acc[off + start..off + end], src, wv);
                    }
                }
            }
        }
        let b0 = bias.map_or(0.0, |b| b[i].as_f64());
        for ih in 0..h {
            for iw in 0..ww {
                let a = (ih + g.pad[0]) * lay.sh + (iw + g.pad[1]) * lay.sw + g.pad[2];
                let d = (ih * ww + iw) * wb;
                for (dst, &v) in out[d..d + wb].iter_mut().zip(&acc[a..a + wb]) {
                    *dst = T::of_f64(v + b0);
                }
            }
        }
    });
}

fn weight_correlation_unit_stride<T: Scalar>(
    wide: &[T],
    narrow: &[T],
    batch: usize,
    ci: usize,
    co: usize,
    g: Geometry,
) -> Vec<f64> {
    let lay = PaddedLayout::new(&g);
    let wide_vol = g.wide.iter().product::<usize>();
    let narrow_vol = g.narrow.iter().product::<usize>();
    let padded: Vec<Vec<f64>> = (0..batch * ci)
        .into_par_iter()
        .map(|slab| lay.pad_wide(&g, &wide[slab * wide_vol..(slab + 1) * wide_vol]))
        .collect();
    let spread: Vec<Vec<f64>> = (0..batch * co)
        .into_par_iter()
        .map(|slab| lay.spread_narrow(&g, &narrow[slab * narrow_vol..(slab + 1) * narrow_vol]))
        .collect();
    let [kh, kw, kb] = g.k;
    let taps = kh * kw * kb;
    let offsets: Vec<usize> = (0..taps).map(|t| lay.tap_offset(t / (kw * kb), (t / kb) % kw, t % kb)).collect();
    let mut grads = vec![0.0f64; co * ci * taps];
    grads.par_chunks_mut(taps).enumerate().for_each(|(pair, out)| {
        let o = pair / ci;
        let i = pair % ci;
        for n in 0..batch {
            let gy = &spread[n * co + o];
            let x = &padded[n * ci + i];
            for start in (0..lay.run).step_by(TILE) {
                let end = (start + TILE).min(lay.run);
                for (t, &off) in offsets.iter().enumerate() {
                    out[t] += dot(&gy[start..end], &x[off + start..off + end]);
                }
            }
        }
    });
    grads
}

/// narrow[n, o] = Σ_i Σ_tap w(o, i, tap) · wide[n, i, window(tap)]
fn gather<T: Scalar>(
    wide: &[T],
    narrow: &mut [T],
    ci: usize,
    co: usize,
    g: Geometry,
    w: WeightView<'_, T>,
    bias: Option<&[T]>,
) {
    if is_unit_stride(&g) {
        return gather_unit_stride(wide, narrow, ci, co, g, w, bias);
    }
    let wide_vol = g.wide.iter().product::<usize>();
    let narrow_vol = g.narrow.iter().product::<usize>();
    let [_, ww, wb] = g.wide;
    let [_, nw, nb] = g.narrow;
    let [kh, kw, kb] = g.k;
    let taps = kh * kw * kb;
    narrow.par_chunks_mut(narrow_vol).enumerate().for_each(|(slab, out)| {
        let n = slab / co;
        let o = slab % co;
        let b0 = bias.map_or(0.0, |b| b[o].as_f64());
        let mut acc = vec![b0; narrow_vol];
        for i in 0..ci {
            let src = &wide[(n * ci + i) * wide_vol..(n * ci + i + 1) * wide_vol];
            for th in 0..kh {
                let (h_lo, h_hi) = g.valid(0, th);
                for tw in 0..kw {
                    let (w_lo, w_hi) = g.valid(1, tw);
                    for tb in 0..kb {
                        let (b_lo, b_hi) = g.valid(2, tb);
                        if b_lo >= b_hi {
                            continue;
                        }
                        let tap = (th * kw + tw) * kb + tb;
                        debug_assert!(tap < taps);
                        let wv = w.at(o, i, tap);
                        if wv == 0.0 {
                            continue;
                        }
                        let b_off = tb as isize - g.pad[2] as isize;
                        for ph in h_lo..h_hi {
                            let ih = g.wide_index(0, ph, th);
                            for pw in w_lo..w_hi {
                                let iw = g.wide_index(1, pw, tw);
                                let row = &mut acc[(ph * nw + pw) * nb..(ph * nw + pw + 1) * nb];
                                let src_row = &src[(ih * ww + iw) * wb..(ih * ww + iw + 1) * wb];
                                // b_off may be negative; shift the window start instead.
                                if b_off >= 0 {
                                    axpy_strided(row, src_row, wv, b_lo, b_hi, g.stride[2], b_off as usize);
                                } else {
                                    let s = g.stride[2];
                                    #[allow(clippy::needless_range_loop)]
                                    for pb in b_lo..b_hi {
                                        let ib = (pb * s) as isize + b_off;
                                        row[pb] += wv * src_row[ib as usize].as_f64();
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        for (dst, a) in out.iter_mut().zip(acc) {
            *dst = T::of_f64(a);
        }
    });
}

/// wide[n, i] = Σ_o Σ_tap w(o, i, tap) · narrow[n, o] scattered through window(tap)
#[allow(clippy::too_many_arguments)]
fn scatter<T: Scalar>(
    narrow: &[T],
    wide: &mut [T],
    batch: usize,
    ci: usize,
    co: usize,
    g: Geometry,
    w: WeightView<'_, T>,
    bias: Option<&[T]>,
) {
    if is_unit_stride(&g) {
        return scatter_unit_stride(narrow, wide, ci, co, g, w, bias);
    }
    let wide_vol = g.wide.iter().product::<usize>();
    let narrow_vol = g.narrow.iter().product::<usize>();
    let [_, ww, wb] = g.wide;
    let [_, nw, nb] = g.narrow;
    let [kh, kw, kb] = g.k;
    debug_assert_eq!(wide.len(), batch * ci * wide_vol);
    wide.par_chunks_mut(wide_vol).enumerate().for_each(|(slab, out)| {
        let n = slab / ci;
        let i = slab % ci;
        let b0 = bias.map_or(0.0, |b| b[i].as_f64());
        let mut acc = vec![b0; wide_vol];
        for o in 0..co {
            let src = &narrow[(n * co + o) * narrow_vol..(n * co + o + 1) * narrow_vol];
            for th in 0..kh {
                let (h_lo, h_hi) = g.valid(0, th);
                for tw in 0..kw {
                    let (w_lo, w_hi) = g.valid(1, tw);
                    for tb in 0..kb {
                        let (b_lo, b_hi) = g.valid(2, tb);
                        if b_lo >= b_hi {
                            continue;
                        }
                        let wv = w.at(o, i, (th * kw + tw) * kb + tb);
                        if wv == 0.0 {
                            continue;
                        }
                        let s = g.stride[2];
                        for ph in h_lo..h_hi {
                            let ih = g.wide_index(0, ph, th);
                            for pw in w_lo..w_hi {
                                let iw = g.wide_index(1, pw, tw);
                                let src_row = &src[(ph * nw + pw) * nb..(ph * nw + pw + 1) * nb];
                                let row = &mut acc[(ih * ww + iw) * wb..(ih * ww + iw + 1) * wb];
                                if s == 1 {
                                    let start = b_lo + tb - g.pad[2];
                                    let dst = &mut row[start..start + (b_hi - b_lo)];
                                    for (d, &x) in dst.iter_mut().zip(&src_row[b_lo..b_hi]) {
                                        *d += wv * x.as_f64();
                                    }
                                } else {
                                    for pb in b_lo..b_hi {
                                        row[g.wide_index(2, pb, tb)] += wv * src_row[pb].as_f64();
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        for (dst, a) in out.iter_mut().zip(acc) {
            *dst = T::of_f64(a);
        }
    });
}

/// Correlation of wide and narrow tensors per (o, i, tap), returned in
/// `(co, ci, taps)` layout, plus the per-`o` sum of `narrow`.
fn weight_correlation<T: Scalar>(
    wide: &[T],
    narrow: &[T],
    batch: usize,
    ci: usize,
    co: usize,
    g: Geometry,
) -> (Vec<f64>, Vec<f64>) {
    let wide_vol = g.wide.iter().product::<usize>();
    let narrow_vol = g.narrow.iter().product::<usize>();
    let [_, ww, wb] = g.wide;
    let [_, nw, nb] = g.narrow;
    let [kh, kw, kb] = g.k;
    let taps = kh * kw * kb;
    let s = g.stride[2];
    let bias = bias_sums(narrow, batch, co, narrow_vol);
    if is_unit_stride(&g) {
        return (weight_correlation_unit_stride(wide, narrow, batch, ci, co, g), bias);
    }
    let mut grads = vec![0.0f64; co * ci * taps];
    grads.par_chunks_mut(taps).enumerate().for_each(|(pair, out)| {
        let o = pair / ci;
        let i = pair % ci;
        for n in 0..batch {
            let nar = &narrow[(n * co + o) * narrow_vol..(n * co + o + 1) * narrow_vol];
            let wid = &wide[(n * ci + i) * wide_vol..(n * ci + i + 1) * wide_vol];
            for th in 0..kh {
                let (h_lo, h_hi) = g.valid(0, th);
                for tw in 0..kw {
                    let (w_lo, w_hi) = g.valid(1, tw);
                    for tb in 0..kb {
                        let (b_lo, b_hi) = g.valid(2, tb);
                        if b_lo >= b_hi {
                            continue;
                        }
                        let mut sum = 0.0f64;
                        for ph in h_lo..h_hi {
                            let ih = g.wide_index(0, ph, th);
                            for pw in w_lo..w_hi {
                                let iw = g.wide_index(1, pw, tw);
                                let nrow = &nar[(ph * nw + pw) * nb..(ph * nw + pw + 1) * nb];
                                let wrow = &wid[(ih * ww + iw) * wb..(ih * ww + iw + 1) * wb];
                                if s == 1 {
                                    let start = b_lo + tb - g.pad[2];
                                    let wseg = &wrow[start..start + (b_hi - b_lo)];
                                    for (&a, &b) in nrow[b_lo..b_hi].iter().zip(wseg) {
                                        sum += a.as_f64() * b.as_f64();
                                    }
                                } else {
                                    for pb in b_lo..b_hi {
                                        sum += nrow[pb].as_f64() * wrow[g.wide_index(2, pb, tb)].as_f64();
                                    }
                                }
                            }
                        }
                        out[(th * kw + tw) * kb + tb] += sum;
                    }
                }
            }
        }
    });
    (grads, bias)
}

fn bias_sums<T: Scalar>(narrow: &[T], batch: usize, co: usize, narrow_vol: usize) -> Vec<f64> {
    let mut bias = vec![0.0f64; co];
    for n in 0..batch {
        for (o, b) in bias.iter_mut().enumerate() {
            *b += narrow[(n * co + o) * narrow_vol..(n * co + o + 1) * narrow_vol]
                .iter()
                .map(|v| v.as_f64())
                .sum::<f64>();
        }
    }
    bias
}

fn check_kernel_oddness(k: &KernelShape) -> Result<()> {
    if k.kh.is_multiple_of(2) || k.kw.is_multiple_of(2) || k.kb.is_multiple_of(2) {
        return config_err(format!("kernel extents must be odd, got {:?}", k.extent()));
    }
    Ok(())
}

fn conv_geometry<T: Scalar>(
    input: &FeatureTensor<T>,
    kernel: &ConvKernel<T>,
    spec: &ConvSpec,
) -> Result<Geometry> {
    check_kernel_oddness(&kernel.shape)?;
    if input.shape().channels != kernel.shape.cin {
        return dim_err(format!(
            "input has {} channels but kernel expects {}",
            input.shape().channels,
            kernel.shape.cin
        ));
    }
    let k = kernel.shape.extent();
    let narrow = spec.conv_output(input.shape().spatial(), k)?;
    Ok(Geometry { wide: input.shape().spatial(), narrow, k, stride: spec.stride, pad: spec.padding })
}

fn plain_view<T>(kernel: &ConvKernel<T>) -> WeightView<'_, T> {
    let taps = kernel.shape.taps();
    WeightView { weights: &kernel.weights, so: kernel.shape.cin * taps, si: taps }
}

/// Transposed kernels are stored `(cout, cin)` in their own terms; as a
/// scatter the narrow side is `cin` and the wide side is `cout`.
fn transposed_view<T>(kernel: &ConvKernel<T>) -> WeightView<'_, T> {
    let taps = kernel.shape.taps();
    WeightView { weights: &kernel.weights, so: taps, si: kernel.shape.cin * taps }
}

/// Cross-correlation with zero padding plus per-channel bias.
pub fn conv3d_forward<T: Scalar>(
    input: &FeatureTensor<T>,
    kernel: &ConvKernel<T>,
    spec: &ConvSpec,
) -> Result<FeatureTensor<T>> {
    let g = conv_geometry(input, kernel, spec)?;
    let s = input.shape();
    let out_shape = s.with_channels(kernel.shape.cout).with_spatial(g.narrow);
    let mut out = FeatureTensor::zeros(out_shape);
    gather(
        input.data(),
        out.data_mut(),
        kernel.shape.cin,
        kernel.shape.cout,
        g,
        plain_view(kernel),
        Some(&kernel.bias),
    );
    Ok(out)
}

/// Input and kernel gradients of [`conv3d_forward`].
pub fn conv3d_backward<T: Scalar>(
    input: &FeatureTensor<T>,
    kernel: &ConvKernel<T>,
    spec: &ConvSpec,
    grad_out: &FeatureTensor<T>,
) -> Result<ConvGrads<T>> {
    let g = conv_geometry(input, kernel, spec)?;
    let s = input.shape();
    let expected = s.with_channels(kernel.shape.cout).with_spatial(g.narrow);
    if grad_out.shape() != expected {
        return dim_err(format!("grad_out shape {} but forward output is {expected}", grad_out.shape()));
    }
    let (ci, co) = (kernel.shape.cin, kernel.shape.cout);
    let mut grad_input = FeatureTensor::zeros(s);
    scatter(grad_out.data(), grad_input.data_mut(), s.batch, ci, co, g, plain_view(kernel), None);
    let (gw, gb) = weight_correlation(input.data(), grad_out.data(), s.batch, ci, co, g);
    let grad_kernel = ConvKernel {
        shape: kernel.shape,
        weights: gw.into_iter().map(T::of_f64).collect(),
        bias: gb.into_iter().map(T::of_f64).collect(),
    };
    Ok(ConvGrads { grad_input, grad_kernel })
}

fn tconv_geometry<T: Scalar>(
    input: &FeatureTensor<T>,
    kernel: &ConvKernel<T>,
    spec: &ConvSpec,
    output_padding: [usize; 3],
) -> Result<Geometry> {
    check_kernel_oddness(&kernel.shape)?;
    if input.shape().channels != kernel.shape.cin {
        return dim_err(format!(
            "input has {} channels but kernel expects {}",
            input.shape().channels,
            kernel.shape.cin
        ));
    }
    let k = kernel.shape.extent();
    let wide = spec.tconv_output(input.shape().spatial(), k, output_padding)?;
    debug_assert_eq!(spec.conv_output(wide, k).ok(), Some(input.shape().spatial()));
    Ok(Geometry { wide, narrow: input.shape().spatial(), k, stride: spec.stride, pad: spec.padding })
}

/// Transposed convolution: the adjoint of the strided [`conv3d_forward`]
/// whose kernel is `kernel.transpose_channels()`, plus bias. With stride `s`
/// and `output_padding = s - 1` the spatial extents grow by exactly `s`.
pub fn tconv3d_forward<T: Scalar>(
    input: &FeatureTensor<T>,
    kernel: &ConvKernel<T>,
    spec: &ConvSpec,
    output_padding: [usize; 3],
) -> Result<FeatureTensor<T>> {
    let g = tconv_geometry(input, kernel, spec, output_padding)?;
    let s = input.shape();
    let out_shape = s.with_channels(kernel.shape.cout).with_spatial(g.wide);
    let mut out = FeatureTensor::zeros(out_shape);
    scatter(
        input.data(),
        out.data_mut(),
        s.batch,
        kernel.shape.cout,
        kernel.shape.cin,
        g,
        transposed_view(kernel),
        Some(&kernel.bias),
    );
    Ok(out)
}

pub fn tconv3d_backward<T: Scalar>(
    input: &FeatureTensor<T>,
    kernel: &ConvKernel<T>,
    spec: &ConvSpec,
    output_padding: [usize; 3],
    grad_out: &FeatureTensor<T>,
) -> Result<ConvGrads<T>> {
    let g = tconv_geometry(input, kernel, spec, output_padding)?;
    let s = input.shape();
    let expected = s.with_channels(kernel.shape.cout).with_spatial(g.wide);
    if grad_out.shape() != expected {
        return dim_err(format!("grad_out shape {} but forward output is {expected}", grad_out.shape()));
    }
    let (wide_c, narrow_c) = (kernel.shape.cout, kernel.shape.cin);
    let mut grad_input = FeatureTensor::zeros(s);
    gather(
        grad_out.data(),
        grad_input.data_mut(),
        wide_c,
        narrow_c,
        g,
        transposed_view(kernel),
        None,
    );
    // (narrow_c, wide_c, taps) → stored (cout=wide_c, cin=narrow_c, taps)
    let (gw, _) = weight_correlation(grad_out.data(), input.data(), s.batch, wide_c, narrow_c, g);
    let taps = kernel.shape.taps();
    let mut weights = vec![T::zero(); kernel.weights.len()];
    for b in 0..narrow_c {
        for a in 0..wide_c {
            for t in 0..taps {
                weights[(a * narrow_c + b) * taps + t] = T::of_f64(gw[(b * wide_c + a) * taps + t]);
            }
        }
    }
    let out_vol = g.wide.iter().product::<usize>();
    let mut bias = vec![0.0f64; wide_c];
    for n in 0..s.batch {
        for (a, acc) in bias.iter_mut().enumerate() {
            let start = (n * wide_c + a) * out_vol;
            *acc += grad_out.data()[start..start + out_vol].iter().map(|v| v.as_f64()).sum::<f64>();
        }
    }
    let grad_kernel = ConvKernel {
        shape: kernel.shape,
        weights,
        bias: bias.into_iter().map(T::of_f64).collect(),
    };
    Ok(ConvGrads { grad_input, grad_kernel })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Sigmoid,
}

pub fn activate<T: Scalar>(input: &FeatureTensor<T>, kind: Activation) -> FeatureTensor<T> {
    match kind {
        Activation::Tanh => input.map(|v| v.tanh()),
        Activation::Sigmoid => input.map(|v| T::one() / (T::one() + (-v).exp())),
    }
}

/// Upstream gradient times the activation derivative, expressed through the
/// activation's own output `y`.
pub fn activate_grad<T: Scalar>(
    output: &FeatureTensor<T>,
    grad: &FeatureTensor<T>,
    kind: Activation,
) -> Result<FeatureTensor<T>> {
    output.ensure_shape(grad, "activate_grad")?;
    let d = output
        .data()
        .iter()
        .zip(grad.data())
        .map(|(&y, &g)| match kind {
            Activation::Tanh => g * (T::one() - y * y),
            Activation::Sigmoid => g * y * (T::one() - y),
        })
        .collect();
    FeatureTensor::from_vec(output.shape(), d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(shape: Shape, rng: &mut ChaCha8Rng) -> FeatureTensor<f64> {
        FeatureTensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    fn random_kernel(shape: KernelShape, rng: &mut ChaCha8Rng) -> ConvKernel<f64> {
        ConvKernel {
            shape,
            weights: (0..shape.weight_count()).map(|_| rng.random_range(-1.0..1.0)).collect(),
            bias: (0..shape.cout).map(|_| rng.random_range(-1.0..1.0)).collect(),
        }
    }

    /// Direct six-nested-loop reference.
    fn naive_conv(x: &FeatureTensor<f64>, k: &ConvKernel<f64>, spec: &ConvSpec) -> FeatureTensor<f64> {
        let s = x.shape();
        let ks = k.shape;
        let out_ext = spec.conv_output(s.spatial(), ks.extent()).unwrap();
        let os = s.with_channels(ks.cout).with_spatial(out_ext);
        let mut y = FeatureTensor::zeros(os);
        for n in 0..s.batch {
            for o in 0..ks.cout {
                for oh in 0..out_ext[0] {
                    for ow in 0..out_ext[1] {
                        for ob in 0..out_ext[2] {
                            let mut acc = k.bias[o];
                            for i in 0..ks.cin {
                                for th in 0..ks.kh {
                                    for tw in 0..ks.kw {
                                        for tb in 0..ks.kb {
                                            let ih = (oh * spec.stride[0] + th) as isize - spec.padding[0] as isize;
                                            let iw = (ow * spec.stride[1] + tw) as isize - spec.padding[1] as isize;
                                            let ib = (ob * spec.stride[2] + tb) as isize - spec.padding[2] as isize;
                                            if ih < 0 || iw < 0 || ib < 0 || ih >= s.height as isize || iw >= s.width as isize || ib >= s.bands as isize {
                                                continue;
                                            }
                                            let wi = (((o * ks.cin + i) * ks.kh + th) * ks.kw + tw) * ks.kb + tb;
                                            acc += k.weights[wi] * x.get(n, i, ih as usize, iw as usize, ib as usize);
                                        }
                                    }
                                }
                            }
                            y.set(n, o, oh, ow, ob, acc);
                        }
                    }
                }
            }
        }
        y
    }

    #[test]
    fn delta_kernel_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_tensor(Shape::new(1, 1, 5, 5, 5), &mut rng);
        let k = ConvKernel::<f64>::delta(1, [3, 3, 3]);
        let y = conv3d_forward(&x, &k, &ConvSpec::same([3, 3, 3])).unwrap();
        assert!(y.max_abs_diff(&x).unwrap() < 1e-12);
        let t = tconv3d_forward(&x, &k, &ConvSpec::same([3, 3, 3]), [0, 0, 0]).unwrap();
        assert!(t.max_abs_diff(&x).unwrap() < 1e-12);
    }

    #[test]
    fn ones_kernel_interior_and_corner() {
        let x = FeatureTensor::<f32>::filled(Shape::new(1, 1, 5, 5, 5), 1.0);
        let k = ConvKernel::new(KernelShape::new(1, 1, 3, 3, 3), vec![1.0; 27], vec![0.0]).unwrap();
        let y = conv3d_forward(&x, &k, &ConvSpec::same([3, 3, 3])).unwrap();
        assert_eq!(y.get(0, 0, 2, 2, 2), 27.0);
        assert_eq!(y.get(0, 0, 0, 0, 0), 8.0);
        assert_eq!(y.get(0, 0, 4, 4, 4), 8.0);
        assert_eq!(y.get(0, 0, 0, 2, 2), 18.0);
    }

    #[test]
    fn strided_output_extents() {
        let x = FeatureTensor::<f32>::zeros(Shape::new(1, 1, 4, 4, 3));
        let k = ConvKernel::zeros(KernelShape::new(2, 1, 3, 3, 3));
        let y = conv3d_forward(&x, &k, &ConvSpec::new([2, 2, 1], [1, 1, 1])).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 2, 2, 2, 3));
    }

    #[test]
    fn matches_naive_loops_including_strides() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for (spec, ext) in [
            (ConvSpec::same([3, 3, 3]), [5, 6, 4]),
            (ConvSpec::spatial_down2([3, 3, 3]), [6, 5, 4]),
            (ConvSpec::new([2, 1, 2], [1, 0, 1]), [7, 5, 5]),
            (ConvSpec::new([1, 1, 1], [0, 0, 0]), [4, 4, 4]),
        ] {
            let x = random_tensor(Shape::new(2, 2, ext[0], ext[1], ext[2]), &mut rng);
            let k = random_kernel(KernelShape::new(3, 2, 3, 3, 3), &mut rng);
            let fast = conv3d_forward(&x, &k, &spec).unwrap();
            let slow = naive_conv(&x, &k, &spec);
            assert!(fast.max_abs_diff(&slow).unwrap() < 1e-10, "{spec:?}");
        }
    }

    #[test]
    fn rejects_channel_mismatch_and_empty_output() {
        let x = FeatureTensor::<f32>::zeros(Shape::new(1, 2, 4, 4, 3));
        let k = ConvKernel::zeros(KernelShape::new(1, 1, 3, 3, 3));
        assert!(matches!(
            conv3d_forward(&x, &k, &ConvSpec::same([3, 3, 3])),
            Err(crate::Error::Dimension(_))
        ));
        let x = FeatureTensor::<f32>::zeros(Shape::new(1, 1, 1, 1, 1));
        assert!(matches!(
            conv3d_forward(&x, &k, &ConvSpec::new([1, 1, 1], [0, 0, 0])),
            Err(crate::Error::Config(_))
        ));
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_tensor(Shape::new(1, 2, 4, 4, 3), &mut rng);
        let k = random_kernel(KernelShape::new(3, 2, 3, 3, 3), &mut rng);
        let spec = ConvSpec::same([3, 3, 3]);
        let gy = FeatureTensor::zeros(Shape::new(1, 3, 4, 4, 3));
        let g = conv3d_backward(&x, &k, &spec, &gy).unwrap();
        assert!(g.grad_input.data().iter().all(|&v| v == 0.0));
        assert!(g.grad_kernel.weights.iter().chain(&g.grad_kernel.bias).all(|&v| v == 0.0));
    }

    #[test]
    fn tconv_doubles_spatial_extents() {
        let x = FeatureTensor::<f32>::zeros(Shape::new(1, 1, 2, 2, 3));
        let k = ConvKernel::zeros(KernelShape::new(4, 1, 3, 3, 3));
        let y = tconv3d_forward(&x, &k, &ConvSpec::spatial_down2([3, 3, 3]), [1, 1, 0]).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 4, 4, 4, 3));
    }

    #[test]
    fn activations_at_zero_and_symmetry() {
        let x = FeatureTensor::<f32>::from_vec(Shape::new(1, 1, 1, 1, 3), vec![0.0, 2.0, -3.5]).unwrap();
        let t = activate(&x, Activation::Tanh);
        let s = activate(&x, Activation::Sigmoid);
        assert_eq!(t.data()[0], 0.0);
        assert_eq!(s.data()[0], 0.5);
        let s_neg = activate(&x.scale(-1.0), Activation::Sigmoid);
        for (a, b) in s.data().iter().zip(s_neg.data()) {
            assert!((a + b - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn activation_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random_tensor(Shape::new(1, 1, 2, 3, 4), &mut rng).scale(2.0);
        let up = random_tensor(x.shape(), &mut rng);
        for kind in [Activation::Tanh, Activation::Sigmoid] {
            let y = activate(&x, kind);
            let g = activate_grad(&y, &up, kind).unwrap();
            let eps = 1e-4;
            for idx in 0..x.len() {
                let mut xp = x.clone();
                xp.data_mut()[idx] += eps;
                let mut xm = x.clone();
                xm.data_mut()[idx] -= eps;
                let fd = (activate(&xp, kind).dot(&up).unwrap() - activate(&xm, kind).dot(&up).unwrap())
                    / (2.0 * eps);
                assert!((fd - g.data()[idx]).abs() < 1e-4, "{kind:?} idx {idx}");
            }
        }
    }
}
