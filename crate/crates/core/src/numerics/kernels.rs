//! Forward and adjoint kernels over raw row-major slices.
//!
//! The tape in [`super::tape`] records which kernel produced a node and calls
//! the matching adjoint during the reverse sweep. The kernels are also used
//! directly where no gradient is needed.

use super::Scalar;

/// Dot product with eight independent accumulators so the reduction vectorizes.
#[inline]
pub fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [S::zero(); 8];
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = S::zero();
    for (&x, &y) in ca.remainder().iter().zip(cb.remainder()) {
        tail += x * y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// Geometry of a 1-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv1dDims {
    pub c_in: usize,
    pub c_out: usize,
    pub len_in: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv1dDims {
    pub fn len_out(&self) -> usize {
        (self.len_in + 2 * self.pad - self.kernel) / self.stride + 1
    }

    /// Output positions `t` whose tap `k` reads an in-range input sample.
    fn valid_range(&self, k: usize) -> (usize, usize) {
        let t_out = self.len_out();
        // src = t*stride + k - pad must lie in [0, len_in)
        let lo = if k >= self.pad { 0 } else { (self.pad - k).div_ceil(self.stride) };
        let hi_excl = {
            let limit = self.len_in + self.pad; // src < len_in  <=>  t*stride + k < len_in + pad
            if k >= limit {
                0
            } else {
                ((limit - k - 1) / self.stride + 1).min(t_out)
            }
        };
        (lo, hi_excl.max(lo))
    }
}

impl Conv1dDims {
    /// Kernel 1, stride 1, no padding: a plain matrix product.
    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }
}

pub fn conv1d_forward<S: Scalar>(d: &Conv1dDims, x: &[S], w: &[S], b: &[S], y: &mut [S]) {
    let t_out = d.len_out();
    if d.is_pointwise() {
        for o in 0..d.c_out {
            y[o * t_out..(o + 1) * t_out].iter_mut().for_each(|v| *v = b[o]);
        }
        gemm_acc(d.c_out, d.c_in, t_out, w, x, y);
        return;
    }
    for o in 0..d.c_out {
        let row = &mut y[o * t_out..(o + 1) * t_out];
        row.iter_mut().for_each(|v| *v = b[o]);
        for c in 0..d.c_in {
            let xr = &x[c * d.len_in..(c + 1) * d.len_in];
            for k in 0..d.kernel {
                let wv = w[(o * d.c_in + c) * d.kernel + k];
                let (lo, hi) = d.valid_range(k);
                if d.stride == 1 {
                    let off = lo + k - d.pad;
                    let src = &xr[off..off + (hi - lo)];
                    for (yv, &xv) in row[lo..hi].iter_mut().zip(src) {
                        *yv += wv * xv;
                    }
                } else {
                    for t in lo..hi {
                        row[t] += wv * xr[t * d.stride + k - d.pad];
                    }
                }
            }
        }
    }
}

pub fn conv1d_backward<S: Scalar>(
    d: &Conv1dDims,
    x: &[S],
    w: &[S],
    gy: &[S],
    gx: Option<&mut [S]>,
    gw: Option<&mut [S]>,
    gb: Option<&mut [S]>,
) {
    let t_out = d.len_out();
    if let Some(gb) = gb {
        for o in 0..d.c_out {
            gb[o] += gy[o * t_out..(o + 1) * t_out].iter().copied().sum::<S>();
        }
    }
    if d.is_pointwise() {
        if let Some(gw) = gw {
            gemm_acc(d.c_out, t_out, d.c_in, gy, &transposed(d.c_in, d.len_in, x), gw);
        }
        if let Some(gx) = gx {
            gemm_acc(d.c_in, d.c_out, t_out, &transposed(d.c_out, d.c_in, w), gy, gx);
        }
        return;
    }
    if let Some(gw) = gw {
        for o in 0..d.c_out {
            let gr = &gy[o * t_out..(o + 1) * t_out];
            for c in 0..d.c_in {
                let xr = &x[c * d.len_in..(c + 1) * d.len_in];
                for k in 0..d.kernel {
                    let (lo, hi) = d.valid_range(k);
                    let acc = if d.stride == 1 {
                        let off = lo + k - d.pad;
                        dot(&gr[lo..hi], &xr[off..off + (hi - lo)])
                    } else {
                        let mut acc = S::zero();
                        for t in lo..hi {
                            acc += gr[t] * xr[t * d.stride + k - d.pad];
                        }
                        acc
                    };
                    gw[(o * d.c_in + c) * d.kernel + k] += acc;
                }
            }
        }
    }
    if let Some(gx) = gx {
        for o in 0..d.c_out {
            let gr = &gy[o * t_out..(o + 1) * t_out];
            for c in 0..d.c_in {
                let gxr = &mut gx[c * d.len_in..(c + 1) * d.len_in];
                for k in 0..d.kernel {
                    let wv = w[(o * d.c_in + c) * d.kernel + k];
                    let (lo, hi) = d.valid_range(k);
                    if d.stride == 1 {
                        let off = lo + k - d.pad;
                        for (g, &gv) in gxr[off..off + (hi - lo)].iter_mut().zip(&gr[lo..hi]) {
                            *g += wv * gv;
                        }
                    } else {
                        for t in lo..hi {
                            gxr[t * d.stride + k - d.pad] += wv * gr[t];
                        }
                    }
                }
            }
        }
    }
}

/// Geometry of a 2-D convolution with a square kernel.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dDims {
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2dDims {
    pub fn h_out(&self) -> usize {
        (self.h + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn w_out(&self) -> usize {
        (self.w + 2 * self.pad - self.kernel) / self.stride + 1
    }

    fn rows(&self) -> Conv1dDims {
        Conv1dDims { c_in: 1, c_out: 1, len_in: self.h, kernel: self.kernel, stride: self.stride, pad: self.pad }
    }

    fn cols(&self) -> Conv1dDims {
        Conv1dDims { c_in: 1, c_out: 1, len_in: self.w, kernel: self.kernel, stride: self.stride, pad: self.pad }
    }
}

/// Unfolds `x: [Cin, H, W]` into `[Cin·K·K, Ho·Wo]` patch columns.
fn im2col<S: Scalar>(d: &Conv2dDims, x: &[S]) -> Vec<S> {
    let (ho, wo) = (d.h_out(), d.w_out());
    let (rows, cols) = (d.rows(), d.cols());
    let mut out = vec![S::zero(); d.c_in * d.kernel * d.kernel * ho * wo];
    for c in 0..d.c_in {
        let xp = &x[c * d.h * d.w..(c + 1) * d.h * d.w];
        for kh in 0..d.kernel {
            let (rlo, rhi) = rows.valid_range(kh);
            for kw in 0..d.kernel {
                let (clo, chi) = cols.valid_range(kw);
                let row = ((c * d.kernel + kh) * d.kernel + kw) * ho * wo;
                for r in rlo..rhi {
                    let sr = r * d.stride + kh - d.pad;
                    for q in clo..chi {
                        out[row + r * wo + q] = xp[sr * d.w + q * d.stride + kw - d.pad];
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`im2col`]: folds patch-column gradients back into `gx`.
fn col2im_acc<S: Scalar>(d: &Conv2dDims, gcols: &[S], gx: &mut [S]) {
    let (ho, wo) = (d.h_out(), d.w_out());
    let (rows, cols) = (d.rows(), d.cols());
    for c in 0..d.c_in {
        let gp = &mut gx[c * d.h * d.w..(c + 1) * d.h * d.w];
        for kh in 0..d.kernel {
            let (rlo, rhi) = rows.valid_range(kh);
            for kw in 0..d.kernel {
                let (clo, chi) = cols.valid_range(kw);
                let row = ((c * d.kernel + kh) * d.kernel + kw) * ho * wo;
                for r in rlo..rhi {
                    let sr = r * d.stride + kh - d.pad;
                    for q in clo..chi {
                        gp[sr * d.w + q * d.stride + kw - d.pad] += gcols[row + r * wo + q];
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward<S: Scalar>(d: &Conv2dDims, x: &[S], w: &[S], b: &[S], y: &mut [S]) {
    let n = d.h_out() * d.w_out();
    for o in 0..d.c_out {
        y[o * n..(o + 1) * n].iter_mut().for_each(|v| *v = b[o]);
    }
    let patch = d.c_in * d.kernel * d.kernel;
    gemm_acc(d.c_out, patch, n, w, &im2col(d, x), y);
}

pub fn conv2d_backward<S: Scalar>(
    d: &Conv2dDims,
    x: &[S],
    w: &[S],
    gy: &[S],
    gx: Option<&mut [S]>,
    gw: Option<&mut [S]>,
    gb: Option<&mut [S]>,
) {
    let n = d.h_out() * d.w_out();
    let patch = d.c_in * d.kernel * d.kernel;
    if let Some(gb) = gb {
        for o in 0..d.c_out {
            gb[o] += gy[o * n..(o + 1) * n].iter().copied().sum::<S>();
        }
    }
    if let Some(gw) = gw {
        let cols_t = transposed(patch, n, &im2col(d, x));
        gemm_acc(d.c_out, n, patch, gy, &cols_t, gw);
    }
    if let Some(gx) = gx {
        let mut gcols = vec![S::zero(); patch * n];
        gemm_acc(patch, d.c_out, n, &transposed(d.c_out, patch, w), gy, &mut gcols);
        col2im_acc(d, &gcols, gx);
    }
}

/// `c[m×n] += a[m×k] · b[k×n]`, blocked over columns and depth for cache
/// reuse, four output rows at a time.
pub fn gemm_acc<S: Scalar>(m: usize, k: usize, n: usize, a: &[S], b: &[S], c: &mut [S]) {
    const NB: usize = 128;
    const KB: usize = 128;
    for j0 in (0..n).step_by(NB) {
        let j1 = (j0 + NB).min(n);
        let w = j1 - j0;
        for p0 in (0..k).step_by(KB) {
            let p1 = (p0 + KB).min(k);
            let mut i = 0;
            while i + 4 <= m {
                let block = &mut c[i * n..(i + 4) * n];
                let (r0, rest) = block.split_at_mut(n);
                let (r1, rest) = rest.split_at_mut(n);
                let (r2, r3) = rest.split_at_mut(n);
                let (r0, r1, r2, r3) = (&mut r0[j0..j1], &mut r1[j0..j1], &mut r2[j0..j1], &mut r3[j0..j1]);
                for p in p0..p1 {
                    let br = &b[p * n + j0..p * n + j1];
                    let (a0, a1, a2, a3) = (a[i * k + p], a[(i + 1) * k + p], a[(i + 2) * k + p], a[(i + 3) * k + p]);
                    for j in 0..w {
                        let bv = br[j];
                        r0[j] += a0 * bv;
                        r1[j] += a1 * bv;
                        r2[j] += a2 * bv;
                        r3[j] += a3 * bv;
                    }
                }
                i += 4;
            }
            while i < m {
                let r = &mut c[i * n + j0..i * n + j1];
                for p in p0..p1 {
                    let av = a[i * k + p];
                    let br = &b[p * n + j0..p * n + j1];
                    for j in 0..w {
                        r[j] += av * br[j];
                    }
                }
                i += 1;
            }
        }
    }
}

fn transposed<S: Scalar>(rows: usize, cols: usize, x: &[S]) -> Vec<S> {
    let mut y = vec![S::zero(); rows * cols];
    transpose(rows, cols, x, &mut y);
    y
}

/// `c[m×n] = a[m×k] · b[k×n]`, overwriting `c`.
pub fn matmul<S: Scalar>(m: usize, k: usize, n: usize, a: &[S], b: &[S], c: &mut [S]) {
    c.iter_mut().for_each(|v| *v = S::zero());
    gemm_acc(m, k, n, a, b, c);
}

/// Accumulates `ga += gc · bᵀ` and `gb += aᵀ · gc`.
#[allow(clippy::too_many_arguments)]
pub fn matmul_backward<S: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[S],
    b: &[S],
    gc: &[S],
    ga: Option<&mut [S]>,
    gb: Option<&mut [S]>,
) {
    if let Some(ga) = ga {
        gemm_acc(m, n, k, gc, &transposed(k, n, b), ga);
    }
    if let Some(gb) = gb {
        gemm_acc(k, m, n, &transposed(m, k, a), gc, gb);
    }
}

pub fn transpose<S: Scalar>(rows: usize, cols: usize, x: &[S], y: &mut [S]) {
    const TILE: usize = 32;
    for r0 in (0..rows).step_by(TILE) {
        for c0 in (0..cols).step_by(TILE) {
            for r in r0..(r0 + TILE).min(rows) {
                for c in c0..(c0 + TILE).min(cols) {
                    y[c * rows + r] = x[r * cols + c];
                }
            }
        }
    }
}

/// `y += xᵀ` for `x: [rows, cols]`.
pub fn transpose_acc<S: Scalar>(rows: usize, cols: usize, x: &[S], y: &mut [S]) {
    const TILE: usize = 32;
    for r0 in (0..rows).step_by(TILE) {
        for c0 in (0..cols).step_by(TILE) {
            for r in r0..(r0 + TILE).min(rows) {
                for c in c0..(c0 + TILE).min(cols) {
                    y[c * rows + r] += x[r * cols + c];
                }
            }
        }
    }
}

/// Splits a shape around `axis` into (outer, axis length, inner) extents.
pub fn axis_extents(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub fn softmax<S: Scalar>(shape: &[usize], axis: usize, x: &[S], y: &mut [S]) {
    let (outer, n, inner) = axis_extents(shape, axis);
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| (o * n + k) * inner + i;
            let mut mx = S::neg_infinity();
            for k in 0..n {
                mx = mx.max(x[at(k)]);
            }
            let mut z = S::zero();
            for k in 0..n {
                let e = (x[at(k)] - mx).exp();
                y[at(k)] = e;
                z += e;
            }
            for k in 0..n {
                y[at(k)] /= z;
            }
        }
    }
}

pub fn softmax_backward<S: Scalar>(shape: &[usize], axis: usize, y: &[S], gy: &[S], gx: &mut [S]) {
    let (outer, n, inner) = axis_extents(shape, axis);
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| (o * n + k) * inner + i;
            let dot: S = (0..n).map(|k| gy[at(k)] * y[at(k)]).sum();
            for k in 0..n {
                gx[at(k)] += y[at(k)] * (gy[at(k)] - dot);
            }
        }
    }
}

/// Window-2 stride-2 max pooling over rows of length `len`; an odd tail
/// element is pooled alone. Returns the argmax source index of each output.
pub fn maxpool1d<S: Scalar>(rows: usize, len: usize, x: &[S], y: &mut [S]) -> Vec<usize> {
    let out_len = len.div_ceil(2);
    let mut arg = vec![0; rows * out_len];
    for r in 0..rows {
        for k in 0..out_len {
            let a = r * len + 2 * k;
            let mut best = a;
            if 2 * k + 1 < len && x[a + 1] > x[a] {
                best = a + 1;
            }
            y[r * out_len + k] = x[best];
            arg[r * out_len + k] = best;
        }
    }
    arg
}

/// Source taps `(i0, i1, frac)` for ×2 linear upsampling with half-pixel
/// centres and edge clamping.
pub fn upsample_taps(len: usize) -> Vec<(usize, usize, f64)> {
    (0..2 * len)
        .map(|u| {
            let s = ((u as f64 + 0.5) / 2.0 - 0.5).clamp(0.0, (len - 1) as f64);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(len - 1);
            (i0, i1, s - i0 as f64)
        })
        .collect()
}

pub fn upsample_linear1d<S: Scalar>(rows: usize, len: usize, x: &[S], y: &mut [S]) {
    let taps = upsample_taps(len);
    for r in 0..rows {
        let xr = &x[r * len..(r + 1) * len];
        for (u, &(i0, i1, f)) in taps.iter().enumerate() {
            let f = S::of(f);
            y[r * 2 * len + u] = (S::one() - f) * xr[i0] + f * xr[i1];
        }
    }
}

pub fn upsample_linear1d_backward<S: Scalar>(rows: usize, len: usize, gy: &[S], gx: &mut [S]) {
    let taps = upsample_taps(len);
    for r in 0..rows {
        for (u, &(i0, i1, f)) in taps.iter().enumerate() {
            let g = gy[r * 2 * len + u];
            let f = S::of(f);
            gx[r * len + i0] += (S::one() - f) * g;
            gx[r * len + i1] += f * g;
        }
    }
}

pub fn reverse_last<S: Scalar>(rows: usize, len: usize, x: &[S], y: &mut [S]) {
    for r in 0..rows {
        for t in 0..len {
            y[r * len + t] = x[r * len + len - 1 - t];
        }
    }
}

/// Per-axis-0 affine: `y[c, ..] = x[c, ..] * scale[c] + shift[c]`.
pub fn channel_affine<S: Scalar>(channels: usize, x: &[S], scale: &[S], shift: &[S], y: &mut [S]) {
    let per = x.len() / channels;
    for c in 0..channels {
        for k in c * per..(c + 1) * per {
            y[k] = x[k] * scale[c] + shift[c];
        }
    }
}

/// Sparse interpolation plan along the time axis.
///
/// Output position `p` with sample `s` reads `Σ weight · x[.., t]` over its taps.
#[derive(Clone, Debug)]
pub struct SamplePlan<S> {
    pub positions: usize,
    pub samples: usize,
    pub len_in: usize,
    /// CSR offsets into `taps`, length `positions * samples + 1`.
    pub offsets: Vec<usize>,
    pub taps: Vec<(usize, S)>,
}

impl<S: Scalar> SamplePlan<S> {
    /// Input `[C, len_in]` to output `[positions, C, samples]`.
    pub fn apply(&self, channels: usize, x: &[S], y: &mut [S]) {
        for p in 0..self.positions {
            for s in 0..self.samples {
                let q = p * self.samples + s;
                let taps = &self.taps[self.offsets[q]..self.offsets[q + 1]];
                for c in 0..channels {
                    let xr = &x[c * self.len_in..(c + 1) * self.len_in];
                    let mut acc = S::zero();
                    for &(t, wgt) in taps {
                        acc += wgt * xr[t];
                    }
                    y[(p * channels + c) * self.samples + s] = acc;
                }
            }
        }
    }

    pub fn apply_adjoint(&self, channels: usize, gy: &[S], gx: &mut [S]) {
        for p in 0..self.positions {
            for s in 0..self.samples {
                let q = p * self.samples + s;
                let taps = &self.taps[self.offsets[q]..self.offsets[q + 1]];
                for c in 0..channels {
                    let g = gy[(p * channels + c) * self.samples + s];
                    if g == S::zero() {
                        continue;
                    }
                    let gxr = &mut gx[c * self.len_in..(c + 1) * self.len_in];
                    for &(t, wgt) in taps {
                        gxr[t] += wgt * g;
                    }
                }
            }
        }
    }
}
