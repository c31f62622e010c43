//! im2col-based 2-D convolution kernels (cross-correlation, no kernel flip).
//!
//! Both directions share one geometry: a "large" map of `c` channels at `hb x wb`
//! that a `k x k` window with `stride`/`pad` reduces to a "small" `hs x ws` grid.
//! `conv2d` reads the large map and writes the small one; the transposed
//! convolution does the reverse, which is what makes the two exact adjoints.

use rayon::prelude::*;

use super::float::{gemm, Float};
use crate::error::{Error, Result};

/// Upper bound on im2col buffer elements; larger problems are processed in pixel chunks.
const MAX_COLS_ELEMS: usize = 1 << 22;

pub fn conv_out_extent(input: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if stride == 0 || padded < k {
        return None;
    }
    Some((padded - k) / stride + 1)
}

pub fn conv_transpose_out_extent(
    input: usize,
    k: usize,
    stride: usize,
    pad: usize,
    output_padding: usize,
) -> Option<usize> {
    if input == 0 {
        return None;
    }
    let full = (input - 1) * stride + k + output_padding;
    full.checked_sub(2 * pad).filter(|&v| v > 0)
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Geom {
    pub c: usize,
    pub hb: usize,
    pub wb: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub hs: usize,
    pub ws: usize,
}

impl Geom {
    fn rows(&self) -> usize {
        self.c * self.k * self.k
    }

    fn small(&self) -> usize {
        self.hs * self.ws
    }

    fn large(&self) -> usize {
        self.hb * self.wb
    }

    fn chunk(&self) -> usize {
        (MAX_COLS_ELEMS / self.rows().max(1)).clamp(1, self.small().max(1))
    }

    /// Output columns `ow` whose input column `ow * stride + kj - pad` is in bounds.
    fn col_range(&self, kj: usize) -> (usize, usize) {
        let s = self.stride;
        let lo = if kj >= self.pad { 0 } else { (self.pad - kj).div_ceil(s) };
        let lim = self.wb + self.pad;
        let hi = if lim > kj { ((lim - kj - 1) / s + 1).min(self.ws) } else { 0 };
        (lo.min(hi), hi)
    }

    /// Visits the output-row segments of pixels `p0..p1` for kernel tap `(ki, kj)`:
    /// `f(offset, ow0, ow1, input_row, valid_lo, valid_hi)`, where `input_row`
    /// is `None` when the row falls in the padding.
    fn segments(
        &self,
        p0: usize,
        p1: usize,
        ki: usize,
        range: (usize, usize),
        mut f: impl FnMut(usize, usize, usize, Option<usize>, usize, usize),
    ) {
        let mut p = p0;
        while p < p1 {
            let oh = p / self.ws;
            let ow0 = p % self.ws;
            let ow1 = (ow0 + (p1 - p)).min(self.ws);
            let ih = (oh * self.stride + ki) as isize - self.pad as isize;
            let row = (ih >= 0 && (ih as usize) < self.hb).then_some(ih as usize);
            let a = range.0.clamp(ow0, ow1);
            let b = range.1.clamp(a, ow1);
            f(p - p0, ow0, ow1, row, a, b);
            p += ow1 - ow0;
        }
    }

    /// Gathers windows for small-grid pixels `p0..p1` into `cols` (`rows x (p1-p0)`).
    fn im2col<T: Float>(&self, src: &[T], p0: usize, p1: usize, cols: &mut [T]) {
        let width = p1 - p0;
        let k = self.k;
        let (stride, pad, wb) = (self.stride, self.pad, self.wb);
        for c in 0..self.c {
            let plane = &src[c * self.large()..(c + 1) * self.large()];
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    let dst = &mut cols[row * width..(row + 1) * width];
                    self.segments(p0, p1, ki, self.col_range(kj), |off, ow0, ow1, ih, a, b| {
                        let seg = &mut dst[off..off + (ow1 - ow0)];
                        let Some(ih) = ih else {
                            seg.fill(T::zero());
                            return;
                        };
                        let srow = &plane[ih * wb..(ih + 1) * wb];
                        seg[..a - ow0].fill(T::zero());
                        seg[b - ow0..].fill(T::zero());
                        if a == b {
                            return;
                        }
                        let inner = &mut seg[a - ow0..b - ow0];
                        if stride == 1 {
                            let iw0 = a + kj - pad;
                            inner.copy_from_slice(&srow[iw0..iw0 + (b - a)]);
                        } else {
                            for (slot, ow) in inner.iter_mut().zip(a..b) {
                                *slot = srow[ow * stride + kj - pad];
                            }
                        }
                    });
                }
            }
        }
    }

    /// Scatter-adds `cols` for small-grid pixels `p0..p1` back onto the large map.
    fn col2im_add<T: Float>(&self, cols: &[T], p0: usize, p1: usize, dst: &mut [T]) {
        let width = p1 - p0;
        let k = self.k;
        let large = self.large();
        let (stride, pad, wb) = (self.stride, self.pad, self.wb);
        for c in 0..self.c {
            let plane = &mut dst[c * large..(c + 1) * large];
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    let src = &cols[row * width..(row + 1) * width];
                    self.segments(p0, p1, ki, self.col_range(kj), |off, ow0, _, ih, a, b| {
                        let Some(ih) = ih.filter(|_| a < b) else { return };
                        let drow = &mut plane[ih * wb..(ih + 1) * wb];
                        let vals = &src[off + (a - ow0)..off + (b - ow0)];
                        if stride == 1 {
                            let iw0 = a + kj - pad;
                            for (d, &v) in drow[iw0..iw0 + (b - a)].iter_mut().zip(vals) {
                                *d = *d + v;
                            }
                        } else {
                            for (&v, ow) in vals.iter().zip(a..b) {
                                let d = &mut drow[ow * stride + kj - pad];
                                *d = *d + v;
                            }
                        }
                    });
                }
            }
        }
    }
}

/// Strided gemm into columns `p0..p0+width` of a row-major `m x ld` matrix.
#[allow(clippy::too_many_arguments)]
fn gemm_into_cols<T: Float>(
    m: usize,
    k: usize,
    width: usize,
    a: &[T],
    b: &[T],
    c: &mut [T],
    ld: usize,
    p0: usize,
) {
    assert!(a.len() >= m * k && b.len() >= k * width && c.len() >= (m - 1) * ld + p0 + width);
    // SAFETY: the assertion bounds every access of the strided view.
    unsafe {
        T::gemm_raw(
            m,
            k,
            width,
            T::one(),
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            width as isize,
            1,
            T::zero(),
            c.as_mut_ptr().add(p0),
            ld as isize,
            1,
        );
    }
}

pub(crate) struct ConvShapes {
    pub n: usize,
    pub geom: Geom,
    pub f: usize,
}

pub(crate) fn conv2d_shapes(
    x: &[usize],
    w: &[usize],
    b: Option<&[usize]>,
    stride: usize,
    pad: usize,
) -> Result<ConvShapes> {
    if x.len() != 4 || w.len() != 4 {
        return Err(Error::dim(format!(
            "conv2d expects 4-d input and weight, got {x:?} and {w:?}"
        )));
    }
    let (n, c, h, wd) = (x[0], x[1], x[2], x[3]);
    let (f, wc, k, k2) = (w[0], w[1], w[2], w[3]);
    if wc != c {
        return Err(Error::dim(format!(
            "conv2d: input has {c} channels but weight expects {wc}"
        )));
    }
    if k != k2 {
        return Err(Error::dim(format!("conv2d: non-square kernel {k}x{k2}")));
    }
    if let Some(b) = b {
        if b != [f] {
            return Err(Error::dim(format!("conv2d: bias shape {b:?}, expected [{f}]")));
        }
    }
    let hs = conv_out_extent(h, k, stride, pad);
    let ws = conv_out_extent(wd, k, stride, pad);
    match (hs, ws) {
        (Some(hs), Some(ws)) if hs > 0 && ws > 0 => Ok(ConvShapes {
            n,
            f,
            geom: Geom {
                c,
                hb: h,
                wb: wd,
                k,
                stride,
                pad,
                hs,
                ws,
            },
        }),
        _ => Err(Error::dim(format!(
            "conv2d: input {h}x{wd} too small for kernel {k} stride {stride} pad {pad}"
        ))),
    }
}

pub(crate) fn conv_transpose2d_shapes(
    x: &[usize],
    w: &[usize],
    b: Option<&[usize]>,
    stride: usize,
    pad: usize,
    output_padding: usize,
) -> Result<ConvShapes> {
    if x.len() != 4 || w.len() != 4 {
        return Err(Error::dim(format!(
            "conv_transpose2d expects 4-d input and weight, got {x:?} and {w:?}"
        )));
    }
    if stride == 0 {
        return Err(Error::dim("conv_transpose2d: stride must be at least 1"));
    }
    if output_padding >= stride {
        return Err(Error::dim(format!(
            "conv_transpose2d: output_padding {output_padding} must be smaller than stride {stride}"
        )));
    }
    let (n, c, h, wd) = (x[0], x[1], x[2], x[3]);
    let (wc, f, k, k2) = (w[0], w[1], w[2], w[3]);
    if wc != c {
        return Err(Error::dim(format!(
            "conv_transpose2d: input has {c} channels but weight expects {wc}"
        )));
    }
    if k != k2 {
        return Err(Error::dim(format!(
            "conv_transpose2d: non-square kernel {k}x{k2}"
        )));
    }
    if let Some(b) = b {
        if b != [f] {
            return Err(Error::dim(format!(
                "conv_transpose2d: bias shape {b:?}, expected [{f}]"
            )));
        }
    }
    let hb = conv_transpose_out_extent(h, k, stride, pad, output_padding);
    let wb = conv_transpose_out_extent(wd, k, stride, pad, output_padding);
    match (hb, wb) {
        (Some(hb), Some(wb)) => Ok(ConvShapes {
            n,
            f,
            geom: Geom {
                c: f,
                hb,
                wb,
                k,
                stride,
                pad,
                hs: h,
                ws: wd,
            },
        }),
        _ => Err(Error::dim(format!(
            "conv_transpose2d: negative output size for input {h}x{wd}, kernel {k}, stride {stride}, pad {pad}"
        ))),
    }
}

/// `y[n] = w @ im2col(x[n]) + b`; returns `[N, F, hs, ws]` data.
pub(crate) fn conv2d_forward<T: Float>(s: &ConvShapes, x: &[T], w: &[T], b: Option<&[T]>) -> Vec<T> {
    let g = s.geom;
    let in_per = g.c * g.large();
    let out_per = s.f * g.small();
    let mut out = vec![T::zero(); s.n * out_per];
    out.par_chunks_mut(out_per)
        .zip(x.par_chunks(in_per))
        .for_each(|(y, xs)| {
            let chunk = g.chunk();
            let mut cols = vec![T::zero(); g.rows() * chunk];
            let mut p0 = 0;
            while p0 < g.small() {
                let p1 = (p0 + chunk).min(g.small());
                let width = p1 - p0;
                g.im2col(xs, p0, p1, &mut cols[..g.rows() * width]);
                gemm_into_cols(s.f, g.rows(), width, w, &cols, y, g.small(), p0);
                p0 = p1;
            }
            if let Some(b) = b {
                for (f, row) in y.chunks_mut(g.small()).enumerate() {
                    for v in row {
                        *v = *v + b[f];
                    }
                }
            }
        });
    out
}

/// Returns (dx, dw, db) for `conv2d_forward`.
pub(crate) fn conv2d_backward<T: Float>(
    s: &ConvShapes,
    x: &[T],
    w: &[T],
    dy: &[T],
    need_dx: bool,
    need_dw: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>, Vec<T>) {
    let g = s.geom;
    let in_per = g.c * g.large();
    let out_per = s.f * g.small();
    let rows = g.rows();
    let mut db = vec![T::zero(); s.f];
    for n in 0..s.n {
        for (f, row) in dy[n * out_per..(n + 1) * out_per]
            .chunks(g.small())
            .enumerate()
        {
            db[f] = db[f] + row.iter().copied().sum::<T>();
        }
    }
    let mut dx = need_dx.then(|| vec![T::zero(); s.n * in_per]);
    let mut dw = need_dw.then(|| vec![T::zero(); s.f * rows]);
    if !need_dx && !need_dw {
        return (None, None, db);
    }
    let chunk = g.chunk();
    let mut cols = vec![T::zero(); rows * chunk];
    let mut dchunk = vec![T::zero(); s.f * chunk];
    for n in 0..s.n {
        let xs = &x[n * in_per..(n + 1) * in_per];
        let dys = &dy[n * out_per..(n + 1) * out_per];
        let mut p0 = 0;
        while p0 < g.small() {
            let p1 = (p0 + chunk).min(g.small());
            let width = p1 - p0;
            // contiguous copy of dy[:, p0..p1]
            for f in 0..s.f {
                dchunk[f * width..(f + 1) * width]
                    .copy_from_slice(&dys[f * g.small() + p0..f * g.small() + p1]);
            }
            let dchunk = &dchunk[..s.f * width];
            if let Some(dw) = dw.as_mut() {
                g.im2col(xs, p0, p1, &mut cols[..rows * width]);
                gemm(false, true, s.f, width, rows, dchunk, &cols[..rows * width], dw, true);
            }
            if let Some(dx) = dx.as_mut() {
                let dcols = &mut cols[..rows * width];
                gemm(true, false, rows, s.f, width, w, dchunk, dcols, false);
                g.col2im_add(dcols, p0, p1, &mut dx[n * in_per..(n + 1) * in_per]);
            }
            p0 = p1;
        }
    }
    (dx, dw, db)
}

/// Transposed convolution: `y[n] = col2im(w^T @ x[n]) + b`, returns `[N, F, hb, wb]` data.
pub(crate) fn conv_transpose2d_forward<T: Float>(
    s: &ConvShapes,
    x: &[T],
    w: &[T],
    b: Option<&[T]>,
) -> Vec<T> {
    let g = s.geom;
    let cin = x.len() / (s.n * g.small());
    let in_per = cin * g.small();
    let out_per = s.f * g.large();
    let rows = g.rows();
    let mut out = vec![T::zero(); s.n * out_per];
    out.par_chunks_mut(out_per)
        .zip(x.par_chunks(in_per))
        .for_each(|(y, xs)| {
            let chunk = g.chunk();
            let mut cols = vec![T::zero(); rows * chunk];
            let mut xchunk = vec![T::zero(); cin * chunk];
            let mut p0 = 0;
            while p0 < g.small() {
                let p1 = (p0 + chunk).min(g.small());
                let width = p1 - p0;
                for c in 0..cin {
                    xchunk[c * width..(c + 1) * width]
                        .copy_from_slice(&xs[c * g.small() + p0..c * g.small() + p1]);
                }
                let cols = &mut cols[..rows * width];
                gemm(true, false, rows, cin, width, w, &xchunk[..cin * width], cols, false);
                g.col2im_add(cols, p0, p1, y);
                p0 = p1;
            }
            if let Some(b) = b {
                for (f, plane) in y.chunks_mut(g.large()).enumerate() {
                    for v in plane {
                        *v = *v + b[f];
                    }
                }
            }
        });
    out
}

pub(crate) fn conv_transpose2d_backward<T: Float>(
    s: &ConvShapes,
    x: &[T],
    w: &[T],
    dy: &[T],
    need_dx: bool,
    need_dw: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>, Vec<T>) {
    let g = s.geom;
    let cin = x.len() / (s.n * g.small());
    let in_per = cin * g.small();
    let out_per = s.f * g.large();
    let rows = g.rows();
    let mut db = vec![T::zero(); s.f];
    for n in 0..s.n {
        for (f, plane) in dy[n * out_per..(n + 1) * out_per]
            .chunks(g.large())
            .enumerate()
        {
            db[f] = db[f] + plane.iter().copied().sum::<T>();
        }
    }
    let mut dx = need_dx.then(|| vec![T::zero(); s.n * in_per]);
    let mut dw = need_dw.then(|| vec![T::zero(); cin * rows]);
    if !need_dx && !need_dw {
        return (None, None, db);
    }
    let chunk = g.chunk();
    let mut cols = vec![T::zero(); rows * chunk];
    let mut xchunk = vec![T::zero(); cin * chunk];
    for n in 0..s.n {
        let xs = &x[n * in_per..(n + 1) * in_per];
        let dys = &dy[n * out_per..(n + 1) * out_per];
        let mut p0 = 0;
        while p0 < g.small() {
            let p1 = (p0 + chunk).min(g.small());
            let width = p1 - p0;
            let cols = &mut cols[..rows * width];
            g.im2col(dys, p0, p1, cols);
            if let Some(dx) = dx.as_mut() {
                let dxs = &mut dx[n * in_per..(n + 1) * in_per];
                gemm_into_cols(cin, rows, width, w, cols, dxs, g.small(), p0);
            }
            if let Some(dw) = dw.as_mut() {
                for c in 0..cin {
                    xchunk[c * width..(c + 1) * width]
                        .copy_from_slice(&xs[c * g.small() + p0..c * g.small() + p1]);
                }
                gemm(false, true, cin, width, rows, &xchunk[..cin * width], cols, dw, true);
            }
            p0 = p1;
        }
    }
    (dx, dw, db)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn extents() {
        assert_eq!(conv_out_extent(256, 7, 1, 3), Some(256));
        assert_eq!(conv_out_extent(64, 3, 2, 1), Some(32));
        assert_eq!(conv_out_extent(2, 5, 1, 0), None);
        assert_eq!(conv_transpose_out_extent(16, 3, 2, 1, 1), Some(32));
        assert_eq!(conv_transpose_out_extent(1, 1, 1, 1, 0), None);
    }

    #[test]
    fn forward_matches_direct_summation() {
        let shapes = conv2d_shapes(&[1, 2, 9, 9], &[3, 2, 3, 3], None, 1, 1).unwrap();
        let x: Vec<f64> = (0..162).map(|i| (i as f64 * 0.37).sin()).collect();
        let w: Vec<f64> = (0..54).map(|i| (i as f64 * 0.11).cos()).collect();
        let y = conv2d_forward(&shapes, &x, &w, None);
        // direct evaluation
        for f in 0..3 {
            for oh in 0..9 {
                for ow in 0..9 {
                    let mut acc = 0.0;
                    for c in 0..2 {
                        for ki in 0..3 {
                            for kj in 0..3 {
                                let ih = oh as isize + ki as isize - 1;
                                let iw = ow as isize + kj as isize - 1;
                                if (0..9).contains(&ih) && (0..9).contains(&iw) {
                                    acc += x[c * 81 + ih as usize * 9 + iw as usize]
                                        * w[((f * 2 + c) * 3 + ki) * 3 + kj];
                                }
                            }
                        }
                    }
                    assert!((y[f * 81 + oh * 9 + ow] - acc).abs() < 1e-12);
                }
            }
        }
    }
}
