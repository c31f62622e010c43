//! Forward/backward kernels for the non-convolutional primitives.

use super::float::Float;

/// Zero-mean/unit-variance normalization over contiguous groups of `len` elements.
/// Returns `(normalized, inv_std per group)`.
pub(crate) fn normalize_groups<T: Float>(x: &[T], len: usize, eps: f64) -> (Vec<T>, Vec<T>) {
    let groups = x.len() / len;
    let mut y = vec![T::zero(); x.len()];
    let mut inv = Vec::with_capacity(groups);
    let n = T::of(len as f64);
    for (src, dst) in x.chunks(len).zip(y.chunks_mut(len)) {
        let mean = src.iter().copied().sum::<T>() / n;
        let var = src
            .iter()
            .map(|&v| (v - mean) * (v - mean))
            .sum::<T>()
            / n;
        let is = T::one() / (var + T::of(eps)).sqrt();
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = (s - mean) * is;
        }
        inv.push(is);
    }
    (y, inv)
}

/// Backward of `normalize_groups` given the normalized output `y`.
pub(crate) fn normalize_groups_backward<T: Float>(
    y: &[T],
    inv: &[T],
    dy: &[T],
    len: usize,
) -> Vec<T> {
    let n = T::of(len as f64);
    let mut dx = vec![T::zero(); y.len()];
    for (g, ((ys, dys), dxs)) in y
        .chunks(len)
        .zip(dy.chunks(len))
        .zip(dx.chunks_mut(len))
        .enumerate()
    {
        let mean_dy = dys.iter().copied().sum::<T>() / n;
        let mean_dy_y = dys.iter().zip(ys).map(|(&a, &b)| a * b).sum::<T>() / n;
        for ((d, &dyv), &yv) in dxs.iter_mut().zip(dys).zip(ys) {
            *d = inv[g] * (dyv - mean_dy - yv * mean_dy_y);
        }
    }
    dx
}

/// Softmax over contiguous rows of `len`, with max subtraction.
pub(crate) fn softmax_rows<T: Float>(x: &[T], len: usize) -> Vec<T> {
    let mut y = vec![T::zero(); x.len()];
    for (src, dst) in x.chunks(len).zip(y.chunks_mut(len)) {
        let max = src.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = (s - max).exp();
            total = total + *d;
        }
        for d in dst.iter_mut() {
            *d = *d / total;
        }
    }
    y
}

pub(crate) fn softmax_rows_backward<T: Float>(y: &[T], dy: &[T], len: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); y.len()];
    for ((ys, dys), dxs) in y.chunks(len).zip(dy.chunks(len)).zip(dx.chunks_mut(len)) {
        let dot = ys.iter().zip(dys).map(|(&a, &b)| a * b).sum::<T>();
        for ((d, &yv), &dyv) in dxs.iter_mut().zip(ys).zip(dys) {
            *d = yv * (dyv - dot);
        }
    }
    dx
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Output element `o` of `permute(x, axes)` reads input element `src_index[o]`.
pub(crate) fn permute_indices(shape: &[usize], axes: &[usize]) -> Vec<usize> {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let n: usize = shape.iter().product();
    let mut idx = vec![0usize; out_shape.len()];
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let src = idx
            .iter()
            .zip(axes)
            .map(|(&i, &a)| i * in_strides[a])
            .sum::<usize>();
        out.push(src);
        for d in (0..idx.len()).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    out
}

/// Sparse 1-D linear interpolation weights, half-pixel centers (`align_corners = false`).
/// Entry `o` lists `(source index, weight)` pairs for output sample `o`.
pub(crate) fn bilinear_taps(src: usize, dst: usize) -> Vec<[(usize, f64); 2]> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let pos = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (pos.floor() as usize).min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            let frac = pos - i0 as f64;
            [(i0, 1.0 - frac), (i1, frac)]
        })
        .collect()
}

/// Bilinear resize of one `h x w` plane to `oh x ow`.
pub fn bilinear_resize_plane(src: &[f64], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let ty = bilinear_taps(h, oh);
    let tx = bilinear_taps(w, ow);
    let mut out = vec![0.0; oh * ow];
    for (y, ry) in ty.iter().enumerate() {
        for (x, rx) in tx.iter().enumerate() {
            let mut acc = 0.0;
            for &(iy, wy) in ry {
                for &(ix, wx) in rx {
                    acc += wy * wx * src[iy * w + ix];
                }
            }
            out[y * ow + x] = acc;
        }
    }
    out
}

pub(crate) fn bilinear_forward<T: Float>(
    x: &[T],
    planes: usize,
    (h, w): (usize, usize),
    (oh, ow): (usize, usize),
) -> Vec<T> {
    let ty = bilinear_taps(h, oh);
    let tx = bilinear_taps(w, ow);
    let mut out = vec![T::zero(); planes * oh * ow];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for (y, ry) in ty.iter().enumerate() {
            for (xo, rx) in tx.iter().enumerate() {
                let mut acc = T::zero();
                for &(iy, wy) in ry {
                    for &(ix, wx) in rx {
                        acc = acc + T::of(wy * wx) * src[iy * w + ix];
                    }
                }
                dst[y * ow + xo] = acc;
            }
        }
    }
    out
}

pub(crate) fn bilinear_backward<T: Float>(
    dy: &[T],
    planes: usize,
    (h, w): (usize, usize),
    (oh, ow): (usize, usize),
) -> Vec<T> {
    let ty = bilinear_taps(h, oh);
    let tx = bilinear_taps(w, ow);
    let mut dx = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        let src = &dy[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for (y, ry) in ty.iter().enumerate() {
            for (xo, rx) in tx.iter().enumerate() {
                let g = src[y * ow + xo];
                for &(iy, wy) in ry {
                    for &(ix, wx) in rx {
                        dst[iy * w + ix] = dst[iy * w + ix] + T::of(wy * wx) * g;
                    }
                }
            }
        }
    }
    dx
}

/// Non-overlapping `k x k` max pooling; returns values and flat argmax per output.
pub(crate) fn maxpool_forward<T: Float>(
    x: &[T],
    planes: usize,
    (h, w): (usize, usize),
    k: usize,
) -> (Vec<T>, Vec<usize>) {
    let (oh, ow) = (h / k, w / k);
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut arg = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let base = p * h * w;
        for y in 0..oh {
            for xo in 0..ow {
                let mut best = base + y * k * w + xo * k;
                for dy in 0..k {
                    for dx in 0..k {
                        let i = base + (y * k + dy) * w + xo * k + dx;
                        if x[i] > x[best] {
                            best = i;
                        }
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    (out, arg)
}

/// Exact GELU `x * Phi(x)`.
pub(crate) fn gelu<T: Float>(x: T) -> T {
    let half = T::of(0.5);
    half * x * (T::one() + (x * T::of(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

pub(crate) fn gelu_grad<T: Float>(x: T) -> T {
    let cdf = T::of(0.5) * (T::one() + (x * T::of(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-(x * x) * T::of(0.5)).exp() * T::of(1.0 / (2.0 * std::f64::consts::PI).sqrt());
    cdf + x * pdf
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bilinear_weights_sum_to_one() {
        for (s, d) in [(4, 16), (16, 4), (5, 7), (1, 3)] {
            for taps in bilinear_taps(s, d) {
                let total: f64 = taps.iter().map(|t| t.1).sum();
                assert!((total - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn bilinear_downsample_by_four_averages_middle_pair() {
        let taps = bilinear_taps(8, 2);
        assert_eq!(taps[0], [(1, 0.5), (2, 0.5)]);
        assert_eq!(taps[1], [(5, 0.5), (6, 0.5)]);
    }

    #[test]
    fn permute_transposes_matrix() {
        // [[0,1,2],[3,4,5]] transposed
        assert_eq!(permute_indices(&[2, 3], &[1, 0]), vec![0, 3, 1, 4, 2, 5]);
    }

    #[test]
    fn gelu_values() {
        assert_eq!(gelu(0.0f64), 0.0);
        assert!((gelu(10.0f64) - 10.0).abs() < 1e-12);
        assert!(gelu(-10.0f64).abs() < 1e-12);
    }
}
