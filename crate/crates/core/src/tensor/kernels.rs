//! Raw loops behind the graph ops. Shapes are validated by the caller.
//!
//! Convolutions treat every input as `(N, C, D, H, W)`; 2-D tensors are
//! handled as `D = 1` with a depth kernel/stride/pad of `(1, 1, 0)`.

use super::{numel, Element};

/// Iterate the multi-index of `shape` while tracking one linear offset per
/// stride vector. `f` receives (output linear index, offsets).
fn walk<const K: usize>(shape: &[usize], strides: [&[usize]; K], mut f: impl FnMut(usize, [usize; K])) {
    let nd = shape.len();
    let total = numel(shape);
    if nd == 0 {
        f(0, [0; K]);
        return;
    }
    let mut idx = vec![0usize; nd];
    let mut off = [0usize; K];
    let last = nd - 1;
    let inner = shape[last];
    let mut i = 0;
    while i < total {
        let base = off;
        for j in 0..inner {
            let mut o = base;
            for k in 0..K {
                o[k] += j * strides[k][last];
            }
            f(i + j, o);
        }
        i += inner;
        // advance the outer digits
        let mut d = last;
        loop {
            if d == 0 {
                return;
            }
            d -= 1;
            idx[d] += 1;
            for k in 0..K {
                off[k] += strides[k][d];
            }
            if idx[d] < shape[d] {
                break;
            }
            for k in 0..K {
                off[k] -= strides[k][d] * shape[d];
            }
            idx[d] = 0;
        }
    }
}

/// Row-major strides of `shape` right-aligned against `out` (0 on broadcast axes).
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let nd = out.len();
    let mut strides = vec![0; nd];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        let oi = nd - shape.len() + i;
        strides[oi] = if shape[i] == 1 && out[oi] != 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

pub fn broadcast_binary<T: Element>(
    a: &[T],
    a_shape: &[usize],
    b: &[T],
    b_shape: &[usize],
    out_shape: &[usize],
    f: impl Fn(T, T) -> T,
) -> Vec<T> {
    if a_shape == b_shape {
        return a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect();
    }
    if b.len() == 1 {
        let y = b[0];
        if numel(a_shape) == numel(out_shape) {
            return a.iter().map(|&x| f(x, y)).collect();
        }
    }
    if a.len() == 1 && numel(b_shape) == numel(out_shape) {
        let x = a[0];
        return b.iter().map(|&y| f(x, y)).collect();
    }
    let sa = broadcast_strides(a_shape, out_shape);
    let sb = broadcast_strides(b_shape, out_shape);
    let mut out = vec![T::zero(); numel(out_shape)];
    walk(out_shape, [&sa, &sb], |i, [ia, ib]| out[i] = f(a[ia], b[ib]));
    out
}

pub fn broadcast_to<T: Element>(x: &[T], shape: &[usize], out_shape: &[usize]) -> Vec<T> {
    let s = broadcast_strides(shape, out_shape);
    let mut out = vec![T::zero(); numel(out_shape)];
    walk(out_shape, [&s], |i, [ix]| out[i] = x[ix]);
    out
}

/// Sum `x` (of `shape`) down to `target`, which must broadcast to `shape`.
pub fn sum_to<T: Element>(x: &[T], shape: &[usize], target: &[usize]) -> Vec<T> {
    let s = broadcast_strides(target, shape);
    let mut out = vec![T::zero(); numel(target)];
    walk(shape, [&s], |i, [io]| out[io] = out[io] + x[i]);
    out
}

pub fn matmul<T: Element>(
    a: &[T],
    a_shape: [usize; 2],
    b: &[T],
    b_shape: [usize; 2],
    ta: bool,
    tb: bool,
) -> (Vec<T>, [usize; 2]) {
    let a_owned;
    let (a, [m, k]) = if ta {
        a_owned = transpose(a, a_shape);
        (&a_owned[..], [a_shape[1], a_shape[0]])
    } else {
        (a, a_shape)
    };
    let b_owned;
    let (b, [_, n]) = if tb {
        b_owned = transpose(b, b_shape);
        (&b_owned[..], [b_shape[1], b_shape[0]])
    } else {
        (b, b_shape)
    };
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
    (out, [m, n])
}

fn transpose<T: Element>(x: &[T], [r, c]: [usize; 2]) -> Vec<T> {
    let mut out = vec![T::zero(); r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = x[i * c + j];
        }
    }
    out
}

/// Per-axis convolution geometry in 5-D form.
#[derive(Clone, Copy, Debug)]
pub struct Conv5 {
    pub stride: [usize; 3],
    pub pad: [usize; 3],
}

/// Output positions `o` for which `o * stride + k - pad` lands in `0..len`.
#[inline]
fn valid_range(out_len: usize, len: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    let k = k as isize;
    let pad = pad as isize;
    let s = stride as isize;
    // o*s + k - pad >= 0  =>  o >= (pad - k) / s (ceil)
    let lo_num = pad - k;
    let lo = if lo_num <= 0 { 0 } else { (lo_num + s - 1) / s };
    // o*s + k - pad <= len - 1
    let hi_num = len as isize - 1 + pad - k;
    if hi_num < 0 {
        return (0, 0);
    }
    let hi = (hi_num / s + 1).min(out_len as isize);
    if lo >= hi {
        (0, 0)
    } else {
        (lo as usize, hi as usize)
    }
}

pub fn conv_out_len(len: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let span = len + 2 * pad;
    if span < k {
        return None;
    }
    Some((span - k) / stride + 1)
}

/// y[n,o,p] = sum_{c,k} w[o,c,k] * x[n,c,p*s+k-pad]
pub fn conv_forward<T: Element>(
    x: &[T],
    xs: [usize; 5],
    w: &[T],
    ws: [usize; 5],
    ys: [usize; 5],
    g: Conv5,
) -> Vec<T> {
    let [n_b, c_in, d, h, wd] = xs;
    let [c_out, _, kd, kh, kw] = ws;
    let [_, _, od, oh, ow] = ys;
    let x_plane = d * h * wd;
    let y_plane = od * oh * ow;
    let mut y = vec![T::zero(); n_b * c_out * y_plane];
    for n in 0..n_b {
        for o in 0..c_out {
            let yp = &mut y[(n * c_out + o) * y_plane..(n * c_out + o + 1) * y_plane];
            for c in 0..c_in {
                let xp = &x[(n * c_in + c) * x_plane..(n * c_in + c + 1) * x_plane];
                let wbase = (o * c_in + c) * kd * kh * kw;
                for a in 0..kd {
                    let (d_lo, d_hi) = valid_range(od, d, a, g.stride[0], g.pad[0]);
                    for b in 0..kh {
                        let (h_lo, h_hi) = valid_range(oh, h, b, g.stride[1], g.pad[1]);
                        for e in 0..kw {
                            let (w_lo, w_hi) = valid_range(ow, wd, e, g.stride[2], g.pad[2]);
                            if w_lo >= w_hi {
                                continue;
                            }
                            let wv = w[wbase + (a * kh + b) * kw + e];
                            if wv == T::zero() {
                                continue;
                            }
                            for zd in d_lo..d_hi {
                                let id = zd * g.stride[0] + a - g.pad[0];
                                for zh in h_lo..h_hi {
                                    let ih = zh * g.stride[1] + b - g.pad[1];
                                    let yrow = (zd * oh + zh) * ow;
                                    let xrow = (id * h + ih) * wd;
                                    if g.stride[2] == 1 {
                                        let x0 = xrow + w_lo + e - g.pad[2];
                                        let ys = &mut yp[yrow + w_lo..yrow + w_hi];
                                        let xs = &xp[x0..x0 + (w_hi - w_lo)];
                                        for (yv, &xv) in ys.iter_mut().zip(xs) {
                                            *yv = *yv + wv * xv;
                                        }
                                    } else {
                                        for zw in w_lo..w_hi {
                                            let iw = zw * g.stride[2] + e - g.pad[2];
                                            yp[yrow + zw] = yp[yrow + zw] + wv * xp[xrow + iw];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    y
}

/// Adjoint of `conv_forward` with respect to its input:
/// x[n,c,q] = sum_{o,k : q = p*s+k-pad} gy[n,o,p] * w[o,c,k]
pub fn conv_transpose<T: Element>(
    gy: &[T],
    ys: [usize; 5],
    w: &[T],
    ws: [usize; 5],
    xs: [usize; 5],
    g: Conv5,
) -> Vec<T> {
    let [n_b, c_in, d, h, wd] = xs;
    let [c_out, _, kd, kh, kw] = ws;
    let [_, _, od, oh, ow] = ys;
    let x_plane = d * h * wd;
    let y_plane = od * oh * ow;
    let mut x = vec![T::zero(); n_b * c_in * x_plane];
    for n in 0..n_b {
        for c in 0..c_in {
            let xp = &mut x[(n * c_in + c) * x_plane..(n * c_in + c + 1) * x_plane];
            for o in 0..c_out {
                let yp = &gy[(n * c_out + o) * y_plane..(n * c_out + o + 1) * y_plane];
                let wbase = (o * c_in + c) * kd * kh * kw;
                for a in 0..kd {
                    let (d_lo, d_hi) = valid_range(od, d, a, g.stride[0], g.pad[0]);
                    for b in 0..kh {
                        let (h_lo, h_hi) = valid_range(oh, h, b, g.stride[1], g.pad[1]);
                        for e in 0..kw {
                            let (w_lo, w_hi) = valid_range(ow, wd, e, g.stride[2], g.pad[2]);
                            if w_lo >= w_hi {
                                continue;
                            }
                            let wv = w[wbase + (a * kh + b) * kw + e];
                            if wv == T::zero() {
                                continue;
                            }
                            for zd in d_lo..d_hi {
                                let id = zd * g.stride[0] + a - g.pad[0];
                                for zh in h_lo..h_hi {
                                    let ih = zh * g.stride[1] + b - g.pad[1];
                                    let yrow = (zd * oh + zh) * ow;
                                    let xrow = (id * h + ih) * wd;
                                    if g.stride[2] == 1 {
                                        let x0 = xrow + w_lo + e - g.pad[2];
                                        let xs = &mut xp[x0..x0 + (w_hi - w_lo)];
                                        let ys = &yp[yrow + w_lo..yrow + w_hi];
                                        for (xv, &yv) in xs.iter_mut().zip(ys) {
                                            *xv = *xv + wv * yv;
                                        }
                                    } else {
                                        for zw in w_lo..w_hi {
                                            let iw = zw * g.stride[2] + e - g.pad[2];
                                            xp[xrow + iw] = xp[xrow + iw] + wv * yp[yrow + zw];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

/// Adjoint of `conv_forward` with respect to its weights:
/// w[o,c,k] = sum_{n,p} gy[n,o,p] * x[n,c,p*s+k-pad]
pub fn conv_weight_grad<T: Element>(
    x: &[T],
    xs: [usize; 5],
    gy: &[T],
    ys: [usize; 5],
    ws: [usize; 5],
    g: Conv5,
) -> Vec<T> {
    let [n_b, c_in, d, h, wd] = xs;
    let [c_out, _, kd, kh, kw] = ws;
    let [_, _, od, oh, ow] = ys;
    let x_plane = d * h * wd;
    let y_plane = od * oh * ow;
    let mut w = vec![T::zero(); numel(&ws)];
    for n in 0..n_b {
        for o in 0..c_out {
            let yp = &gy[(n * c_out + o) * y_plane..(n * c_out + o + 1) * y_plane];
            for c in 0..c_in {
                let xp = &x[(n * c_in + c) * x_plane..(n * c_in + c + 1) * x_plane];
                let wbase = (o * c_in + c) * kd * kh * kw;
                for a in 0..kd {
                    let (d_lo, d_hi) = valid_range(od, d, a, g.stride[0], g.pad[0]);
                    for b in 0..kh {
                        let (h_lo, h_hi) = valid_range(oh, h, b, g.stride[1], g.pad[1]);
                        for e in 0..kw {
                            let (w_lo, w_hi) = valid_range(ow, wd, e, g.stride[2], g.pad[2]);
                            if w_lo >= w_hi {
                                continue;
                            }
                            let mut acc = T::zero();
                            for zd in d_lo..d_hi {
                                let id = zd * g.stride[0] + a - g.pad[0];
                                for zh in h_lo..h_hi {
                                    let ih = zh * g.stride[1] + b - g.pad[1];
                                    let yrow = (zd * oh + zh) * ow;
                                    let xrow = (id * h + ih) * wd;
                                    if g.stride[2] == 1 {
                                        let x0 = xrow + w_lo + e - g.pad[2];
                                        let xs = &xp[x0..x0 + (w_hi - w_lo)];
                                        let ys = &yp[yrow + w_lo..yrow + w_hi];
                                        for (&xv, &yv) in xs.iter().zip(ys) {
                                            acc = acc + xv * yv;
                                        }
                                    } else {
                                        for zw in w_lo..w_hi {
                                            let iw = zw * g.stride[2] + e - g.pad[2];
                                            acc = acc + xp[xrow + iw] * yp[yrow + zw];
                                        }
                                    }
                                }
                            }
                            let wi = wbase + (a * kh + b) * kw + e;
                            w[wi] = w[wi] + acc;
                        }
                    }
                }
            }
        }
    }
    w
}

/// Nearest-neighbour upsampling of `(N, C, D, H, W)` by `f` on the axes where
/// `scale[axis]` is true.
pub fn upsample<T: Element>(x: &[T], xs: [usize; 5], f: [usize; 3]) -> (Vec<T>, [usize; 5]) {
    let [n, c, d, h, w] = xs;
    let ys = [n, c, d * f[0], h * f[1], w * f[2]];
    let mut y = vec![T::zero(); numel(&ys)];
    let (yd, yh, yw) = (ys[2], ys[3], ys[4]);
    for p in 0..n * c {
        let xp = &x[p * d * h * w..(p + 1) * d * h * w];
        let yp = &mut y[p * yd * yh * yw..(p + 1) * yd * yh * yw];
        for zd in 0..yd {
            for zh in 0..yh {
                let xrow = ((zd / f[0]) * h + zh / f[1]) * w;
                let yrow = (zd * yh + zh) * yw;
                for zw in 0..yw {
                    yp[yrow + zw] = xp[xrow + zw / f[2]];
                }
            }
        }
    }
    (y, ys)
}

/// Block sums over `f`-sized windows (adjoint of `upsample`).
pub fn sum_pool<T: Element>(x: &[T], xs: [usize; 5], f: [usize; 3]) -> (Vec<T>, [usize; 5]) {
    let [n, c, d, h, w] = xs;
    let ys = [n, c, d / f[0], h / f[1], w / f[2]];
    let mut y = vec![T::zero(); numel(&ys)];
    let (yd, yh, yw) = (ys[2], ys[3], ys[4]);
    for p in 0..n * c {
        let xp = &x[p * d * h * w..(p + 1) * d * h * w];
        let yp = &mut y[p * yd * yh * yw..(p + 1) * yd * yh * yw];
        for zd in 0..d {
            for zh in 0..h {
                let xrow = (zd * h + zh) * w;
                let yrow = ((zd / f[0]) * yh + zh / f[1]) * yw;
                for zw in 0..w {
                    yp[yrow + zw / f[2]] = yp[yrow + zw / f[2]] + xp[xrow + zw];
                }
            }
        }
    }
    (y, ys)
}

fn outer_inner(shape: &[usize], axis: usize) -> (usize, usize) {
    (numel(&shape[..axis]), numel(&shape[axis + 1..]))
}

pub fn concat<T: Element>(parts: &[(&[T], &[usize])], axis: usize, out_shape: &[usize]) -> Vec<T> {
    let (outer, inner) = outer_inner(out_shape, axis);
    let mut out = Vec::with_capacity(numel(out_shape));
    for o in 0..outer {
        for (data, shape) in parts {
            let chunk = shape[axis] * inner;
            out.extend_from_slice(&data[o * chunk..(o + 1) * chunk]);
        }
    }
    out
}

pub fn slice<T: Element>(x: &[T], shape: &[usize], axis: usize, start: usize, len: usize) -> Vec<T> {
    let (outer, inner) = outer_inner(shape, axis);
    let full = shape[axis] * inner;
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = o * full + start * inner;
        out.extend_from_slice(&x[base..base + len * inner]);
    }
    out
}

/// Embed `x` at `start` along `axis` in a zero tensor whose `axis` extent is `total`.
pub fn pad_axis<T: Element>(x: &[T], shape: &[usize], axis: usize, start: usize, total: usize) -> Vec<T> {
    let (outer, inner) = outer_inner(shape, axis);
    let len = shape[axis];
    let mut out = vec![T::zero(); outer * total * inner];
    for o in 0..outer {
        let dst = o * total * inner + start * inner;
        out[dst..dst + len * inner].copy_from_slice(&x[o * len * inner..(o + 1) * len * inner]);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct sliding-window evaluation straight from the definition.
    fn brute_conv(x: &[f64], xs: [usize; 5], w: &[f64], ws: [usize; 5], s: usize, p: usize) -> (Vec<f64>, [usize; 5]) {
        let kd_stride = if xs[2] == 1 { 1 } else { s };
        let kd_pad = if xs[2] == 1 { 0 } else { p };
        let out = |len: usize, k: usize, s: usize, p: usize| (len + 2 * p - k) / s + 1;
        let ys = [
            xs[0],
            ws[0],
            out(xs[2], ws[2], kd_stride, kd_pad),
            out(xs[3], ws[3], s, p),
            out(xs[4], ws[4], s, p),
        ];
        let mut y = vec![0.0; numel(&ys)];
        for n in 0..ys[0] {
            for o in 0..ys[1] {
                for a in 0..ys[2] {
                    for b in 0..ys[3] {
                        for e in 0..ys[4] {
                            let mut acc = 0.0;
                            for c in 0..xs[1] {
                                for i in 0..ws[2] {
                                    for j in 0..ws[3] {
                                        for k in 0..ws[4] {
                                            let id = (a * kd_stride + i) as isize - kd_pad as isize;
                                            let ih = (b * s + j) as isize - p as isize;
                                            let iw = (e * s + k) as isize - p as isize;
                                            if id < 0 || ih < 0 || iw < 0 || id >= xs[2] as isize || ih >= xs[3] as isize || iw >= xs[4] as isize {
                                                continue;
                                            }
                                            let xi = (((n * xs[1] + c) * xs[2] + id as usize) * xs[3] + ih as usize) * xs[4] + iw as usize;
                                            let wi = (((o * ws[1] + c) * ws[2] + i) * ws[3] + j) * ws[4] + k;
                                            acc += x[xi] * w[wi];
                                        }
                                    }
                                }
                            }
                            y[(((n * ys[1] + o) * ys[2] + a) * ys[3] + b) * ys[4] + e] = acc;
                        }
                    }
                }
            }
        }
        (y, ys)
    }

    #[test]
    fn conv_matches_sliding_window_reference() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for trial in 0..40 {
            let three_d = trial % 2 == 0;
            let s = 1 + trial % 2;
            let p = trial % 3;
            let k = 1 + (trial / 3) % 3;
            let len = rng.random_range(k.max(2)..=8);
            let xs = if three_d { [2, 2, len, len, len] } else { [2, 3, 1, len, len] };
            let ws = if three_d { [3, 2, k, k, k] } else { [2, 3, 1, k, k] };
            let x: Vec<f64> = (0..numel(&xs)).map(|_| rng.random_range(-1.0..1.0)).collect();
            let w: Vec<f64> = (0..numel(&ws)).map(|_| rng.random_range(-1.0..1.0)).collect();
            let (want, ys) = brute_conv(&x, xs, &w, ws, s, p);
            let g = if three_d {
                Conv5 { stride: [s; 3], pad: [p; 3] }
            } else {
                Conv5 { stride: [1, s, s], pad: [0, p, p] }
            };
            let got_ys = [
                xs[0],
                ws[0],
                conv_out_len(xs[2], ws[2], g.stride[0], g.pad[0]).unwrap(),
                conv_out_len(xs[3], ws[3], s, p).unwrap(),
                conv_out_len(xs[4], ws[4], s, p).unwrap(),
            ];
            assert_eq!(got_ys, ys, "output shape formula, trial {trial}");
            let got = conv_forward(&x, xs, &w, ws, ys, g);
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).abs() < 1e-12, "trial {trial}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn transpose_and_weight_grad_are_adjoints() {
        // <conv(x, w), gy> == <x, convT(gy, w)> == <w, wgrad(x, gy)>
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let xs = [2, 2, 1, 7, 7];
        let ws = [3, 2, 1, 3, 3];
        let g = Conv5 { stride: [1, 2, 2], pad: [0, 1, 1] };
        let ys = [2, 3, 1, 4, 4];
        let x: Vec<f64> = (0..numel(&xs)).map(|_| rng.random_range(-1.0..1.0)).collect();
        let w: Vec<f64> = (0..numel(&ws)).map(|_| rng.random_range(-1.0..1.0)).collect();
        let gy: Vec<f64> = (0..numel(&ys)).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y = conv_forward(&x, xs, &w, ws, ys, g);
        let lhs: f64 = y.iter().zip(&gy).map(|(a, b)| a * b).sum();
        let gx = conv_transpose(&gy, ys, &w, ws, xs, g);
        let mid: f64 = x.iter().zip(&gx).map(|(a, b)| a * b).sum();
        let gw = conv_weight_grad(&x, xs, &gy, ys, ws, g);
        let rhs: f64 = w.iter().zip(&gw).map(|(a, b)| a * b).sum();
        assert!((lhs - mid).abs() < 1e-10);
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn sum_to_reduces_broadcast_axes() {
        let x: Vec<f64> = (0..6).map(|v| v as f64).collect();
        assert_eq!(sum_to(&x, &[2, 3], &[1, 3]), vec![3.0, 5.0, 7.0]);
        assert_eq!(sum_to(&x, &[2, 3], &[2, 1]), vec![3.0, 12.0]);
        assert_eq!(sum_to(&x, &[2, 3], &[1]), vec![15.0]);
    }

    #[test]
    fn concat_slice_pad_roundtrip() {
        let a: Vec<f64> = (0..4).map(|v| v as f64).collect();
        let b: Vec<f64> = (10..16).map(|v| v as f64).collect();
        let out = concat(&[(&a, &[2, 2]), (&b, &[2, 3])], 1, &[2, 5]);
        assert_eq!(out, vec![0.0, 1.0, 10.0, 11.0, 12.0, 2.0, 3.0, 13.0, 14.0, 15.0]);
        assert_eq!(slice(&out, &[2, 5], 1, 2, 3), b);
        let padded = pad_axis(&a, &[2, 2], 1, 0, 5);
        assert_eq!(padded, vec![0.0, 1.0, 0.0, 0.0, 0.0, 2.0, 3.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn matmul_transposes() {
        let a = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0]; // 3x2
        let (y, s) = matmul(&a, [2, 3], &b, [3, 2], false, false);
        assert_eq!(s, [2, 2]);
        assert_eq!(y, vec![4.0, 5.0, 10.0, 11.0]);
        let (yt, _) = matmul(&a, [2, 3], &a, [2, 3], false, true);
        assert_eq!(yt, vec![14.0, 32.0, 32.0, 77.0]);
    }
}
