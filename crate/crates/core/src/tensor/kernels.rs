//! Raw loops over flat `f64` slices. Everything here is shape-unaware; the
//! callers validate dimensions and pass them in.

/// c = a(m x n) * b(n x p)
pub(crate) fn matmul(a: &[f64], b: &[f64], m: usize, n: usize, p: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * p];
    for i in 0..m {
        let c_row = &mut c[i * p..(i + 1) * p];
        for k in 0..n {
            let av = a[i * n + k];
            if av == 0.0 {
                continue;
            }
            let b_row = &b[k * p..(k + 1) * p];
            for (cv, bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
    c
}

/// da += dc(m x p) * b(n x p)^T
pub(crate) fn matmul_acc_grad_lhs(dc: &[f64], b: &[f64], m: usize, n: usize, p: usize, da: &mut [f64]) {
    for i in 0..m {
        let dc_row = &dc[i * p..(i + 1) * p];
        for k in 0..n {
            let b_row = &b[k * p..(k + 1) * p];
            let mut s = 0.0;
            for (dv, bv) in dc_row.iter().zip(b_row) {
                s += dv * bv;
            }
            da[i * n + k] += s;
        }
    }
}

/// db += a(m x n)^T * dc(m x p)
pub(crate) fn matmul_acc_grad_rhs(a: &[f64], dc: &[f64], m: usize, n: usize, p: usize, db: &mut [f64]) {
    for i in 0..m {
        let dc_row = &dc[i * p..(i + 1) * p];
        for k in 0..n {
            let av = a[i * n + k];
            if av == 0.0 {
                continue;
            }
            let db_row = &mut db[k * p..(k + 1) * p];
            for (dv, cv) in db_row.iter_mut().zip(dc_row) {
                *dv += av * cv;
            }
        }
    }
}

/// Softmax along the middle extent of an (outer, len, inner) decomposition,
/// with max subtraction per fibre.
pub(crate) fn softmax_axis(x: &[f64], outer: usize, len: usize, inner: usize) -> Vec<f64> {
    let mut y = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut max = f64::NEG_INFINITY;
            for a in 0..len {
                max = max.max(x[base + a * inner]);
            }
            let mut sum = 0.0;
            for a in 0..len {
                let e = (x[base + a * inner] - max).exp();
                y[base + a * inner] = e;
                sum += e;
            }
            for a in 0..len {
                y[base + a * inner] /= sum;
            }
        }
    }
    y
}

/// dx += y .* (dy - sum(y .* dy)) per fibre, where y is the softmax output.
pub(crate) fn softmax_axis_backward(
    y: &[f64],
    dy: &[f64],
    outer: usize,
    len: usize,
    inner: usize,
    dx: &mut [f64],
) {
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut dot = 0.0;
            for a in 0..len {
                let idx = base + a * inner;
                dot += y[idx] * dy[idx];
            }
            for a in 0..len {
                let idx = base + a * inner;
                dx[idx] += y[idx] * (dy[idx] - dot);
            }
        }
    }
}

/// log(sum(exp(x_k))) over the class fibre of a (classes, positions) layout.
pub(crate) fn logsumexp_at(x: &[f64], classes: usize, positions: usize, pos: usize) -> f64 {
    let mut max = f64::NEG_INFINITY;
    for k in 0..classes {
        max = max.max(x[k * positions + pos]);
    }
    let mut sum = 0.0;
    for k in 0..classes {
        sum += (x[k * positions + pos] - max).exp();
    }
    max + sum.ln()
}

/// y = conv2d(x, w) with square kernel, zero padding, cross-correlation
/// orientation (no kernel flip).
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_forward(
    x: &[f64],
    w: &[f64],
    c_in: usize,
    h: usize,
    wd: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
) -> Vec<f64> {
    let mut y = vec![0.0; c_out * out_h * out_w];
    for o in 0..c_out {
        for oy in 0..out_h {
            for ox in 0..out_w {
                let mut acc = 0.0;
                for i in 0..c_in {
                    let x_plane = &x[i * h * wd..(i + 1) * h * wd];
                    let w_base = ((o * c_in + i) * k) * k;
                    for u in 0..k {
                        let sy = (oy * stride + u) as isize - pad as isize;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let x_row = &x_plane[sy as usize * wd..(sy as usize + 1) * wd];
                        let w_row = &w[w_base + u * k..w_base + (u + 1) * k];
                        for v in 0..k {
                            let sx = (ox * stride + v) as isize - pad as isize;
                            if sx < 0 || sx >= wd as isize {
                                continue;
                            }
                            acc += x_row[sx as usize] * w_row[v];
                        }
                    }
                }
                y[(o * out_h + oy) * out_w + ox] = acc;
            }
        }
    }
    y
}

/// dx += conv2d backward w.r.t. the input.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward_input(
    dy: &[f64],
    w: &[f64],
    c_in: usize,
    h: usize,
    wd: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
    dx: &mut [f64],
) {
    for o in 0..c_out {
        for oy in 0..out_h {
            for ox in 0..out_w {
                let g = dy[(o * out_h + oy) * out_w + ox];
                if g == 0.0 {
                    continue;
                }
                for i in 0..c_in {
                    let w_base = ((o * c_in + i) * k) * k;
                    for u in 0..k {
                        let sy = (oy * stride + u) as isize - pad as isize;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        for v in 0..k {
                            let sx = (ox * stride + v) as isize - pad as isize;
                            if sx < 0 || sx >= wd as isize {
                                continue;
                            }
                            dx[(i * h + sy as usize) * wd + sx as usize] += g * w[w_base + u * k + v];
                        }
                    }
                }
            }
        }
    }
}

/// dw += conv2d backward w.r.t. the kernel.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward_kernel(
    dy: &[f64],
    x: &[f64],
    c_in: usize,
    h: usize,
    wd: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
    dw: &mut [f64],
) {
    for o in 0..c_out {
        for oy in 0..out_h {
            for ox in 0..out_w {
                let g = dy[(o * out_h + oy) * out_w + ox];
                if g == 0.0 {
                    continue;
                }
                for i in 0..c_in {
                    let x_plane = &x[i * h * wd..(i + 1) * h * wd];
                    let w_base = ((o * c_in + i) * k) * k;
                    for u in 0..k {
                        let sy = (oy * stride + u) as isize - pad as isize;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        for v in 0..k {
                            let sx = (ox * stride + v) as isize - pad as isize;
                            if sx < 0 || sx >= wd as isize {
                                continue;
                            }
                            dw[w_base + u * k + v] += g * x_plane[sy as usize * wd + sx as usize];
                        }
                    }
                }
            }
        }
    }
}

/// One linear-interpolation tap: output value = (1 - t) * x[i0] + t * x[i1].
#[derive(Debug, Clone, Copy)]
pub(crate) struct LinTap {
    pub i0: usize,
    pub i1: usize,
    pub t: f64,
}

/// Half-pixel-center source coordinates (align_corners = false), clamped to
/// the valid range so border cells replicate the edge.
pub(crate) fn bilinear_taps(in_len: usize, out_len: usize) -> Vec<LinTap> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_len - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(in_len - 1);
            LinTap { i0, i1, t: src - i0 as f64 }
        })
        .collect()
}

/// Bilinear resample of one row-major plane.
pub(crate) fn bilinear_plane(
    x: &[f64],
    w: usize,
    taps_y: &[LinTap],
    taps_x: &[LinTap],
) -> Vec<f64> {
    let mut y = Vec::with_capacity(taps_y.len() * taps_x.len());
    for ty in taps_y {
        let r0 = &x[ty.i0 * w..ty.i0 * w + w];
        let r1 = &x[ty.i1 * w..ty.i1 * w + w];
        for tx in taps_x {
            let top = r0[tx.i0] * (1.0 - tx.t) + r0[tx.i1] * tx.t;
            let bot = r1[tx.i0] * (1.0 - tx.t) + r1[tx.i1] * tx.t;
            y.push(top * (1.0 - ty.t) + bot * ty.t);
        }
    }
    y
}

/// dx += transpose of the bilinear gather.
pub(crate) fn bilinear_plane_backward(
    dy: &[f64],
    w: usize,
    taps_y: &[LinTap],
    taps_x: &[LinTap],
    dx: &mut [f64],
) {
    let out_w = taps_x.len();
    for (oy, ty) in taps_y.iter().enumerate() {
        for (ox, tx) in taps_x.iter().enumerate() {
            let g = dy[oy * out_w + ox];
            if g == 0.0 {
                continue;
            }
            dx[ty.i0 * w + tx.i0] += g * (1.0 - ty.t) * (1.0 - tx.t);
            dx[ty.i0 * w + tx.i1] += g * (1.0 - ty.t) * tx.t;
            dx[ty.i1 * w + tx.i0] += g * ty.t * (1.0 - tx.t);
            dx[ty.i1 * w + tx.i1] += g * ty.t * tx.t;
        }
    }
}
