//! Per-operation gradient rules. Each arm reads the node's accumulated
//! gradient and adds contributions into the parents that can reach a
//! trainable leaf; untracked parents are skipped entirely.

use super::kernels;
use super::ops::axis_split;
use super::{Op, Tensor, NORM_EPS};
use crate::label::IGNORE_LABEL;

impl Tensor {
    pub(crate) fn backward_step(&self, grad: &[f64]) {
        match self.op() {
            Op::Leaf { .. } => {}

            Op::Add(a, b) => {
                a.accumulate_grad(grad);
                b.accumulate_grad(grad);
            }

            Op::Mul(a, b) => {
                if a.is_tracked() {
                    let da: Vec<f64> = grad.iter().zip(b.data()).map(|(g, bv)| g * bv).collect();
                    a.accumulate_grad(&da);
                }
                if b.is_tracked() {
                    let db: Vec<f64> = grad.iter().zip(a.data()).map(|(g, av)| g * av).collect();
                    b.accumulate_grad(&db);
                }
            }

            Op::Scale(a, c) => {
                if a.is_tracked() {
                    let da: Vec<f64> = grad.iter().map(|g| g * c).collect();
                    a.accumulate_grad(&da);
                }
            }

            Op::Relu(a) => {
                if a.is_tracked() {
                    let da: Vec<f64> = grad
                        .iter()
                        .zip(a.data())
                        .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                        .collect();
                    a.accumulate_grad(&da);
                }
            }

            Op::Matmul(a, b) => {
                let (m, n) = (a.shape()[0], a.shape()[1]);
                let p = b.shape()[1];
                if a.is_tracked() {
                    let mut da = vec![0.0; a.numel()];
                    kernels::matmul_acc_grad_lhs(grad, b.data(), m, n, p, &mut da);
                    a.accumulate_grad(&da);
                }
                if b.is_tracked() {
                    let mut db = vec![0.0; b.numel()];
                    kernels::matmul_acc_grad_rhs(a.data(), grad, m, n, p, &mut db);
                    b.accumulate_grad(&db);
                }
            }

            Op::Transpose(a) => {
                if a.is_tracked() {
                    // node is (n, m); route each entry back to (m, n).
                    let (n, m) = (self.shape()[0], self.shape()[1]);
                    let mut da = vec![0.0; a.numel()];
                    for j in 0..n {
                        for i in 0..m {
                            da[i * n + j] = grad[j * m + i];
                        }
                    }
                    a.accumulate_grad(&da);
                }
            }

            Op::Reshape(a) => {
                a.accumulate_grad(grad);
            }

            Op::Softmax { input, axis } => {
                if input.is_tracked() {
                    let (outer, len, inner) = axis_split(self.shape(), *axis);
                    let mut dx = vec![0.0; input.numel()];
                    kernels::softmax_axis_backward(self.data(), grad, outer, len, inner, &mut dx);
                    input.accumulate_grad(&dx);
                }
            }

            Op::Conv2d { input, kernel, stride, padding } => {
                let xs = input.shape();
                let ws = kernel.shape();
                let (c_in, h, w) = (xs[0], xs[1], xs[2]);
                let (c_out, k) = (ws[0], ws[2]);
                let (out_h, out_w) = (self.shape()[1], self.shape()[2]);
                if input.is_tracked() {
                    let mut dx = vec![0.0; input.numel()];
                    kernels::conv2d_backward_input(
                        grad, kernel.data(), c_in, h, w, c_out, k, *stride, *padding, out_h, out_w,
                        &mut dx,
                    );
                    input.accumulate_grad(&dx);
                }
                if kernel.is_tracked() {
                    let mut dw = vec![0.0; kernel.numel()];
                    kernels::conv2d_backward_kernel(
                        grad, input.data(), c_in, h, w, c_out, k, *stride, *padding, out_h, out_w,
                        &mut dw,
                    );
                    kernel.accumulate_grad(&dw);
                }
            }

            Op::ChannelBias { input, bias } => {
                input.accumulate_grad(grad);
                if bias.is_tracked() {
                    let plane = self.shape()[1] * self.shape()[2];
                    let db: Vec<f64> = (0..self.shape()[0])
                        .map(|c| grad[c * plane..(c + 1) * plane].iter().sum())
                        .collect();
                    bias.accumulate_grad(&db);
                }
            }

            Op::ChannelAffine { input, gain, bias } => {
                let channels = self.shape()[0];
                let plane = self.shape()[1] * self.shape()[2];
                if input.is_tracked() {
                    let mut dx = vec![0.0; input.numel()];
                    for c in 0..channels {
                        let g = gain.data()[c];
                        for (o, gv) in dx[c * plane..(c + 1) * plane]
                            .iter_mut()
                            .zip(&grad[c * plane..(c + 1) * plane])
                        {
                            *o = gv * g;
                        }
                    }
                    input.accumulate_grad(&dx);
                }
                if gain.is_tracked() {
                    let dg: Vec<f64> = (0..channels)
                        .map(|c| {
                            grad[c * plane..(c + 1) * plane]
                                .iter()
                                .zip(&input.data()[c * plane..(c + 1) * plane])
                                .map(|(g, x)| g * x)
                                .sum()
                        })
                        .collect();
                    gain.accumulate_grad(&dg);
                }
                if bias.is_tracked() {
                    let db: Vec<f64> = (0..channels)
                        .map(|c| grad[c * plane..(c + 1) * plane].iter().sum())
                        .collect();
                    bias.accumulate_grad(&db);
                }
            }

            Op::SpatialNorm(input) => {
                if input.is_tracked() {
                    let channels = self.shape()[0];
                    let plane = self.shape()[1] * self.shape()[2];
                    let n = plane as f64;
                    let mut dx = vec![0.0; input.numel()];
                    for c in 0..channels {
                        let x_hat = &self.data()[c * plane..(c + 1) * plane];
                        let dy = &grad[c * plane..(c + 1) * plane];
                        let x = &input.data()[c * plane..(c + 1) * plane];
                        let (_, var) = super::ops::mean_var(x);
                        let inv = 1.0 / (var + NORM_EPS).sqrt();
                        let mean_dy = dy.iter().sum::<f64>() / n;
                        let mean_dy_xhat =
                            dy.iter().zip(x_hat).map(|(d, h)| d * h).sum::<f64>() / n;
                        for ((o, d), h) in dx[c * plane..(c + 1) * plane]
                            .iter_mut()
                            .zip(dy)
                            .zip(x_hat)
                        {
                            *o = inv * (d - mean_dy - h * mean_dy_xhat);
                        }
                    }
                    input.accumulate_grad(&dx);
                }
            }

            Op::BilinearResize(input) => {
                if input.is_tracked() {
                    let (channels, in_h, in_w) = {
                        let s = input.shape();
                        (s[0], s[1], s[2])
                    };
                    let (out_h, out_w) = (self.shape()[1], self.shape()[2]);
                    let taps_y = kernels::bilinear_taps(in_h, out_h);
                    let taps_x = kernels::bilinear_taps(in_w, out_w);
                    let in_plane = in_h * in_w;
                    let out_plane = out_h * out_w;
                    let mut dx = vec![0.0; input.numel()];
                    for c in 0..channels {
                        kernels::bilinear_plane_backward(
                            &grad[c * out_plane..(c + 1) * out_plane],
                            in_w,
                            &taps_y,
                            &taps_x,
                            &mut dx[c * in_plane..(c + 1) * in_plane],
                        );
                    }
                    input.accumulate_grad(&dx);
                }
            }

            Op::CrossEntropy { logits, target } => {
                if logits.is_tracked() {
                    let g = grad[0];
                    let classes = logits.shape()[0];
                    let positions = logits.numel() / classes;
                    let valid = target.data().iter().filter(|&&l| l != IGNORE_LABEL).count();
                    let mut dx = vec![0.0; logits.numel()];
                    if valid > 0 {
                        let x = logits.data();
                        let scale = g / valid as f64;
                        for (pos, &label) in target.data().iter().enumerate() {
                            if label == IGNORE_LABEL {
                                continue;
                            }
                            let lse = kernels::logsumexp_at(x, classes, positions, pos);
                            for k in 0..classes {
                                let p = (x[k * positions + pos] - lse).exp();
                                let onehot = if k as u32 == label { 1.0 } else { 0.0 };
                                dx[k * positions + pos] = scale * (p - onehot);
                            }
                        }
                    }
                    logits.accumulate_grad(&dx);
                }
            }

            Op::KlDiv { target_logits, logits, mask } => {
                let g = grad[0];
                let classes = logits.shape()[0];
                let positions = logits.numel() / classes;
                let selected = mask.iter().filter(|&&m| m).count();
                if selected == 0 {
                    if target_logits.is_tracked() {
                        target_logits.accumulate_grad(&vec![0.0; target_logits.numel()]);
                    }
                    if logits.is_tracked() {
                        logits.accumulate_grad(&vec![0.0; logits.numel()]);
                    }
                    return;
                }
                let scale = g / selected as f64;
                let p = target_logits.data();
                let q = logits.data();
                let mut dp = if target_logits.is_tracked() {
                    Some(vec![0.0; target_logits.numel()])
                } else {
                    None
                };
                let mut dq = if logits.is_tracked() {
                    Some(vec![0.0; logits.numel()])
                } else {
                    None
                };
                for pos in 0..positions {
                    if !mask[pos] {
                        continue;
                    }
                    let lse_p = kernels::logsumexp_at(p, classes, positions, pos);
                    let lse_q = kernels::logsumexp_at(q, classes, positions, pos);
                    if let Some(dq) = dq.as_mut() {
                        for k in 0..classes {
                            let pv = (p[k * positions + pos] - lse_p).exp();
                            let qv = (q[k * positions + pos] - lse_q).exp();
                            dq[k * positions + pos] = scale * (qv - pv);
                        }
                    }
                    if let Some(dp) = dp.as_mut() {
                        // d/dp_k of sum_c p_c (lp_c - lq_c) with p = softmax(p_logits):
                        // p_k * ((lp_k - lq_k) - kl_pos).
                        let mut kl_pos = 0.0;
                        for k in 0..classes {
                            let lp = p[k * positions + pos] - lse_p;
                            let lq = q[k * positions + pos] - lse_q;
                            kl_pos += lp.exp() * (lp - lq);
                        }
                        for k in 0..classes {
                            let lp = p[k * positions + pos] - lse_p;
                            let lq = q[k * positions + pos] - lse_q;
                            dp[k * positions + pos] = scale * lp.exp() * ((lp - lq) - kl_pos);
                        }
                    }
                }
                if let Some(dp) = dp {
                    target_logits.accumulate_grad(&dp);
                }
                if let Some(dq) = dq {
                    logits.accumulate_grad(&dq);
                }
            }
        }
    }
}
