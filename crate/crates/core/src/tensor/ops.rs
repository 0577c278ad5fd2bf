//! Operation constructors: validate shapes, run the forward kernel, record
//! the node.

use std::rc::Rc;

use super::kernels;
use super::{Op, Tensor, NORM_EPS};
use crate::error::{Error, Result};
use crate::label::{LabelMap, IGNORE_LABEL};

impl Tensor {
    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        if self.shape() != rhs.shape() {
            return Err(shape_err("add", self, rhs));
        }
        let data = self
            .data()
            .iter()
            .zip(rhs.data())
            .map(|(a, b)| a + b)
            .collect();
        Ok(Tensor::new_op(
            self.shape().to_vec(),
            data,
            Op::Add(self.clone(), rhs.clone()),
        ))
    }

    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        if self.shape() != rhs.shape() {
            return Err(shape_err("mul", self, rhs));
        }
        let data = self
            .data()
            .iter()
            .zip(rhs.data())
            .map(|(a, b)| a * b)
            .collect();
        Ok(Tensor::new_op(
            self.shape().to_vec(),
            data,
            Op::Mul(self.clone(), rhs.clone()),
        ))
    }

    pub fn scale(&self, factor: f64) -> Tensor {
        let data = self.data().iter().map(|a| a * factor).collect();
        Tensor::new_op(self.shape().to_vec(), data, Op::Scale(self.clone(), factor))
    }

    pub fn relu(&self) -> Tensor {
        let data = self.data().iter().map(|a| a.max(0.0)).collect();
        Tensor::new_op(self.shape().to_vec(), data, Op::Relu(self.clone()))
    }

    /// (m x n) * (n x p) matrix product.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        let (a, b) = (self.shape(), rhs.shape());
        if a.len() != 2 || b.len() != 2 || a[1] != b[0] {
            return Err(shape_err("matmul", self, rhs));
        }
        let (m, n, p) = (a[0], a[1], b[1]);
        let data = kernels::matmul(self.data(), rhs.data(), m, n, p);
        Ok(Tensor::new_op(
            vec![m, p],
            data,
            Op::Matmul(self.clone(), rhs.clone()),
        ))
    }

    /// 2-D transpose.
    pub fn transpose(&self) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(Error::invalid(
                "transpose",
                format!("expected rank 2, got shape {s:?}"),
            ));
        }
        let (m, n) = (s[0], s[1]);
        let src = self.data();
        let mut data = vec![0.0; src.len()];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = src[i * n + j];
            }
        }
        Ok(Tensor::new_op(vec![n, m], data, Op::Transpose(self.clone())))
    }

    /// Same data, new shape with equal element count.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return Err(Error::invalid(
                "reshape",
                format!("cannot view {:?} as {shape:?}", self.shape()),
            ));
        }
        Ok(Tensor::new_op(
            shape.to_vec(),
            self.data().to_vec(),
            Op::Reshape(self.clone()),
        ))
    }

    /// Softmax along `axis` with per-fibre max subtraction. Each fibre of the
    /// output sums to 1.
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        let s = self.shape();
        if axis >= s.len() {
            return Err(Error::invalid(
                "softmax",
                format!("axis {axis} out of range for shape {s:?}"),
            ));
        }
        let (outer, len, inner) = axis_split(s, axis);
        let data = kernels::softmax_axis(self.data(), outer, len, inner);
        Ok(Tensor::new_op(
            s.to_vec(),
            data,
            Op::Softmax { input: self.clone(), axis },
        ))
    }

    /// 2-D cross-correlation of a (C_in, H, W) input with a
    /// (C_out, C_in, k, k) kernel, zero padding, square odd kernel.
    pub fn conv2d(&self, kernel: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
        let xs = self.shape();
        let ws = kernel.shape();
        if xs.len() != 3 || ws.len() != 4 {
            return Err(shape_err("conv2d", self, kernel));
        }
        let (c_in, h, w) = (xs[0], xs[1], xs[2]);
        let (c_out, kc, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        if kc != c_in {
            return Err(shape_err("conv2d", self, kernel));
        }
        if kh != kw || kh % 2 == 0 {
            return Err(Error::invalid(
                "conv2d",
                format!("kernel must be square with odd side, got {kh}x{kw}"),
            ));
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d", "stride must be positive".to_string()));
        }
        if kh > h + 2 * padding || kw > w + 2 * padding {
            return Err(Error::invalid(
                "conv2d",
                format!("kernel {kh}x{kw} larger than padded input {}x{}", h + 2 * padding, w + 2 * padding),
            ));
        }
        let out_h = (h + 2 * padding - kh) / stride + 1;
        let out_w = (w + 2 * padding - kw) / stride + 1;
        let data = kernels::conv2d_forward(
            self.data(),
            kernel.data(),
            c_in,
            h,
            w,
            c_out,
            kh,
            stride,
            padding,
            out_h,
            out_w,
        );
        Ok(Tensor::new_op(
            vec![c_out, out_h, out_w],
            data,
            Op::Conv2d { input: self.clone(), kernel: kernel.clone(), stride, padding },
        ))
    }

    /// Adds a per-channel bias to a (C, H, W) tensor.
    pub fn channel_bias(&self, bias: &Tensor) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 3 || bias.shape() != [s[0]] {
            return Err(shape_err("channel_bias", self, bias));
        }
        let plane = s[1] * s[2];
        let mut data = self.data().to_vec();
        for (c, b) in bias.data().iter().enumerate() {
            for v in &mut data[c * plane..(c + 1) * plane] {
                *v += b;
            }
        }
        Ok(Tensor::new_op(
            s.to_vec(),
            data,
            Op::ChannelBias { input: self.clone(), bias: bias.clone() },
        ))
    }

    /// Per-channel affine map `y = x * gain_c + bias_c` on a (C, H, W) tensor.
    pub fn channel_affine(&self, gain: &Tensor, bias: &Tensor) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 3 || gain.shape() != [s[0]] {
            return Err(shape_err("channel_affine", self, gain));
        }
        if bias.shape() != [s[0]] {
            return Err(shape_err("channel_affine", self, bias));
        }
        let plane = s[1] * s[2];
        let mut data = self.data().to_vec();
        for c in 0..s[0] {
            let (g, b) = (gain.data()[c], bias.data()[c]);
            for v in &mut data[c * plane..(c + 1) * plane] {
                *v = *v * g + b;
            }
        }
        Ok(Tensor::new_op(
            s.to_vec(),
            data,
            Op::ChannelAffine { input: self.clone(), gain: gain.clone(), bias: bias.clone() },
        ))
    }

    /// Normalizes each channel of a (C, H, W) tensor to zero mean and unit
    /// variance over its spatial positions.
    pub fn spatial_norm(&self) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 3 {
            return Err(Error::invalid(
                "spatial_norm",
                format!("expected rank 3, got shape {s:?}"),
            ));
        }
        let plane = s[1] * s[2];
        if plane == 0 {
            return Err(Error::invalid("spatial_norm", "empty spatial extent".to_string()));
        }
        let mut data = vec![0.0; self.numel()];
        for c in 0..s[0] {
            let x = &self.data()[c * plane..(c + 1) * plane];
            let (mean, var) = mean_var(x);
            let inv = 1.0 / (var + NORM_EPS).sqrt();
            for (o, v) in data[c * plane..(c + 1) * plane].iter_mut().zip(x) {
                *o = (v - mean) * inv;
            }
        }
        Ok(Tensor::new_op(s.to_vec(), data, Op::SpatialNorm(self.clone())))
    }

    /// Bilinear resample of a (C, H, W) tensor to (C, out_h, out_w), sampling
    /// at half-pixel centers (align_corners = false) with edge clamping.
    pub fn bilinear_resize(&self, out_h: usize, out_w: usize) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 3 {
            return Err(Error::invalid(
                "bilinear_resize",
                format!("expected rank 3, got shape {s:?}"),
            ));
        }
        if s[1] == 0 || s[2] == 0 || out_h == 0 || out_w == 0 {
            return Err(Error::invalid("bilinear_resize", "empty extent".to_string()));
        }
        let taps_y = kernels::bilinear_taps(s[1], out_h);
        let taps_x = kernels::bilinear_taps(s[2], out_w);
        let plane = s[1] * s[2];
        let mut data = Vec::with_capacity(s[0] * out_h * out_w);
        for c in 0..s[0] {
            data.extend(kernels::bilinear_plane(
                &self.data()[c * plane..(c + 1) * plane],
                s[2],
                &taps_y,
                &taps_x,
            ));
        }
        Ok(Tensor::new_op(
            vec![s[0], out_h, out_w],
            data,
            Op::BilinearResize(self.clone()),
        ))
    }

    /// Mean negative log-likelihood of `target` under the class softmax of a
    /// (classes, ...) tensor, skipping ignore pixels. Exactly 0 (with zero
    /// gradient) when every pixel is ignored.
    pub fn cross_entropy(&self, target: &LabelMap) -> Result<Tensor> {
        let s = self.shape();
        if s.is_empty() {
            return Err(Error::invalid("cross_entropy", "scalar logits".to_string()));
        }
        let classes = s[0];
        let positions: usize = s[1..].iter().product();
        if positions != target.len() {
            return Err(Error::invalid(
                "cross_entropy",
                format!(
                    "logits shape {s:?} covers {positions} positions, target has {}",
                    target.len()
                ),
            ));
        }
        let x = self.data();
        let mut sum = 0.0;
        let mut valid = 0usize;
        for (pos, &label) in target.data().iter().enumerate() {
            if label == IGNORE_LABEL {
                continue;
            }
            if label as usize >= classes {
                return Err(Error::LabelOutOfRange { label, classes });
            }
            let lse = kernels::logsumexp_at(x, classes, positions, pos);
            sum += lse - x[label as usize * positions + pos];
            valid += 1;
        }
        let value = if valid == 0 { 0.0 } else { sum / valid as f64 };
        Ok(Tensor::new_op(
            vec![1],
            vec![value],
            Op::CrossEntropy { logits: self.clone(), target: target.clone() },
        ))
    }
}

/// Mean over selected positions of KL(softmax(target_logits) || softmax(logits)),
/// computed per position over the class axis. Returns 0 on an empty mask.
/// Gradients flow into both logit tensors; detach the target side to use it
/// as a fixed distribution.
pub fn kl_divergence(target_logits: &Tensor, logits: &Tensor, mask: &[bool]) -> Result<Tensor> {
    if target_logits.shape() != logits.shape() {
        return Err(shape_err("kl_divergence", target_logits, logits));
    }
    let s = logits.shape();
    if s.is_empty() {
        return Err(Error::invalid("kl_divergence", "scalar logits".to_string()));
    }
    let classes = s[0];
    let positions: usize = s[1..].iter().product();
    if mask.len() != positions {
        return Err(Error::invalid(
            "kl_divergence",
            format!("mask covers {} positions, logits cover {positions}", mask.len()),
        ));
    }
    let p = target_logits.data();
    let q = logits.data();
    let mut sum = 0.0;
    let mut selected = 0usize;
    for pos in 0..positions {
        if !mask[pos] {
            continue;
        }
        let lse_p = kernels::logsumexp_at(p, classes, positions, pos);
        let lse_q = kernels::logsumexp_at(q, classes, positions, pos);
        let mut kl = 0.0;
        for k in 0..classes {
            let lp = p[k * positions + pos] - lse_p;
            let lq = q[k * positions + pos] - lse_q;
            kl += lp.exp() * (lp - lq);
        }
        sum += kl;
        selected += 1;
    }
    let value = if selected == 0 { 0.0 } else { sum / selected as f64 };
    Ok(Tensor::new_op(
        vec![1],
        vec![value],
        Op::KlDiv {
            target_logits: target_logits.clone(),
            logits: logits.clone(),
            mask: Rc::new(mask.to_vec()),
        },
    ))
}

/// Mean masked cross-entropy; free-function alias of [`Tensor::cross_entropy`].
pub fn masked_cross_entropy(logits: &Tensor, target: &LabelMap) -> Result<Tensor> {
    logits.cross_entropy(target)
}

pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let len = shape[axis];
    let inner = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

pub(crate) fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var)
}

fn shape_err(op: &'static str, lhs: &Tensor, rhs: &Tensor) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: lhs.shape().to_vec(),
        rhs: rhs.shape().to_vec(),
    }
}
