//! Forward-value checks of the tensor primitives against independent scalar
//! reference loops, plus a few hand-computed frozen cases.

use corrmatch_core::label::{LabelMap, IGNORE_LABEL};
use corrmatch_core::rng::{stream, Role};
use corrmatch_core::tensor::{kl_divergence, Tensor};
use rand::Rng;

const TOL: f64 = 1e-12;

fn rand_vec(n: usize, lo: f64, hi: f64, slot: u64) -> Vec<f64> {
    let mut rng = stream(90, 0, Role::ThresholdStream, slot);
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

fn assert_close(got: &[f64], want: &[f64], what: &str) {
    assert_eq!(got.len(), want.len(), "{what}: length mismatch");
    for (i, (g, w)) in got.iter().zip(want).enumerate() {
        assert!(
            (g - w).abs() <= TOL * (1.0 + w.abs()),
            "{what}: entry {i} got {g}, want {w}"
        );
    }
}

fn logsumexp(fibre: &[f64]) -> f64 {
    let m = fibre.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + fibre.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

#[test]
fn matmul_matches_triple_loop() {
    let (m, n, p) = (5, 7, 4);
    let a = rand_vec(m * n, -2.0, 2.0, 0);
    let b = rand_vec(n * p, -2.0, 2.0, 1);
    let mut want = vec![0.0; m * p];
    for i in 0..m {
        for j in 0..p {
            let mut s = 0.0;
            for k in 0..n {
                s += a[i * n + k] * b[k * p + j];
            }
            want[i * p + j] = s;
        }
    }
    let got = Tensor::leaf(&[m, n], a)
        .unwrap()
        .matmul(&Tensor::leaf(&[n, p], b).unwrap())
        .unwrap();
    assert_eq!(got.shape(), &[m, p]);
    assert_close(got.data(), &want, "matmul");
}

#[test]
fn matmul_frozen_value() {
    let a = Tensor::leaf(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let b = Tensor::leaf(&[2, 2], vec![5.0, 6.0, 7.0, 8.0]).unwrap();
    assert_eq!(a.matmul(&b).unwrap().data(), &[19.0, 22.0, 43.0, 50.0]);
}

#[test]
fn softmax_matches_scalar_reference() {
    let shape = [2, 3, 4];
    let x = rand_vec(24, -3.0, 3.0, 2);
    for axis in 0..3 {
        let got = Tensor::leaf(&shape, x.clone()).unwrap().softmax(axis).unwrap();
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut want = vec![0.0; 24];
        for o in 0..outer {
            for i in 0..inner {
                let fibre: Vec<f64> =
                    (0..len).map(|a| x[o * len * inner + a * inner + i]).collect();
                let lse = logsumexp(&fibre);
                for (a, v) in fibre.iter().enumerate() {
                    want[o * len * inner + a * inner + i] = (v - lse).exp();
                }
            }
        }
        assert_close(got.data(), &want, &format!("softmax axis {axis}"));
    }
}

#[test]
fn softmax_frozen_value() {
    let x = Tensor::leaf(&[2], vec![0.0, 1.0]).unwrap();
    let y = x.softmax(0).unwrap();
    assert_close(
        y.data(),
        &[0.268_941_421_369_995_1, 0.731_058_578_630_004_9],
        "softmax frozen",
    );
}

#[test]
fn softmax_survives_large_inputs() {
    let x = Tensor::leaf(&[3], vec![1000.0, 1000.0, 500.0]).unwrap();
    let y = x.softmax(0).unwrap();
    assert_close(y.data(), &[0.5, 0.5, 0.0], "softmax overflow guard");
}

#[test]
fn cross_entropy_matches_scalar_reference() {
    let (k, h, w) = (4, 3, 5);
    let x = rand_vec(k * h * w, -3.0, 3.0, 3);
    let mut rng = stream(90, 0, Role::ThresholdStream, 4);
    let labels: Vec<u32> = (0..h * w)
        .map(|_| {
            if rng.gen_bool(0.25) {
                IGNORE_LABEL
            } else {
                rng.gen_range(0..k as u32)
            }
        })
        .collect();
    let target = LabelMap::new(h, w, labels.clone()).unwrap();
    let got = Tensor::leaf(&[k, h, w], x.clone()).unwrap().cross_entropy(&target).unwrap();

    let positions = h * w;
    let mut sum = 0.0;
    let mut valid = 0;
    for (pos, &label) in labels.iter().enumerate() {
        if label == IGNORE_LABEL {
            continue;
        }
        let fibre: Vec<f64> = (0..k).map(|c| x[c * positions + pos]).collect();
        sum += logsumexp(&fibre) - fibre[label as usize];
        valid += 1;
    }
    assert!(valid > 0);
    assert_close(got.data(), &[sum / valid as f64], "cross_entropy");
}

#[test]
fn cross_entropy_frozen_values() {
    // Uniform two-class logits: loss is ln 2 regardless of the target.
    let x = Tensor::leaf(&[2, 1, 1], vec![0.0, 0.0]).unwrap();
    let t = LabelMap::new(1, 1, vec![0]).unwrap();
    assert_close(x.cross_entropy(&t).unwrap().data(), &[2.0f64.ln()], "uniform");

    // Logits (1, 0) with target 0: ln(1 + e^-1).
    let x = Tensor::leaf(&[2, 1, 1], vec![1.0, 0.0]).unwrap();
    assert_close(
        x.cross_entropy(&t).unwrap().data(),
        &[0.313_261_687_518_222_8],
        "shifted",
    );
}

#[test]
fn kl_matches_scalar_reference() {
    let (k, n) = (3, 10);
    let p_logits = rand_vec(k * n, -2.0, 2.0, 5);
    let q_logits = rand_vec(k * n, -2.0, 2.0, 6);
    let mut rng = stream(90, 0, Role::ThresholdStream, 7);
    let mask: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.6)).collect();
    let got = kl_divergence(
        &Tensor::leaf(&[k, n], p_logits.clone()).unwrap(),
        &Tensor::leaf(&[k, n], q_logits.clone()).unwrap(),
        &mask,
    )
    .unwrap();

    let mut sum = 0.0;
    let mut selected = 0;
    for pos in 0..n {
        if !mask[pos] {
            continue;
        }
        let pf: Vec<f64> = (0..k).map(|c| p_logits[c * n + pos]).collect();
        let qf: Vec<f64> = (0..k).map(|c| q_logits[c * n + pos]).collect();
        let (lp, lq) = (logsumexp(&pf), logsumexp(&qf));
        for c in 0..k {
            let log_p = pf[c] - lp;
            sum += log_p.exp() * (log_p - (qf[c] - lq));
        }
        selected += 1;
    }
    assert!(selected > 0);
    assert_close(got.data(), &[sum / selected as f64], "kl_divergence");
}

#[test]
fn kl_frozen_value() {
    // p = (1/4, 3/4) against q = (1/2, 1/2):
    // KL = 1/4 ln(1/2) + 3/4 ln(3/2).
    let p = Tensor::leaf(&[2, 1], vec![0.0, 3.0f64.ln()]).unwrap();
    let q = Tensor::leaf(&[2, 1], vec![0.0, 0.0]).unwrap();
    let want = 0.25 * 0.5f64.ln() + 0.75 * 1.5f64.ln();
    assert_close(kl_divergence(&p, &q, &[true]).unwrap().data(), &[want], "kl frozen");
}

#[test]
fn conv2d_matches_direct_loop() {
    let (cin, h, w) = (3, 7, 6);
    let cout = 4;
    let x = rand_vec(cin * h * w, -1.0, 1.0, 8);
    let k = rand_vec(cout * cin * 9, -1.0, 1.0, 9);
    for &stride in &[1usize, 2] {
        for &padding in &[0usize, 1] {
            let out_h = (h + 2 * padding - 3) / stride + 1;
            let out_w = (w + 2 * padding - 3) / stride + 1;
            let mut want = vec![0.0; cout * out_h * out_w];
            for oc in 0..cout {
                for oy in 0..out_h {
                    for ox in 0..out_w {
                        let mut s = 0.0;
                        for ic in 0..cin {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let iy = (oy * stride + ky) as isize - padding as isize;
                                    let ix = (ox * stride + kx) as isize - padding as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    s += x[(ic * h + iy as usize) * w + ix as usize]
                                        * k[((oc * cin + ic) * 3 + ky) * 3 + kx];
                                }
                            }
                        }
                        want[(oc * out_h + oy) * out_w + ox] = s;
                    }
                }
            }
            let got = Tensor::leaf(&[cin, h, w], x.clone())
                .unwrap()
                .conv2d(&Tensor::leaf(&[cout, cin, 3, 3], k.clone()).unwrap(), stride, padding)
                .unwrap();
            assert_eq!(got.shape(), &[cout, out_h, out_w]);
            assert_close(got.data(), &want, &format!("conv2d s{stride} p{padding}"));
        }
    }
}

#[test]
fn conv2d_frozen_values() {
    // 1x1 kernel reduces to a per-pixel channel dot product.
    let x = Tensor::leaf(&[2, 1, 1], vec![5.0, 7.0]).unwrap();
    let k = Tensor::leaf(&[1, 2, 1, 1], vec![2.0, 3.0]).unwrap();
    assert_eq!(x.conv2d(&k, 1, 0).unwrap().data(), &[31.0]);

    // All-ones 3x3 kernel over a 3x3 input sums every pixel.
    let x = Tensor::leaf(&[1, 3, 3], (1..=9).map(f64::from).collect()).unwrap();
    let k = Tensor::leaf(&[1, 1, 3, 3], vec![1.0; 9]).unwrap();
    assert_eq!(x.conv2d(&k, 1, 0).unwrap().data(), &[45.0]);
}

#[test]
fn bilinear_matches_scalar_reference() {
    let (c, h, w) = (2, 5, 4);
    let x = rand_vec(c * h * w, -2.0, 2.0, 10);
    for &(oh, ow) in &[(7usize, 3usize), (2, 9), (5, 4)] {
        let got = Tensor::leaf(&[c, h, w], x.clone()).unwrap().bilinear_resize(oh, ow).unwrap();
        let coord = |o: usize, out: usize, inp: usize| -> (usize, usize, f64) {
            let src = ((o as f64 + 0.5) * inp as f64 / out as f64 - 0.5)
                .clamp(0.0, (inp - 1) as f64);
            let i0 = src.floor() as usize;
            (i0, (i0 + 1).min(inp - 1), src - i0 as f64)
        };
        let mut want = vec![0.0; c * oh * ow];
        for ch in 0..c {
            for oy in 0..oh {
                let (y0, y1, ty) = coord(oy, oh, h);
                for ox in 0..ow {
                    let (x0, x1, tx) = coord(ox, ow, w);
                    let at = |y: usize, xx: usize| x[(ch * h + y) * w + xx];
                    let top = at(y0, x0) * (1.0 - tx) + at(y0, x1) * tx;
                    let bot = at(y1, x0) * (1.0 - tx) + at(y1, x1) * tx;
                    want[(ch * oh + oy) * ow + ox] = top * (1.0 - ty) + bot * ty;
                }
            }
        }
        assert_close(got.data(), &want, &format!("bilinear {oh}x{ow}"));
    }
}

#[test]
fn bilinear_frozen_values() {
    let x = Tensor::leaf(&[1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
    // Downsample to one pixel: plain average of the four corners.
    assert_close(x.bilinear_resize(1, 1).unwrap().data(), &[1.5], "2x2 -> 1x1");
    // Upsample to 3x3: edge rows/columns clamp, the center interpolates.
    assert_close(
        x.bilinear_resize(3, 3).unwrap().data(),
        &[0.0, 0.5, 1.0, 1.0, 1.5, 2.0, 2.0, 2.5, 3.0],
        "2x2 -> 3x3",
    );
    // Identity resize returns the input values.
    assert_close(x.bilinear_resize(2, 2).unwrap().data(), x.data(), "identity");
}

#[test]
fn spatial_norm_matches_scalar_reference() {
    let (c, h, w) = (3, 4, 5);
    let x = rand_vec(c * h * w, -2.0, 5.0, 11);
    let got = Tensor::leaf(&[c, h, w], x.clone()).unwrap().spatial_norm().unwrap();
    let plane = h * w;
    let mut want = vec![0.0; c * plane];
    for ch in 0..c {
        let slice = &x[ch * plane..(ch + 1) * plane];
        let mean = slice.iter().sum::<f64>() / plane as f64;
        let var = slice.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / plane as f64;
        let inv = 1.0 / (var + 1e-8).sqrt();
        for (o, v) in want[ch * plane..(ch + 1) * plane].iter_mut().zip(slice) {
            *o = (v - mean) * inv;
        }
    }
    assert_close(got.data(), &want, "spatial_norm");

    for ch in 0..c {
        let slice = &got.data()[ch * plane..(ch + 1) * plane];
        let mean = slice.iter().sum::<f64>() / plane as f64;
        let var = slice.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / plane as f64;
        assert!(mean.abs() < 1e-12, "channel {ch} mean {mean}");
        assert!((var - 1.0).abs() < 1e-6, "channel {ch} var {var}");
    }
}

#[test]
fn channel_ops_match_reference() {
    let (c, h, w) = (3, 2, 4);
    let x = rand_vec(c * h * w, -1.0, 1.0, 12);
    let bias = rand_vec(c, -1.0, 1.0, 13);
    let gain = rand_vec(c, 0.5, 1.5, 14);
    let xt = Tensor::leaf(&[c, h, w], x.clone()).unwrap();
    let bt = Tensor::leaf(&[c], bias.clone()).unwrap();
    let gt = Tensor::leaf(&[c], gain.clone()).unwrap();

    let plane = h * w;
    let want_bias: Vec<f64> =
        (0..c * plane).map(|i| x[i] + bias[i / plane]).collect();
    assert_close(xt.channel_bias(&bt).unwrap().data(), &want_bias, "channel_bias");

    let want_affine: Vec<f64> =
        (0..c * plane).map(|i| x[i] * gain[i / plane] + bias[i / plane]).collect();
    assert_close(
        xt.channel_affine(&gt, &bt).unwrap().data(),
        &want_affine,
        "channel_affine",
    );
}

#[test]
fn transpose_and_reshape_values() {
    let (m, n) = (3, 5);
    let x = rand_vec(m * n, -1.0, 1.0, 15);
    let xt = Tensor::leaf(&[m, n], x.clone()).unwrap();

    let t = xt.transpose().unwrap();
    assert_eq!(t.shape(), &[n, m]);
    for i in 0..m {
        for j in 0..n {
            assert_eq!(t.data()[j * m + i], x[i * n + j]);
        }
    }

    let r = xt.reshape(&[n, m]).unwrap();
    assert_eq!(r.shape(), &[n, m]);
    assert_eq!(r.data(), &x[..]);
}

#[test]
fn relu_add_mul_scale_values() {
    let x = Tensor::leaf(&[4], vec![-2.0, -0.5, 0.0, 1.5]).unwrap();
    assert_eq!(x.relu().data(), &[0.0, 0.0, 0.0, 1.5]);

    let a = Tensor::leaf(&[2], vec![1.0, 2.0]).unwrap();
    let b = Tensor::leaf(&[2], vec![3.0, -4.0]).unwrap();
    assert_eq!(a.add(&b).unwrap().data(), &[4.0, -2.0]);
    assert_eq!(a.mul(&b).unwrap().data(), &[3.0, -8.0]);
    assert_eq!(a.scale(-0.5).data(), &[-0.5, -1.0]);
}
