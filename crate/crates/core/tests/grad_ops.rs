//! Central-difference checks for every differentiable primitive, plus the
//! composite chains the training step is built from.

use corrmatch_core::engine::{correlation_map, propagate};
use corrmatch_core::label::{LabelMap, IGNORE_LABEL};
use corrmatch_core::rng::{stream, Role};
use corrmatch_core::tensor::grad_check::{grad_check, DEFAULT_EPS};
use corrmatch_core::tensor::{kl_divergence, Tensor};
use rand::Rng;

const TOL: f64 = 1e-6;

fn rand_param(shape: &[usize], lo: f64, hi: f64, seed: u64, slot: u64) -> Tensor {
    let mut rng = stream(seed, 0, Role::ThresholdStream, slot);
    let data = (0..shape.iter().product::<usize>())
        .map(|_| rng.gen_range(lo..hi))
        .collect();
    Tensor::param(shape, data).unwrap()
}

/// Values bounded away from zero, for kink-free relu checks.
fn rand_param_off_zero(shape: &[usize], seed: u64, slot: u64) -> Tensor {
    let mut rng = stream(seed, 0, Role::ThresholdStream, slot);
    let data = (0..shape.iter().product::<usize>())
        .map(|_| {
            let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            sign * rng.gen_range(0.2..1.5)
        })
        .collect();
    Tensor::param(shape, data).unwrap()
}

/// Random-weighted sum: turns any tensor into a scalar while exercising
/// every output entry with a distinct gradient.
fn scalarize(x: &Tensor, seed: u64) -> corrmatch_core::Result<Tensor> {
    let n = x.numel();
    let mut rng = stream(seed, 1, Role::ThresholdStream, 0);
    let w = Tensor::leaf(&[n, 1], (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())?;
    x.reshape(&[1, n])?.matmul(&w)?.reshape(&[1])
}

fn assert_grad(
    f: impl Fn(&[Tensor]) -> corrmatch_core::Result<Tensor>,
    params: &[Tensor],
    what: &str,
) {
    let err = grad_check(&f, params, DEFAULT_EPS).unwrap();
    assert!(err <= TOL, "{what}: rel err {err}");
}

#[test]
fn add_mul_scale() {
    for seed in 0..4 {
        let a = rand_param(&[2, 3], -1.0, 1.0, seed, 0);
        let b = rand_param(&[2, 3], -1.0, 1.0, seed, 1);
        assert_grad(
            |p| scalarize(&p[0].add(&p[1])?.mul(&p[0])?.scale(-1.37), seed),
            &[a, b],
            "add/mul/scale",
        );
    }
}

#[test]
fn relu_away_from_kink() {
    for seed in 0..4 {
        let a = rand_param_off_zero(&[3, 4], seed, 0);
        assert_grad(|p| scalarize(&p[0].relu(), seed), &[a], "relu");
    }
}

#[test]
fn matmul_both_sides() {
    for seed in 0..4 {
        let a = rand_param(&[3, 4], -1.0, 1.0, seed, 0);
        let b = rand_param(&[4, 2], -1.0, 1.0, seed, 1);
        assert_grad(|p| scalarize(&p[0].matmul(&p[1])?, seed), &[a, b], "matmul");
    }
}

#[test]
fn transpose_and_reshape() {
    for seed in 0..4 {
        let a = rand_param(&[3, 5], -1.0, 1.0, seed, 0);
        assert_grad(|p| scalarize(&p[0].transpose()?, seed), &[a.clone()], "transpose");
        assert_grad(|p| scalarize(&p[0].reshape(&[5, 3])?, seed), &[a], "reshape");
    }
}

#[test]
fn softmax_every_axis() {
    for seed in 0..3 {
        let x = rand_param(&[3, 2, 4], -2.0, 2.0, seed, 0);
        for axis in 0..3 {
            assert_grad(
                |p| scalarize(&p[0].softmax(axis)?, seed),
                &[x.clone()],
                &format!("softmax axis {axis}"),
            );
        }
    }
}

#[test]
fn conv2d_stride_and_padding_combos() {
    for seed in 0..2 {
        for (stride, padding, kside) in [(1, 1, 3), (2, 1, 3), (1, 0, 1)] {
            let x = rand_param(&[2, 5, 5], -1.0, 1.0, seed, 0);
            let k = rand_param(&[3, 2, kside, kside], -0.8, 0.8, seed, 1);
            assert_grad(
                |p| scalarize(&p[0].conv2d(&p[1], stride, padding)?, seed),
                &[x, k],
                &format!("conv2d s{stride} p{padding} k{kside}"),
            );
        }
    }
}

#[test]
fn channel_bias_and_affine() {
    for seed in 0..3 {
        let x = rand_param(&[3, 2, 2], -1.0, 1.0, seed, 0);
        let g = rand_param(&[3], 0.5, 1.5, seed, 1);
        let b = rand_param(&[3], -0.5, 0.5, seed, 2);
        assert_grad(
            |p| scalarize(&p[0].channel_bias(&p[1])?, seed),
            &[x.clone(), b.clone()],
            "channel_bias",
        );
        assert_grad(
            |p| scalarize(&p[0].channel_affine(&p[1], &p[2])?, seed),
            &[x, g, b],
            "channel_affine",
        );
    }
}

#[test]
fn spatial_norm() {
    for seed in 0..3 {
        let x = rand_param(&[2, 4, 4], -1.0, 1.0, seed, 0);
        assert_grad(|p| scalarize(&p[0].spatial_norm()?, seed), &[x], "spatial_norm");
    }
}

#[test]
fn bilinear_resize_up_and_down() {
    for seed in 0..3 {
        let x = rand_param(&[2, 3, 4], -1.0, 1.0, seed, 0);
        assert_grad(
            |p| scalarize(&p[0].bilinear_resize(6, 8)?, seed),
            &[x.clone()],
            "bilinear up",
        );
        assert_grad(
            |p| scalarize(&p[0].bilinear_resize(2, 2)?, seed),
            &[x],
            "bilinear down",
        );
    }
}

#[test]
fn cross_entropy_with_ignored_pixels() {
    for seed in 0..4 {
        let logits = rand_param(&[3, 2, 2], -2.0, 2.0, seed, 0);
        let target =
            LabelMap::new(2, 2, vec![0, 2, IGNORE_LABEL, 1]).unwrap();
        assert_grad(|p| p[0].cross_entropy(&target), &[logits], "cross_entropy");
    }
}

#[test]
fn cross_entropy_all_ignored_has_zero_gradient() {
    let logits = rand_param(&[3, 2, 2], -2.0, 2.0, 0, 0);
    let target = LabelMap::filled(2, 2, IGNORE_LABEL);
    let loss = logits.cross_entropy(&target).unwrap();
    assert_eq!(loss.item(), 0.0);
    loss.backward().unwrap();
    assert!(logits.grad().unwrap().iter().all(|&g| g == 0.0));
}

#[test]
fn kl_divergence_both_sides() {
    for seed in 0..4 {
        let p = rand_param(&[3, 2, 2], -1.5, 1.5, seed, 0);
        let q = rand_param(&[3, 2, 2], -1.5, 1.5, seed, 1);
        let mask = vec![true, false, true, true];
        assert_grad(
            |ps| kl_divergence(&ps[0], &ps[1], &mask),
            &[p, q],
            "kl_divergence",
        );
    }
}

#[test]
fn kl_divergence_empty_mask_has_zero_gradient() {
    let p = rand_param(&[3, 2, 2], -1.5, 1.5, 1, 0);
    let q = rand_param(&[3, 2, 2], -1.5, 1.5, 1, 1);
    let loss = kl_divergence(&p, &q, &[false; 4]).unwrap();
    assert_eq!(loss.item(), 0.0);
    loss.backward().unwrap();
    assert!(p.grad().unwrap().iter().all(|&g| g == 0.0));
    assert!(q.grad().unwrap().iter().all(|&g| g == 0.0));
}

#[test]
fn encoder_style_chain() {
    // conv -> bias -> relu -> conv -> bias -> relu -> 1x1 conv -> resize -> CE
    for seed in 0..2 {
        let x = Tensor::leaf(
            &[2, 8, 8],
            {
                let mut rng = stream(seed, 0, Role::ThresholdStream, 9);
                (0..128).map(|_| rng.gen_range(0.0..1.0)).collect()
            },
        )
        .unwrap();
        let k1 = rand_param(&[4, 2, 3, 3], -0.5, 0.5, seed, 1);
        let b1 = rand_param(&[4], -0.2, 0.2, seed, 2);
        let k2 = rand_param(&[4, 4, 3, 3], -0.5, 0.5, seed, 3);
        let b2 = rand_param(&[4], -0.2, 0.2, seed, 4);
        let kc = rand_param(&[3, 4, 1, 1], -0.8, 0.8, seed, 5);
        let target = LabelMap::new(8, 8, {
            let mut rng = stream(seed, 0, Role::ThresholdStream, 10);
            (0..64).map(|_| rng.gen_range(0..3u32)).collect()
        })
        .unwrap();
        assert_grad(
            |p| {
                let h = x
                    .conv2d(&p[0], 2, 1)?
                    .channel_bias(&p[1])?
                    .relu()
                    .conv2d(&p[2], 2, 1)?
                    .channel_bias(&p[3])?
                    .relu();
                h.conv2d(&p[4], 1, 0)?.bilinear_resize(8, 8)?.cross_entropy(&target)
            },
            &[k1, b1, k2, b2, kc],
            "encoder chain",
        );
    }
}

#[test]
fn correlation_propagation_chain() {
    // Gradients through the correlation map into the embedding, both
    // projections, and the propagated logits.
    for seed in 0..2 {
        let (d, h, w, k) = (4, 2, 3, 3);
        let e = rand_param(&[d, h * w], -1.0, 1.0, seed, 0);
        let w1 = rand_param(&[d, d], -0.6, 0.6, seed, 1);
        let w2 = rand_param(&[d, d], -0.6, 0.6, seed, 2);
        let logits = rand_param(&[k, h, w], -1.5, 1.5, seed, 3);
        let target = LabelMap::new(h, w, {
            let mut rng = stream(seed, 0, Role::ThresholdStream, 11);
            (0..h * w).map(|_| rng.gen_range(0..k as u32)).collect()
        })
        .unwrap();
        assert_grad(
            |p| {
                let corr = correlation_map(&p[0], h, w, &p[1], &p[2])?;
                propagate(&p[3], &corr)?.cross_entropy(&target)
            },
            &[e, w1, w2, logits],
            "correlation chain",
        );
    }
}
