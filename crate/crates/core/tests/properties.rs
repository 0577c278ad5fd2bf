//! Randomized invariant checks for the filtering, threshold, propagation,
//! and augmentation layers.

use corrmatch_core::augment::{
    apply_geometry_label, sample_cutmix, sample_geometry, CutMixConfig, WeakAugmentConfig,
};
use corrmatch_core::engine::{
    confidence_and_pseudo, correlation_map, filter_map, poly_lr, propagate, ThresholdState,
};
use corrmatch_core::label::{LabelMap, IGNORE_LABEL};
use corrmatch_core::metrics::IoUAccumulator;
use corrmatch_core::rng::{stream, Role};
use corrmatch_core::tensor::Tensor;
use proptest::prelude::*;

fn unit_vec(max_len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0..=1.0f64, 1..max_len)
}

proptest! {
    #[test]
    fn raising_the_threshold_only_removes_pixels(
        conf in unit_vec(64),
        t1 in 0.0..=1.0f64,
        t2 in 0.0..=1.0f64,
    ) {
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        let n = conf.len();
        let loose = filter_map(&conf, 1, n, lo).unwrap();
        let tight = filter_map(&conf, 1, n, hi).unwrap();
        for (a, b) in tight.data().iter().zip(loose.data()) {
            prop_assert!(!a || *b, "pixel kept at {hi} but dropped at {lo}");
        }
        prop_assert!(tight.count_true() <= loose.count_true());
    }

    #[test]
    fn threshold_stays_inside_the_unit_interval(
        tau0 in 0.0..=1.0f64,
        momentum in 0.5..0.999f64,
        proposals in unit_vec(40),
    ) {
        let mut state = ThresholdState::relaxed_global(tau0, momentum).unwrap();
        for &p in &proposals {
            state.update(p).unwrap();
            prop_assert!((0.0..=1.0).contains(&state.value()));
            let floor = proposals.iter().cloned().fold(tau0, f64::min);
            let ceil = proposals.iter().cloned().fold(tau0, f64::max);
            prop_assert!(state.value() >= floor - 1e-12 && state.value() <= ceil + 1e-12);
        }
        prop_assert_eq!(state.updates(), proposals.len() as u64);
    }

    #[test]
    fn constant_proposals_follow_the_closed_form(
        tau0 in 0.0..=1.0f64,
        momentum in 0.5..0.999f64,
        p in 0.0..=1.0f64,
        updates in 1usize..200,
    ) {
        let mut state = ThresholdState::relaxed_global(tau0, momentum).unwrap();
        for _ in 0..updates {
            state.update(p).unwrap();
        }
        // The first update pins tau0, so only updates - 1 EMA steps happened.
        let decay = momentum.powi(updates as i32 - 1);
        let want = decay * tau0 + (1.0 - decay) * p;
        prop_assert!((state.value() - want).abs() < 1e-9,
            "value {} vs closed form {}", state.value(), want);
    }

    #[test]
    fn fixed_threshold_never_moves(
        tau in 0.0..=1.0f64,
        proposals in unit_vec(20),
    ) {
        let mut state = ThresholdState::fixed(tau).unwrap();
        for &p in &proposals {
            state.update(p).unwrap();
            prop_assert_eq!(state.value(), tau);
        }
        prop_assert_eq!(state.updates(), proposals.len() as u64);
    }

    #[test]
    fn poly_schedule_decays_from_base_to_zero(
        base in 0.001..1.0f64,
        total in 1u64..500,
    ) {
        prop_assert_eq!(poly_lr(base, 0, total, 0.9), base);
        prop_assert_eq!(poly_lr(base, total, total, 0.9), 0.0);
        let mut prev = base;
        for iter in 1..=total.min(50) {
            let lr = poly_lr(base, iter, total, 0.9);
            prop_assert!(lr <= prev + 1e-15 && lr >= 0.0);
            prev = lr;
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn propagated_logits_stay_in_the_class_hull(
        logits_data in prop::collection::vec(-3.0..3.0f64, 3 * 64),
        emb_data in prop::collection::vec(-1.0..1.0f64, 4 * 4),
        p1_data in prop::collection::vec(-1.0..1.0f64, 16),
        p2_data in prop::collection::vec(-1.0..1.0f64, 16),
    ) {
        let (classes, big, small) = (3usize, 8usize, 2usize);
        let logits = Tensor::leaf(&[classes, big, big], logits_data).unwrap();
        let embedding = Tensor::leaf(&[4, small * small], emb_data).unwrap();
        let p1 = Tensor::leaf(&[4, 4], p1_data).unwrap();
        let p2 = Tensor::leaf(&[4, 4], p2_data).unwrap();
        let corr = correlation_map(&embedding, small, small, &p1, &p2).unwrap();
        let z = propagate(&logits, &corr).unwrap();
        prop_assert_eq!(z.shape(), &[classes, small * small]);

        let resized = logits.bilinear_resize(small, small).unwrap();
        let cells = small * small;
        for k in 0..classes {
            let row = &resized.data()[k * cells..(k + 1) * cells];
            let lo = row.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            for (j, v) in z.data()[k * cells..(k + 1) * cells].iter().enumerate() {
                prop_assert!(*v >= lo - 1e-9 && *v <= hi + 1e-9,
                    "class {k} cell {j}: {v} outside [{lo}, {hi}]");
            }
        }
    }

    #[test]
    fn propagation_preserves_constant_class_planes(
        values in prop::collection::vec(-2.0..2.0f64, 3),
        emb_data in prop::collection::vec(-1.0..1.0f64, 4 * 9),
    ) {
        // Each class plane is constant, so any convex combination of cells
        // must reproduce the constant exactly up to rounding.
        let (big, small) = (12usize, 3usize);
        let mut logits_data = Vec::with_capacity(3 * big * big);
        for v in &values {
            logits_data.extend(std::iter::repeat(*v).take(big * big));
        }
        let logits = Tensor::leaf(&[3, big, big], logits_data).unwrap();
        let embedding = Tensor::leaf(&[4, small * small], emb_data).unwrap();
        let eye = |n: usize| {
            let mut d = vec![0.0; n * n];
            for i in 0..n {
                d[i * n + i] = 1.0;
            }
            Tensor::leaf(&[n, n], d).unwrap()
        };
        let corr = correlation_map(&embedding, small, small, &eye(4), &eye(4)).unwrap();
        let z = propagate(&logits, &corr).unwrap();
        let cells = small * small;
        for (k, v) in values.iter().enumerate() {
            for got in &z.data()[k * cells..(k + 1) * cells] {
                prop_assert!((got - v).abs() < 1e-9, "class {k}: {got} vs constant {v}");
            }
        }
    }

    #[test]
    fn softmax_fibres_are_distributions(
        data in prop::collection::vec(-6.0..6.0f64, 2 * 3 * 4),
        axis in 0usize..3,
    ) {
        let y = Tensor::leaf(&[2, 3, 4], data).unwrap().softmax(axis).unwrap();
        prop_assert!(y.data().iter().all(|v| *v > 0.0 && *v <= 1.0));
        let shape = [2usize, 3, 4];
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        for o in 0..outer {
            for i in 0..inner {
                let sum: f64 =
                    (0..len).map(|a| y.data()[o * len * inner + a * inner + i]).sum();
                prop_assert!((sum - 1.0).abs() < 1e-12, "fibre sums to {sum}");
            }
        }
    }

    #[test]
    fn confidence_is_the_top_softmax_probability(
        data in prop::collection::vec(-4.0..4.0f64, 3 * 2 * 2),
    ) {
        let logits = Tensor::leaf(&[3, 2, 2], data).unwrap();
        let (conf, pseudo) = confidence_and_pseudo(&logits).unwrap();
        let probs = logits.softmax(0).unwrap();
        for pos in 0..4 {
            let fibre: Vec<f64> = (0..3).map(|k| probs.data()[k * 4 + pos]).collect();
            let best = fibre.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!((conf[pos] - best).abs() < 1e-12);
            prop_assert!(conf[pos] > 0.0 && conf[pos] <= 1.0);
            let label = pseudo.data()[pos] as usize;
            prop_assert!((fibre[label] - best).abs() < 1e-15, "pseudo misses the argmax");
        }
    }

    #[test]
    fn cutmix_regions_fit_and_respect_the_area_band(
        batch in 2usize..6,
        h in 8usize..40,
        w in 8usize..40,
        area_min in 0.1..0.3f64,
        span in 0.15..0.3f64,
        seed in 0u64..1000,
    ) {
        let cfg = CutMixConfig { prob: 1.0, area_min, area_max: area_min + span };
        let mut rng = stream(seed, 0, Role::CutMix, 0);
        let assignments = sample_cutmix(batch, h, w, &cfg, &mut rng);
        prop_assert_eq!(assignments.len(), batch);
        let lo = (cfg.area_min * (h * w) as f64).ceil() as usize;
        let hi = (cfg.area_max * (h * w) as f64).floor() as usize;
        for (i, a) in assignments.iter().enumerate() {
            let a = a.unwrap();
            prop_assert!(a.donor != i && a.donor < batch);
            prop_assert!(a.region.y + a.region.h <= h);
            prop_assert!(a.region.x + a.region.w <= w);
            prop_assert!(a.region.area() >= lo && a.region.area() <= hi,
                "area {} outside [{lo}, {hi}]", a.region.area());
        }
    }

    #[test]
    fn weak_geometry_never_invents_labels(
        seed in 0u64..1000,
        labels in prop::collection::vec(0u32..5, 16 * 16),
    ) {
        let label = LabelMap::new(16, 16, labels.clone()).unwrap();
        let cfg = WeakAugmentConfig::default();
        let mut rng = stream(seed, 0, Role::WeakLabeled, 0);
        let rec = sample_geometry(16, 16, &cfg, &mut rng);
        let out = apply_geometry_label(&label, &rec).unwrap();
        prop_assert_eq!(out.height(), 16);
        prop_assert_eq!(out.width(), 16);
        for v in out.data() {
            prop_assert!(*v == IGNORE_LABEL || labels.contains(v),
                "label {v} not present in the source grid");
        }
    }

    #[test]
    fn miou_is_bounded_and_exact_on_identical_maps(
        pred in prop::collection::vec(0u32..4, 36),
        gt in prop::collection::vec(0u32..4, 36),
    ) {
        let pred_map = LabelMap::new(6, 6, pred).unwrap();
        let gt_map = LabelMap::new(6, 6, gt).unwrap();
        let mut acc = IoUAccumulator::new(4);
        acc.add(&pred_map, &gt_map).unwrap();
        let miou = acc.mean_iou();
        prop_assert!((0.0..=1.0).contains(&miou));

        let mut same = IoUAccumulator::new(4);
        same.add(&gt_map, &gt_map).unwrap();
        prop_assert_eq!(same.mean_iou(), 1.0);
    }
}
