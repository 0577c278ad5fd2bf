//! One training step: view construction, the weak pseudo-label pass,
//! threshold bookkeeping, branch losses, and the parameter update.
//!
//! The step is factored so the losses are a pure function of the parameters
//! once views and targets are fixed: `prepare_views` draws every random
//! decision, `pseudo_stage`/`build_targets` freeze the (detached) targets,
//! and `compute_losses` only ever reads parameters through fresh forward
//! passes. Gradient checks rebuild the loss through the same three stages
//! with the first two held constant.

use crate::augment::{
    apply_cutmix_images, apply_cutmix_labels, apply_cutmix_fields, apply_cutmix_masks,
    apply_geometry_image, apply_geometry_label, sample_cutmix, sample_geometry, strong_augment,
    CutMixAssignment, CutMixConfig, StrongAugmentConfig, WeakAugmentConfig,
};
use crate::data::{Image, Sample};
use crate::engine::correlation::{correlation_map, propagate};
use crate::engine::losses::{batch_mean, LossBreakdown, LossWeights};
use crate::engine::optim::{poly_lr, SgdMomentum, POLY_POWER};
use crate::engine::threshold::{
    confidence_and_pseudo, filter_map_with, per_class_max_confidence,
    propose_threshold_increment, ThresholdMode, ThresholdState,
};
use crate::error::{Error, Result};
use crate::label::{nearest_downsample, LabelMap, Mask};
use crate::metrics::{diagnostic_ratios, mining_ratio, StepDiagnostics};
use crate::model::{
    channel_dropout, classify, encode, extract, sample_dropout_mask, ModelParams, ParamTensors,
    DOWNSAMPLE,
};
use crate::rng::{stream, Role};
use crate::tensor::{kl_divergence, Tensor};

#[derive(Debug, Clone)]
pub struct EngineConfig {
    pub classes: usize,
    pub feature_dim: usize,
    pub weights: LossWeights,
    pub use_soft_loss: bool,
    pub use_corr_loss: bool,
    pub use_feature_perturb: bool,
    pub use_cutmix: bool,
    pub supervised_only: bool,
    pub weak: WeakAugmentConfig,
    pub strong: StrongAugmentConfig,
    pub cutmix: CutMixConfig,
    pub base_lr: f64,
    pub momentum: f64,
    pub total_iters: u64,
    pub seed: u64,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            classes: 4,
            feature_dim: 16,
            weights: LossWeights::default(),
            use_soft_loss: true,
            use_corr_loss: true,
            use_feature_perturb: true,
            use_cutmix: true,
            supervised_only: false,
            weak: WeakAugmentConfig::default(),
            strong: StrongAugmentConfig::default(),
            cutmix: CutMixConfig::default(),
            base_lr: 0.05,
            momentum: 0.9,
            total_iters: 3000,
            seed: 0,
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |msg: String| Err(Error::invalid("EngineConfig", msg));
        if self.classes < 2 {
            return err("need at least two classes".to_string());
        }
        if self.feature_dim == 0 {
            return err("feature_dim must be positive".to_string());
        }
        self.weights.validate()?;
        if !self.base_lr.is_finite() || self.base_lr < 0.0 {
            return err(format!("base_lr {} must be finite and non-negative", self.base_lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return err(format!("momentum {} must lie in [0, 1)", self.momentum));
        }
        if self.total_iters == 0 {
            return err("total_iters must be at least 1".to_string());
        }
        Ok(())
    }
}

/// All param-independent step inputs: augmented views, frozen random
/// decisions, and evaluation-only ground truth aligned with the weak views.
pub struct StepViews {
    pub labeled_images: Vec<Image>,
    pub labeled_targets: Vec<LabelMap>,
    pub weak_images: Vec<Image>,
    pub strong_images: Vec<Image>,
    pub unlabeled_gt: Vec<LabelMap>,
    pub dropout_masks: Vec<Vec<bool>>,
    pub cutmix: Vec<Option<CutMixAssignment>>,
}

/// Draws every random decision of one step and materializes the views.
/// Each decision has its own stream, so e.g. the labeled branch draws the
/// same values whether or not the unlabeled branch exists.
pub fn prepare_views(
    labeled: &[&Sample],
    unlabeled: &[&Sample],
    iteration: u64,
    cfg: &EngineConfig,
) -> Result<StepViews> {
    if labeled.is_empty() {
        return Err(Error::invalid("prepare_views", "labeled batch is empty"));
    }
    let mut labeled_images = Vec::with_capacity(labeled.len());
    let mut labeled_targets = Vec::with_capacity(labeled.len());
    for (i, sample) in labeled.iter().enumerate() {
        let target = sample.label().ok_or_else(|| {
            Error::invalid("prepare_views", format!("sample {} is not labeled", sample.id))
        })?;
        let mut rng = stream(cfg.seed, iteration, Role::WeakLabeled, i as u64);
        let rec = sample_geometry(sample.image.height(), sample.image.width(), &cfg.weak, &mut rng);
        labeled_images.push(apply_geometry_image(&sample.image, &rec)?);
        labeled_targets.push(apply_geometry_label(target, &rec)?);
    }

    let mut weak_images = Vec::with_capacity(unlabeled.len());
    let mut strong_images = Vec::with_capacity(unlabeled.len());
    let mut unlabeled_gt = Vec::with_capacity(unlabeled.len());
    let mut dropout_masks = Vec::new();
    for (i, sample) in unlabeled.iter().enumerate() {
        let mut rng = stream(cfg.seed, iteration, Role::WeakUnlabeled, i as u64);
        let rec = sample_geometry(sample.image.height(), sample.image.width(), &cfg.weak, &mut rng);
        let weak = apply_geometry_image(&sample.image, &rec)?;
        unlabeled_gt.push(apply_geometry_label(sample.eval_label(), &rec)?);

        let mut rng = stream(cfg.seed, iteration, Role::StrongPhotometric, i as u64);
        strong_images.push(strong_augment(&weak, &cfg.strong, &mut rng));
        weak_images.push(weak);

        if cfg.use_feature_perturb {
            let mut rng = stream(cfg.seed, iteration, Role::FeatureDropout, i as u64);
            dropout_masks.push(sample_dropout_mask(cfg.feature_dim, &mut rng));
        }
    }

    let cutmix = if cfg.use_cutmix && !unlabeled.is_empty() {
        let (h, w) = (weak_images[0].height(), weak_images[0].width());
        let mut rng = stream(cfg.seed, iteration, Role::CutMix, 0);
        let assignments = sample_cutmix(unlabeled.len(), h, w, &cfg.cutmix, &mut rng);
        apply_cutmix_images(&mut strong_images, &assignments);
        assignments
    } else {
        vec![None; unlabeled.len()]
    };

    Ok(StepViews {
        labeled_images,
        labeled_targets,
        weak_images,
        strong_images,
        unlabeled_gt,
        dropout_masks,
        cutmix,
    })
}

/// Tracked weak-branch forward results. Embeddings are computed only when
/// the correlation loss will consume them.
pub struct WeakForward {
    pub features: Vec<Tensor>,
    pub logits: Vec<Tensor>,
    pub embeddings: Vec<Tensor>,
}

pub fn forward_weak(
    t: &ParamTensors,
    views: &StepViews,
    need_embeddings: bool,
) -> Result<WeakForward> {
    let mut features = Vec::with_capacity(views.weak_images.len());
    let mut logits = Vec::with_capacity(views.weak_images.len());
    let mut embeddings = Vec::new();
    for image in &views.weak_images {
        let feature = encode(t, &image.to_tensor())?;
        logits.push(classify(t, &feature, image.height(), image.width())?);
        if need_embeddings {
            embeddings.push(extract(t, &feature)?);
        }
        features.push(feature);
    }
    Ok(WeakForward { features, logits, embeddings })
}

/// Detached pseudo-labels, confidences, and filter masks for the weak batch,
/// plus the batch-wide threshold proposal.
pub struct PseudoStage {
    pub confidences: Vec<Vec<f64>>,
    pub pseudo: Vec<LabelMap>,
    pub masks: Vec<Mask>,
    pub proposal: f64,
    pub per_class_max: Vec<Option<f64>>,
}

/// Reads the weak logits (detached, straight off the buffers) and filters
/// with the state's current threshold. The proposal aggregates the whole
/// batch as one pixel pool.
pub fn pseudo_stage(
    weak_logits: &[Tensor],
    state: &ThresholdState,
    classes: usize,
) -> Result<PseudoStage> {
    if weak_logits.is_empty() {
        return Err(Error::invalid("pseudo_stage", "empty weak batch"));
    }
    let mut confidences = Vec::with_capacity(weak_logits.len());
    let mut pseudo = Vec::with_capacity(weak_logits.len());
    let mut masks = Vec::with_capacity(weak_logits.len());
    let mut pool_conf = Vec::new();
    let mut pool_labels = Vec::new();
    for logits in weak_logits {
        let (conf, labels) = confidence_and_pseudo(logits)?;
        masks.push(filter_map_with(state, &conf, &labels)?);
        pool_conf.extend_from_slice(&conf);
        pool_labels.extend_from_slice(labels.data());
        confidences.push(conf);
        pseudo.push(labels);
    }
    let pool = LabelMap::new(1, pool_labels.len(), pool_labels)?;
    let proposal = propose_threshold_increment(&pool_conf, &pool)?;
    let per_class_max = per_class_max_confidence(&pool_conf, &pool, classes)?;
    Ok(PseudoStage { confidences, pseudo, masks, proposal, per_class_max })
}

/// Frozen targets for every unsupervised term. The weak/perturbed branch
/// trains against unmixed targets; the strong branch against CutMix-mixed
/// ones, with soft targets and masks mixed by the same assignments.
pub struct StepTargets {
    pub hard_weak: Vec<LabelMap>,
    pub hard_strong: Vec<LabelMap>,
    pub small_weak: Vec<LabelMap>,
    pub small_strong: Vec<LabelMap>,
    pub soft_targets: Vec<Vec<f64>>,
    pub soft_masks: Vec<Vec<bool>>,
}

pub fn build_targets(
    stage: &PseudoStage,
    weak_logits: &[Tensor],
    views: &StepViews,
    cfg: &EngineConfig,
) -> Result<StepTargets> {
    let n = stage.pseudo.len();
    if weak_logits.len() != n || views.cutmix.len() != n {
        return Err(Error::invalid("build_targets", "batch size mismatch"));
    }
    let mut hard_weak = Vec::with_capacity(n);
    for (p, m) in stage.pseudo.iter().zip(&stage.masks) {
        hard_weak.push(p.masked(m)?);
    }

    let mut mixed_pseudo = stage.pseudo.clone();
    let mut mixed_masks = stage.masks.clone();
    apply_cutmix_labels(&mut mixed_pseudo, &views.cutmix);
    apply_cutmix_masks(&mut mixed_masks, &views.cutmix);
    let mut hard_strong = Vec::with_capacity(n);
    for (p, m) in mixed_pseudo.iter().zip(&mixed_masks) {
        hard_strong.push(p.masked(m)?);
    }

    let (mut small_weak, mut small_strong) = (Vec::new(), Vec::new());
    if cfg.use_corr_loss {
        for (uw, us) in hard_weak.iter().zip(&hard_strong) {
            let (fh, fw) = (uw.height() / DOWNSAMPLE, uw.width() / DOWNSAMPLE);
            small_weak.push(nearest_downsample(uw, fh, fw)?);
            small_strong.push(nearest_downsample(us, fh, fw)?);
        }
    }

    let mut soft_targets = Vec::new();
    if cfg.use_soft_loss {
        soft_targets = weak_logits.iter().map(|l| l.data().to_vec()).collect();
        let (h, w) = (stage.pseudo[0].height(), stage.pseudo[0].width());
        apply_cutmix_fields(&mut soft_targets, cfg.classes, h, w, &views.cutmix);
    }
    let soft_masks = mixed_masks.iter().map(|m| m.data().to_vec()).collect();

    Ok(StepTargets { hard_weak, hard_strong, small_weak, small_strong, soft_targets, soft_masks })
}

/// Every loss term from fixed views and targets. Pure in the parameters:
/// called with the same (views, weak, targets) it always builds the same
/// function of `t`.
pub fn compute_losses(
    t: &ParamTensors,
    weak: Option<&WeakForward>,
    views: &StepViews,
    targets: Option<&StepTargets>,
    cfg: &EngineConfig,
) -> Result<LossBreakdown> {
    let mut sup_hard_terms = Vec::with_capacity(views.labeled_images.len());
    let mut sup_corr_terms = Vec::with_capacity(views.labeled_images.len());
    for (image, target) in views.labeled_images.iter().zip(&views.labeled_targets) {
        let (h, w) = (image.height(), image.width());
        let (fh, fw) = (h / DOWNSAMPLE, w / DOWNSAMPLE);
        let feature = encode(t, &image.to_tensor())?;
        let logits = classify(t, &feature, h, w)?;
        sup_hard_terms.push(logits.cross_entropy(target)?);
        let embedding = extract(t, &feature)?;
        let corr = correlation_map(&embedding, fh, fw, &t.proj1, &t.proj2)?;
        let z = propagate(&logits, &corr)?;
        sup_corr_terms.push(z.cross_entropy(&nearest_downsample(target, fh, fw)?)?);
    }
    let sup_hard = batch_mean(&sup_hard_terms)?;
    let sup_corr = batch_mean(&sup_corr_terms)?;

    let (unsup_hard, unsup_soft, unsup_corr) = match (weak, targets) {
        (Some(weak), Some(targets)) => {
            unsupervised_losses(t, weak, views, targets, cfg)?
        }
        _ => (Tensor::scalar(0.0), Tensor::scalar(0.0), Tensor::scalar(0.0)),
    };

    LossBreakdown::combine(sup_hard, sup_corr, unsup_hard, unsup_soft, unsup_corr, cfg.weights)
}

fn unsupervised_losses(
    t: &ParamTensors,
    weak: &WeakForward,
    views: &StepViews,
    targets: &StepTargets,
    cfg: &EngineConfig,
) -> Result<(Tensor, Tensor, Tensor)> {
    let n = views.strong_images.len();
    let mut ce_strong = Vec::with_capacity(n);
    let mut kl_terms = Vec::with_capacity(if cfg.use_soft_loss { n } else { 0 });
    let mut corr_strong = Vec::with_capacity(if cfg.use_corr_loss { n } else { 0 });

    for (i, image) in views.strong_images.iter().enumerate() {
        let (h, w) = (image.height(), image.width());
        let feature = encode(t, &image.to_tensor())?;
        let logits = classify(t, &feature, h, w)?;
        ce_strong.push(logits.cross_entropy(&targets.hard_strong[i])?);
        if cfg.use_soft_loss {
            let soft = Tensor::leaf(logits.shape(), targets.soft_targets[i].clone())?;
            kl_terms.push(kl_divergence(&soft, &logits, &targets.soft_masks[i])?);
        }
        if cfg.use_corr_loss {
            let (fh, fw) = (h / DOWNSAMPLE, w / DOWNSAMPLE);
            let embedding = extract(t, &feature)?;
            let corr = correlation_map(&embedding, fh, fw, &t.proj1, &t.proj2)?;
            let z = propagate(&logits, &corr)?;
            corr_strong.push(z.cross_entropy(&targets.small_strong[i])?);
        }
    }

    let unsup_hard = {
        let strong_mean = batch_mean(&ce_strong)?;
        if cfg.use_feature_perturb {
            let mut ce_perturbed = Vec::with_capacity(n);
            for (i, feature) in weak.features.iter().enumerate() {
                let image = &views.weak_images[i];
                let dropped = channel_dropout(feature, &views.dropout_masks[i])?;
                let logits = classify(t, &dropped, image.height(), image.width())?;
                ce_perturbed.push(logits.cross_entropy(&targets.hard_weak[i])?);
            }
            strong_mean.add(&batch_mean(&ce_perturbed)?)?.scale(0.5)
        } else {
            strong_mean
        }
    };

    let unsup_soft = if cfg.use_soft_loss {
        batch_mean(&kl_terms)?
    } else {
        Tensor::scalar(0.0)
    };

    let unsup_corr = if cfg.use_corr_loss {
        let mut pair_terms = Vec::with_capacity(n);
        for (i, logits) in weak.logits.iter().enumerate() {
            let image = &views.weak_images[i];
            let (fh, fw) = (image.height() / DOWNSAMPLE, image.width() / DOWNSAMPLE);
            let corr = correlation_map(&weak.embeddings[i], fh, fw, &t.proj1, &t.proj2)?;
            let z = propagate(logits, &corr)?;
            let ce_weak = z.cross_entropy(&targets.small_weak[i])?;
            pair_terms.push(ce_weak.add(&corr_strong[i])?.scale(0.5));
        }
        batch_mean(&pair_terms)?
    } else {
        Tensor::scalar(0.0)
    };

    Ok((unsup_hard, unsup_soft, unsup_corr))
}

fn batch_diagnostics(
    stage: &PseudoStage,
    views: &StepViews,
    threshold: f64,
) -> Result<StepDiagnostics> {
    let n = stage.masks.len();
    let mut d = StepDiagnostics::empty(threshold);
    for i in 0..n {
        let gt = &views.unlabeled_gt[i];
        d.mask_ratio += stage.masks[i].ratio();
        d.mining_ratio += mining_ratio(&stage.masks[i], &stage.pseudo[i], gt)?;
        let r = diagnostic_ratios(&stage.masks[i], &stage.pseudo[i], gt)?;
        d.filter_ratio += r.filter_ratio;
        d.correct_pseudo_ratio += r.correct_pseudo_ratio;
        d.pixel_accuracy += r.pixel_accuracy;
    }
    let scale = 1.0 / n as f64;
    d.mask_ratio *= scale;
    d.mining_ratio *= scale;
    d.filter_ratio *= scale;
    d.correct_pseudo_ratio *= scale;
    d.pixel_accuracy *= scale;
    Ok(d)
}

/// Runs one full step and updates parameters, optimizer, and threshold in
/// place. A non-finite loss term aborts before any parameter or velocity
/// update (the threshold may already have moved for that iteration).
pub fn train_step(
    params: &mut ModelParams,
    opt: &mut SgdMomentum,
    threshold: &mut ThresholdState,
    labeled: &[&Sample],
    unlabeled: &[&Sample],
    iteration: u64,
    cfg: &EngineConfig,
) -> Result<(crate::engine::losses::LossValues, StepDiagnostics)> {
    cfg.validate()?;
    let views = prepare_views(labeled, unlabeled, iteration, cfg)?;
    let t = params.tensors();

    let unsup_active = !cfg.supervised_only && !unlabeled.is_empty();
    let (breakdown, diagnostics) = if unsup_active {
        let weak = forward_weak(&t, &views, cfg.use_corr_loss)?;
        let stage = pseudo_stage(&weak.logits, threshold, cfg.classes)?;
        let diagnostics = batch_diagnostics(&stage, &views, threshold.value())?;
        match threshold.mode() {
            ThresholdMode::RelaxedPerClass => {
                threshold.update_per_class(stage.proposal, &stage.per_class_max)?
            }
            _ => threshold.update(stage.proposal)?,
        }
        let targets = build_targets(&stage, &weak.logits, &views, cfg)?;
        let breakdown = compute_losses(&t, Some(&weak), &views, Some(&targets), cfg)?;
        (breakdown, diagnostics)
    } else {
        let breakdown = compute_losses(&t, None, &views, None, cfg)?;
        (breakdown, StepDiagnostics::empty(threshold.value()))
    };

    if let Some((term, value)) = breakdown.non_finite_term() {
        return Err(Error::NonFinite {
            context: format!("loss term {term} at iteration {iteration}"),
            value,
        });
    }

    breakdown.total.backward()?;
    let grads: Vec<Option<Vec<f64>>> = t.list().into_iter().map(|p| p.grad()).collect();
    let lr = poly_lr(cfg.base_lr, iteration, cfg.total_iters, POLY_POWER);
    opt.step(params, &grads, lr)?;
    Ok((breakdown.values(), diagnostics))
}
