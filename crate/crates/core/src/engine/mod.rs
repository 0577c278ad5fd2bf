//! The semi-supervised training engine: weak-to-strong consistency with
//! EMA-relaxed confidence filtering and correlation-based label propagation.

pub mod correlation;
pub mod eval;
pub mod losses;
pub mod optim;
pub mod step;
pub mod threshold;

pub use correlation::{correlation_map, propagate, CorrelationMap};
pub use eval::{evaluate_miou, predict, predict_with};
pub use losses::{
    batch_mean, combined_total, mean_cross_entropy, mean_kl, LossBreakdown, LossValues,
    LossWeights,
};
pub use optim::{poly_lr, SgdMomentum, POLY_POWER};
pub use step::{
    build_targets, compute_losses, forward_weak, prepare_views, pseudo_stage, train_step,
    EngineConfig, PseudoStage, StepTargets, StepViews, WeakForward,
};
pub use threshold::{
    confidence_and_pseudo, filter_map, filter_map_with, per_class_max_confidence,
    propose_threshold_increment, ThresholdMode, ThresholdState, DEFAULT_TAU0, EMA_MOMENTUM,
};
