//! Confidence filtering with a fixed or EMA-relaxed threshold.
//!
//! The relaxed threshold starts at an initial value and tracks batch
//! statistics: each step proposes the mean over predicted classes of that
//! class's top confidence, and the threshold moves by an exponential moving
//! average. The very first update discards its proposal and pins the value
//! to the initial one. The per-class variant additionally tracks one EMA per
//! class and scales the global value by `per_class[l] / max per_class`, so
//! the hardest class keeps the full threshold and easier classes get a lower
//! effective bar.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::label::{LabelMap, Mask, IGNORE_LABEL};
use crate::tensor::{kernels, Tensor};

pub const EMA_MOMENTUM: f64 = 0.999;
pub const DEFAULT_TAU0: f64 = 0.85;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ThresholdMode {
    Fixed,
    RelaxedGlobal,
    RelaxedPerClass,
}

#[derive(Debug, Clone)]
pub struct ThresholdState {
    mode: ThresholdMode,
    init: f64,
    momentum: f64,
    value: f64,
    updates: u64,
    per_class: Vec<f64>,
}

fn check_unit(value: f64) -> Result<f64> {
    if (0.0..=1.0).contains(&value) {
        Ok(value)
    } else {
        Err(Error::ThresholdOutOfRange { value })
    }
}

impl ThresholdState {
    /// Threshold that never moves; updates only count steps.
    pub fn fixed(tau: f64) -> Result<ThresholdState> {
        check_unit(tau)?;
        Ok(ThresholdState {
            mode: ThresholdMode::Fixed,
            init: tau,
            momentum: 1.0,
            value: tau,
            updates: 0,
            per_class: Vec::new(),
        })
    }

    pub fn relaxed_global(tau0: f64, momentum: f64) -> Result<ThresholdState> {
        check_unit(tau0)?;
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::invalid(
                "ThresholdState::relaxed_global",
                format!("momentum {momentum} must lie in [0, 1)"),
            ));
        }
        Ok(ThresholdState {
            mode: ThresholdMode::RelaxedGlobal,
            init: tau0,
            momentum,
            value: tau0,
            updates: 0,
            per_class: Vec::new(),
        })
    }

    pub fn relaxed_per_class(tau0: f64, momentum: f64, classes: usize) -> Result<ThresholdState> {
        let mut state = ThresholdState::relaxed_global(tau0, momentum)?;
        if classes == 0 {
            return Err(Error::invalid("ThresholdState::relaxed_per_class", "zero classes"));
        }
        state.mode = ThresholdMode::RelaxedPerClass;
        state.per_class = vec![tau0; classes];
        Ok(state)
    }

    pub fn mode(&self) -> ThresholdMode {
        self.mode
    }

    /// Current global threshold.
    pub fn value(&self) -> f64 {
        self.value
    }

    /// Number of updates applied so far.
    pub fn updates(&self) -> u64 {
        self.updates
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    pub fn per_class_values(&self) -> Option<&[f64]> {
        if self.mode == ThresholdMode::RelaxedPerClass {
            Some(&self.per_class)
        } else {
            None
        }
    }

    /// Threshold a pixel of class `label` must beat. Outside per-class mode
    /// this is the global value for every class.
    pub fn effective(&self, label: u32) -> f64 {
        if self.mode != ThresholdMode::RelaxedPerClass {
            return self.value;
        }
        let max = self.per_class.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if max <= 0.0 {
            return self.value;
        }
        match self.per_class.get(label as usize) {
            Some(&v) => self.value * (v / max),
            None => self.value,
        }
    }

    /// One EMA step of the global value. The first update pins the value to
    /// the initial threshold and discards the proposal.
    pub fn update(&mut self, proposal: f64) -> Result<()> {
        check_unit(proposal)?;
        if self.mode != ThresholdMode::Fixed {
            if self.updates == 0 {
                self.value = self.init;
            } else {
                self.value = self.momentum * self.value + (1.0 - self.momentum) * proposal;
            }
        }
        self.updates += 1;
        Ok(())
    }

    /// Per-class EMA step plus the global update. `per_class_max[l]` is the
    /// top confidence among pixels pseudo-labeled `l`, `None` when the class
    /// is absent from the batch; absent classes keep their value.
    pub fn update_per_class(
        &mut self,
        proposal: f64,
        per_class_max: &[Option<f64>],
    ) -> Result<()> {
        if self.mode != ThresholdMode::RelaxedPerClass {
            return Err(Error::invalid(
                "ThresholdState::update_per_class",
                "state is not in per-class mode",
            ));
        }
        if per_class_max.len() != self.per_class.len() {
            return Err(Error::invalid(
                "ThresholdState::update_per_class",
                format!(
                    "{} class maxima for {} tracked classes",
                    per_class_max.len(),
                    self.per_class.len()
                ),
            ));
        }
        for (tau, m) in self.per_class.iter_mut().zip(per_class_max) {
            if let Some(m) = m {
                check_unit(*m)?;
                *tau = self.momentum * *tau + (1.0 - self.momentum) * m;
            }
        }
        self.update(proposal)
    }
}

/// Per-pixel top softmax probability and its class, both detached: values
/// are read straight off the logits buffer and never join the graph.
pub fn confidence_and_pseudo(logits: &Tensor) -> Result<(Vec<f64>, LabelMap)> {
    let s = logits.shape();
    if s.len() != 3 || s[0] == 0 {
        return Err(Error::invalid(
            "confidence_and_pseudo",
            format!("expected (K, H, W) logits, got {s:?}"),
        ));
    }
    let (classes, h, w) = (s[0], s[1], s[2]);
    let positions = h * w;
    let x = logits.data();
    let mut confidence = Vec::with_capacity(positions);
    let mut labels = Vec::with_capacity(positions);
    for pos in 0..positions {
        let mut best = 0usize;
        let mut best_v = x[pos];
        for k in 1..classes {
            let v = x[k * positions + pos];
            if v > best_v {
                best_v = v;
                best = k;
            }
        }
        let lse = kernels::logsumexp_at(x, classes, positions, pos);
        confidence.push((best_v - lse).exp());
        labels.push(best as u32);
    }
    Ok((confidence, LabelMap::new(h, w, labels)?))
}

/// Pixels strictly above a single threshold.
pub fn filter_map(confidence: &[f64], height: usize, width: usize, tau: f64) -> Result<Mask> {
    check_unit(tau)?;
    if confidence.len() != height * width {
        return Err(Error::invalid(
            "filter_map",
            format!("{} confidences for a {height}x{width} grid", confidence.len()),
        ));
    }
    Mask::new(height, width, confidence.iter().map(|&c| c > tau).collect())
}

/// Pixels strictly above the state's effective threshold for their
/// pseudo-class.
pub fn filter_map_with(
    state: &ThresholdState,
    confidence: &[f64],
    pseudo: &LabelMap,
) -> Result<Mask> {
    if confidence.len() != pseudo.len() {
        return Err(Error::invalid(
            "filter_map_with",
            format!("{} confidences for {} pixels", confidence.len(), pseudo.len()),
        ));
    }
    if state.mode() != ThresholdMode::RelaxedPerClass {
        return filter_map(confidence, pseudo.height(), pseudo.width(), state.value());
    }
    let data = confidence
        .iter()
        .zip(pseudo.data())
        .map(|(&c, &l)| c > state.effective(l))
        .collect();
    Mask::new(pseudo.height(), pseudo.width(), data)
}

/// The batch's threshold proposal: mean over the classes present in the
/// pseudo-labels of each class's top confidence.
pub fn propose_threshold_increment(confidence: &[f64], pseudo: &LabelMap) -> Result<f64> {
    if confidence.len() != pseudo.len() || confidence.is_empty() {
        return Err(Error::invalid(
            "propose_threshold_increment",
            format!("{} confidences for {} pixels", confidence.len(), pseudo.len()),
        ));
    }
    let mut best: BTreeMap<u32, f64> = BTreeMap::new();
    for (&c, &l) in confidence.iter().zip(pseudo.data()) {
        if l == IGNORE_LABEL {
            continue;
        }
        let entry = best.entry(l).or_insert(f64::NEG_INFINITY);
        if c > *entry {
            *entry = c;
        }
    }
    if best.is_empty() {
        return Err(Error::invalid("propose_threshold_increment", "no labeled pixels"));
    }
    Ok(best.values().sum::<f64>() / best.len() as f64)
}

/// Top confidence per class over a batch's pixels, `None` for absent classes.
pub fn per_class_max_confidence(
    confidence: &[f64],
    pseudo: &LabelMap,
    classes: usize,
) -> Result<Vec<Option<f64>>> {
    if confidence.len() != pseudo.len() {
        return Err(Error::invalid(
            "per_class_max_confidence",
            format!("{} confidences for {} pixels", confidence.len(), pseudo.len()),
        ));
    }
    let mut best = vec![None; classes];
    for (&c, &l) in confidence.iter().zip(pseudo.data()) {
        if l == IGNORE_LABEL {
            continue;
        }
        let idx = l as usize;
        if idx >= classes {
            return Err(Error::LabelOutOfRange { label: l, classes });
        }
        match &mut best[idx] {
            Some(v) if *v >= c => {}
            slot => *slot = Some(c),
        }
    }
    Ok(best)
}
