//! Segmentation quality and pseudo-label diagnostics.

use crate::error::{Error, Result};
use crate::label::{LabelMap, Mask, IGNORE_LABEL};

/// Per-class intersection and union counts, aggregated over any number of
/// prediction/ground-truth pairs. Pixels whose ground truth is the ignore
/// label are skipped.
#[derive(Debug, Clone)]
pub struct IoUAccumulator {
    intersection: Vec<u64>,
    union: Vec<u64>,
}

impl IoUAccumulator {
    pub fn new(classes: usize) -> IoUAccumulator {
        IoUAccumulator { intersection: vec![0; classes], union: vec![0; classes] }
    }

    pub fn add(&mut self, pred: &LabelMap, gt: &LabelMap) -> Result<()> {
        if pred.height() != gt.height() || pred.width() != gt.width() {
            return Err(Error::invalid(
                "IoUAccumulator::add",
                format!(
                    "prediction {}x{} vs ground truth {}x{}",
                    pred.height(),
                    pred.width(),
                    gt.height(),
                    gt.width()
                ),
            ));
        }
        let classes = self.intersection.len();
        for (&p, &g) in pred.data().iter().zip(gt.data()) {
            if g == IGNORE_LABEL {
                continue;
            }
            let (p, g) = (p as usize, g as usize);
            if p >= classes || g >= classes {
                return Err(Error::LabelOutOfRange { label: p.max(g) as u32, classes });
            }
            if p == g {
                self.intersection[p] += 1;
                self.union[p] += 1;
            } else {
                self.union[p] += 1;
                self.union[g] += 1;
            }
        }
        Ok(())
    }

    /// Mean IoU over the classes that appear in either side; classes absent
    /// from both predictions and ground truth are left out of the mean.
    pub fn mean_iou(&self) -> f64 {
        let mut sum = 0.0;
        let mut n = 0usize;
        for (&i, &u) in self.intersection.iter().zip(&self.union) {
            if u > 0 {
                sum += i as f64 / u as f64;
                n += 1;
            }
        }
        if n == 0 {
            0.0
        } else {
            sum / n as f64
        }
    }

    /// (intersection, union) per class.
    pub fn per_class(&self) -> Vec<(u64, u64)> {
        self.intersection.iter().zip(&self.union).map(|(&i, &u)| (i, u)).collect()
    }
}

/// Mean IoU of a single prediction/ground-truth pair.
pub fn miou(pred: &LabelMap, gt: &LabelMap, classes: usize) -> Result<f64> {
    let mut acc = IoUAccumulator::new(classes);
    acc.add(pred, gt)?;
    Ok(acc.mean_iou())
}

/// Fraction of pixels passing the confidence filter.
pub fn mask_ratio(mask: &Mask) -> f64 {
    mask.ratio()
}

/// Of the pixels whose pseudo-label matches ground truth, the fraction the
/// filter keeps. Zero when no pseudo-label is correct.
pub fn mining_ratio(mask: &Mask, pseudo: &LabelMap, gt: &LabelMap) -> Result<f64> {
    check_dims("mining_ratio", mask, pseudo, gt)?;
    let mut correct = 0u64;
    let mut kept_correct = 0u64;
    for ((&m, &p), &g) in mask.data().iter().zip(pseudo.data()).zip(gt.data()) {
        if g != IGNORE_LABEL && p == g {
            correct += 1;
            if m {
                kept_correct += 1;
            }
        }
    }
    if correct == 0 {
        Ok(0.0)
    } else {
        Ok(kept_correct as f64 / correct as f64)
    }
}

/// Filter pass rate, correct-and-kept rate, and raw pseudo-label accuracy,
/// all as fractions of the full pixel grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiagnosticRatios {
    pub filter_ratio: f64,
    pub correct_pseudo_ratio: f64,
    pub pixel_accuracy: f64,
}

pub fn diagnostic_ratios(mask: &Mask, pseudo: &LabelMap, gt: &LabelMap) -> Result<DiagnosticRatios> {
    check_dims("diagnostic_ratios", mask, pseudo, gt)?;
    let total = (mask.height() * mask.width()) as f64;
    let mut kept = 0u64;
    let mut correct = 0u64;
    let mut kept_correct = 0u64;
    for ((&m, &p), &g) in mask.data().iter().zip(pseudo.data()).zip(gt.data()) {
        if m {
            kept += 1;
        }
        if g != IGNORE_LABEL && p == g {
            correct += 1;
            if m {
                kept_correct += 1;
            }
        }
    }
    Ok(DiagnosticRatios {
        filter_ratio: kept as f64 / total,
        correct_pseudo_ratio: kept_correct as f64 / total,
        pixel_accuracy: correct as f64 / total,
    })
}

/// Per-step averages of the pseudo-label diagnostics, plus the threshold in
/// effect when the filter ran.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepDiagnostics {
    pub threshold: f64,
    pub mask_ratio: f64,
    pub mining_ratio: f64,
    pub filter_ratio: f64,
    pub correct_pseudo_ratio: f64,
    pub pixel_accuracy: f64,
}

impl StepDiagnostics {
    pub fn empty(threshold: f64) -> StepDiagnostics {
        StepDiagnostics {
            threshold,
            mask_ratio: 0.0,
            mining_ratio: 0.0,
            filter_ratio: 0.0,
            correct_pseudo_ratio: 0.0,
            pixel_accuracy: 0.0,
        }
    }
}

fn check_dims(op: &'static str, mask: &Mask, pseudo: &LabelMap, gt: &LabelMap) -> Result<()> {
    let same = mask.height() == pseudo.height()
        && mask.width() == pseudo.width()
        && gt.height() == pseudo.height()
        && gt.width() == pseudo.width();
    if same {
        Ok(())
    } else {
        Err(Error::invalid(op, "mask, pseudo-labels, and ground truth must share dimensions"))
    }
}
