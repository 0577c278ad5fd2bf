//! Inference and validation scoring.

use crate::data::{Image, Sample};
use crate::error::Result;
use crate::label::LabelMap;
use crate::metrics::IoUAccumulator;
use crate::model::{classify, encode, ModelParams, ParamTensors};

/// Argmax class per pixel from an untracked forward pass.
pub fn predict_with(t: &ParamTensors, image: &Image) -> Result<LabelMap> {
    let (h, w) = (image.height(), image.width());
    let feature = encode(t, &image.to_tensor())?;
    let logits = classify(t, &feature, h, w)?;
    let x = logits.data();
    let classes = logits.shape()[0];
    let positions = h * w;
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
        labels.push(best as u32);
    }
    LabelMap::new(h, w, labels)
}

pub fn predict(params: &ModelParams, image: &Image) -> Result<LabelMap> {
    predict_with(&params.tensors_frozen(), image)
}

/// Pooled mean IoU over a sample set, scored against each sample's ground
/// truth (available on unlabeled samples too).
pub fn evaluate_miou(params: &ModelParams, samples: &[Sample], classes: usize) -> Result<f64> {
    let t = params.tensors_frozen();
    let mut acc = IoUAccumulator::new(classes);
    for sample in samples {
        let pred = predict_with(&t, &sample.image)?;
        acc.add(&pred, sample.eval_label())?;
    }
    Ok(acc.mean_iou())
}
