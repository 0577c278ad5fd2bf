//! Pairwise feature correlation and similarity-weighted label propagation.
//!
//! For one image with flattened embedding e (D x hw), the correlation map is
//! C = (W1 e)^T (W2 e), an hw x hw matrix of projected inner products. Class
//! scores are propagated by z = L' softmax(C / sqrt(D)) where L' is the
//! logits resized to the embedding grid; the softmax runs over the source
//! (contraction) axis, so every output pixel's scores are a convex
//! combination of the input pixels' scores.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone)]
pub struct CorrelationMap {
    /// hw x hw correlation values, row = source pixel, column = destination.
    pub values: Tensor,
    pub feature_dim: usize,
    pub height: usize,
    pub width: usize,
}

/// Builds one image's correlation map from its (D, height*width) embedding
/// and the two D x D projections.
pub fn correlation_map(
    embedding: &Tensor,
    height: usize,
    width: usize,
    proj1: &Tensor,
    proj2: &Tensor,
) -> Result<CorrelationMap> {
    let es = embedding.shape();
    if es.len() != 2 || es[1] != height * width {
        return Err(Error::invalid(
            "correlation_map",
            format!("embedding {es:?} does not cover a {height}x{width} grid"),
        ));
    }
    let d = es[0];
    for (name, p) in [("proj1", proj1), ("proj2", proj2)] {
        if p.shape() != [d, d] {
            return Err(Error::invalid(
                "correlation_map",
                format!("{name} shape {:?} does not match feature dim {d}", p.shape()),
            ));
        }
    }
    let a = proj1.matmul(embedding)?;
    let b = proj2.matmul(embedding)?;
    let values = a.transpose()?.matmul(&b)?;
    Ok(CorrelationMap { values, feature_dim: d, height, width })
}

/// Propagates class scores through a correlation map: resizes (K, H, W)
/// logits to the map's grid, then right-multiplies by the source-axis
/// softmax of C / sqrt(D). Returns (K, hw). Gradients flow through both the
/// logits and the map.
pub fn propagate(logits: &Tensor, corr: &CorrelationMap) -> Result<Tensor> {
    let s = logits.shape();
    if s.len() != 3 {
        return Err(Error::invalid(
            "propagate",
            format!("expected (K, H, W) logits, got {s:?}"),
        ));
    }
    let hw = corr.height * corr.width;
    if corr.values.shape() != [hw, hw] {
        return Err(Error::invalid(
            "propagate",
            format!(
                "correlation map {:?} does not match grid {}x{}",
                corr.values.shape(),
                corr.height,
                corr.width
            ),
        ));
    }
    let flat = logits
        .bilinear_resize(corr.height, corr.width)?
        .reshape(&[s[0], hw])?;
    let weights = corr
        .values
        .scale(1.0 / (corr.feature_dim as f64).sqrt())
        .softmax(0)?;
    flat.matmul(&weights)
}
