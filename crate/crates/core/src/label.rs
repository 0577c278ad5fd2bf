//! Dense per-pixel label grids and boolean masks.

use crate::error::{Error, Result};

/// Sentinel for pixels excluded from every loss and metric.
pub const IGNORE_LABEL: u32 = u32::MAX;

/// Row-major grid of class ids, with [`IGNORE_LABEL`] marking excluded pixels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    data: Vec<u32>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<u32>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::invalid(
                "LabelMap::new",
                format!("{} values for a {height}x{width} grid", data.len()),
            ));
        }
        Ok(LabelMap { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: u32) -> Self {
        LabelMap { height, width, data: vec![value; height * width] }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[u32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u32] {
        &mut self.data
    }

    pub fn get(&self, y: usize, x: usize) -> u32 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, value: u32) {
        self.data[y * self.width + x] = value;
    }

    /// Largest non-ignore label, if any pixel carries one.
    pub fn max_label(&self) -> Option<u32> {
        self.data.iter().copied().filter(|&l| l != IGNORE_LABEL).max()
    }

    /// Relabels pixels where `keep` is false to [`IGNORE_LABEL`].
    pub fn masked(&self, keep: &Mask) -> Result<LabelMap> {
        if keep.height != self.height || keep.width != self.width {
            return Err(Error::ShapeMismatch {
                op: "LabelMap::masked",
                lhs: vec![self.height, self.width],
                rhs: vec![keep.height, keep.width],
            });
        }
        let data = self
            .data
            .iter()
            .zip(&keep.data)
            .map(|(&l, &k)| if k { l } else { IGNORE_LABEL })
            .collect();
        Ok(LabelMap { height: self.height, width: self.width, data })
    }
}

/// Boolean per-pixel mask (true = selected).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::invalid(
                "Mask::new",
                format!("{} values for a {height}x{width} grid", data.len()),
            ));
        }
        Ok(Mask { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: bool) -> Self {
        Mask { height, width, data: vec![value; height * width] }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [bool] {
        &mut self.data
    }

    pub fn count_true(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    /// Fraction of selected pixels; 0 for an empty grid.
    pub fn ratio(&self) -> f64 {
        if self.data.is_empty() {
            0.0
        } else {
            self.count_true() as f64 / self.data.len() as f64
        }
    }
}

/// Source index per output cell for nearest sampling: centers of the output
/// grid mapped back onto the input grid, `floor((o + 0.5) * in / out)`.
pub(crate) fn nearest_indices(in_len: usize, out_len: usize) -> Vec<usize> {
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * in_len as f64 / out_len as f64).floor() as usize;
            src.min(in_len.saturating_sub(1))
        })
        .collect()
}

/// Nearest-neighbour resampling of a label grid. Ignore pixels propagate
/// unchanged; no label interpolation ever occurs.
pub fn nearest_resample(labels: &LabelMap, out_h: usize, out_w: usize) -> Result<LabelMap> {
    if labels.height == 0 || labels.width == 0 || out_h == 0 || out_w == 0 {
        return Err(Error::invalid("nearest_resample", "empty grid".to_string()));
    }
    let rows = nearest_indices(labels.height, out_h);
    let cols = nearest_indices(labels.width, out_w);
    let mut data = Vec::with_capacity(out_h * out_w);
    for &sy in &rows {
        for &sx in &cols {
            data.push(labels.get(sy, sx));
        }
    }
    Ok(LabelMap { height: out_h, width: out_w, data })
}

/// Downsamples a label grid to `out_h x out_w` by nearest sampling.
pub fn nearest_downsample(labels: &LabelMap, out_h: usize, out_w: usize) -> Result<LabelMap> {
    if out_h > labels.height || out_w > labels.width {
        return Err(Error::invalid(
            "nearest_downsample",
            format!(
                "target {out_h}x{out_w} exceeds source {}x{}",
                labels.height, labels.width
            ),
        ));
    }
    nearest_resample(labels, out_h, out_w)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_shape_downsample_is_identity() {
        let m = LabelMap::new(3, 4, (0..12).collect()).unwrap();
        let d = nearest_downsample(&m, 3, 4).unwrap();
        assert_eq!(d, m);
    }

    #[test]
    fn constant_map_stays_constant() {
        let m = LabelMap::filled(8, 8, 3);
        let d = nearest_downsample(&m, 2, 2).unwrap();
        assert!(d.data().iter().all(|&l| l == 3));
    }

    #[test]
    fn checkerboard_downsample_matches_index_arithmetic() {
        // 4x4 checkerboard, value (y + x) % 2.
        let data: Vec<u32> = (0..16).map(|i| ((i / 4 + i % 4) % 2) as u32).collect();
        let m = LabelMap::new(4, 4, data).unwrap();
        let d = nearest_downsample(&m, 2, 2).unwrap();

        // Oracle: recompute the source index per output cell by hand.
        let mut expect = Vec::new();
        for oy in 0..2 {
            for ox in 0..2 {
                let sy = ((oy as f64 + 0.5) * 4.0 / 2.0).floor() as usize;
                let sx = ((ox as f64 + 0.5) * 4.0 / 2.0).floor() as usize;
                expect.push(m.get(sy, sx));
            }
        }
        assert_eq!(d.data(), expect.as_slice());
        // Centers land on rows/cols {1, 3}: parity of (1+1, 1+3, 3+1, 3+3).
        assert_eq!(d.data(), &[0, 0, 0, 0]);
    }

    #[test]
    fn ignore_pixels_propagate() {
        let mut m = LabelMap::filled(4, 4, 1);
        m.set(1, 1, IGNORE_LABEL);
        let d = nearest_downsample(&m, 2, 2).unwrap();
        assert_eq!(d.get(0, 0), IGNORE_LABEL);
        assert_eq!(d.get(1, 1), 1);
    }

    #[test]
    fn upsample_rejected() {
        let m = LabelMap::filled(2, 2, 0);
        assert!(nearest_downsample(&m, 4, 4).is_err());
    }

    #[test]
    fn masked_relabels_to_ignore() {
        let m = LabelMap::new(1, 3, vec![0, 1, 2]).unwrap();
        let keep = Mask::new(1, 3, vec![true, false, true]).unwrap();
        let out = m.masked(&keep).unwrap();
        assert_eq!(out.data(), &[0, IGNORE_LABEL, 2]);
    }
}
