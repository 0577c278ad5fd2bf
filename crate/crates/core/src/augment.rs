//! View construction: weak geometric transforms, strong photometric
//! perturbations, and CutMix.
//!
//! A weak view is scale -> horizontal flip -> crop back to the original size,
//! described by a [`GeometryRecord`] so the image (bilinear), its label grid
//! (nearest), and any evaluation-only ground truth move through the exact
//! same geometry. Strong views start from a weak view and only change pixel
//! values, never positions. CutMix pastes a rectangular region from a donor
//! into the target across image, pseudo label, and confidence mask at once.

use rand::Rng;

use crate::data::Image;
use crate::error::{Error, Result};
use crate::label::{nearest_indices, LabelMap, Mask, IGNORE_LABEL};
use crate::tensor::kernels::{bilinear_plane, bilinear_taps};

/// Replayable weak-view geometry. The crop is taken from the scaled (and,
/// when the scale shrinks below the crop size, zero/ignore padded) image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeometryRecord {
    pub scale: f64,
    pub flip: bool,
    pub crop_y: usize,
    pub crop_x: usize,
    pub crop_h: usize,
    pub crop_w: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct WeakAugmentConfig {
    pub scale_min: f64,
    pub scale_max: f64,
    pub flip_prob: f64,
}

impl Default for WeakAugmentConfig {
    fn default() -> Self {
        WeakAugmentConfig { scale_min: 0.5, scale_max: 2.0, flip_prob: 0.5 }
    }
}

impl WeakAugmentConfig {
    /// Identity geometry regardless of rng draws.
    pub fn identity() -> Self {
        WeakAugmentConfig { scale_min: 1.0, scale_max: 1.0, flip_prob: 0.0 }
    }
}

fn scaled_len(len: usize, scale: f64) -> usize {
    ((len as f64 * scale).round() as usize).max(1)
}

/// Draws a geometry for an `h x w` input: scale, flip coin, crop offset.
pub fn sample_geometry<R: Rng>(h: usize, w: usize, cfg: &WeakAugmentConfig, rng: &mut R) -> GeometryRecord {
    let scale = if cfg.scale_max > cfg.scale_min {
        rng.gen_range(cfg.scale_min..cfg.scale_max)
    } else {
        cfg.scale_min
    };
    let flip = rng.gen_bool(cfg.flip_prob);
    let padded_h = scaled_len(h, scale).max(h);
    let padded_w = scaled_len(w, scale).max(w);
    let crop_y = rng.gen_range(0..=padded_h - h);
    let crop_x = rng.gen_range(0..=padded_w - w);
    GeometryRecord { scale, flip, crop_y, crop_x, crop_h: h, crop_w: w }
}

/// Applies a geometry to an image: bilinear rescale, flip, zero padding when
/// the scaled image is smaller than the crop, then crop.
pub fn apply_geometry_image(image: &Image, rec: &GeometryRecord) -> Result<Image> {
    let (h, w) = (image.height(), image.width());
    let sh = scaled_len(h, rec.scale);
    let sw = scaled_len(w, rec.scale);
    let padded_h = sh.max(rec.crop_h);
    let padded_w = sw.max(rec.crop_w);
    check_crop(rec, padded_h, padded_w)?;

    let taps_y = bilinear_taps(h, sh);
    let taps_x = bilinear_taps(w, sw);
    let mut out = Image::filled(image.channels(), rec.crop_h, rec.crop_w, 0.0);
    for c in 0..image.channels() {
        let scaled = bilinear_plane(image.channel(c), w, &taps_y, &taps_x);
        for oy in 0..rec.crop_h {
            let sy = rec.crop_y + oy;
            if sy >= sh {
                continue;
            }
            for ox in 0..rec.crop_w {
                let sx = rec.crop_x + ox;
                if sx >= sw {
                    continue;
                }
                let col = if rec.flip { sw - 1 - sx } else { sx };
                out.set(c, oy, ox, scaled[sy * sw + col]);
            }
        }
    }
    Ok(out)
}

/// Applies the same geometry to a label grid with nearest sampling; padding
/// becomes [`IGNORE_LABEL`].
pub fn apply_geometry_label(label: &LabelMap, rec: &GeometryRecord) -> Result<LabelMap> {
    let (h, w) = (label.height(), label.width());
    let sh = scaled_len(h, rec.scale);
    let sw = scaled_len(w, rec.scale);
    let padded_h = sh.max(rec.crop_h);
    let padded_w = sw.max(rec.crop_w);
    check_crop(rec, padded_h, padded_w)?;

    let rows = nearest_indices(h, sh);
    let cols = nearest_indices(w, sw);
    let mut out = LabelMap::filled(rec.crop_h, rec.crop_w, IGNORE_LABEL);
    for oy in 0..rec.crop_h {
        let sy = rec.crop_y + oy;
        if sy >= sh {
            continue;
        }
        for ox in 0..rec.crop_w {
            let sx = rec.crop_x + ox;
            if sx >= sw {
                continue;
            }
            let col = if rec.flip { sw - 1 - sx } else { sx };
            out.set(oy, ox, label.get(rows[sy], cols[col]));
        }
    }
    Ok(out)
}

fn check_crop(rec: &GeometryRecord, padded_h: usize, padded_w: usize) -> Result<()> {
    if rec.crop_y + rec.crop_h > padded_h || rec.crop_x + rec.crop_w > padded_w {
        return Err(Error::invalid(
            "apply_geometry",
            format!(
                "crop {}x{} at ({}, {}) escapes padded scaled image {padded_h}x{padded_w}",
                rec.crop_h, rec.crop_w, rec.crop_y, rec.crop_x
            ),
        ));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy)]
pub struct StrongAugmentConfig {
    pub gain_min: f64,
    pub gain_max: f64,
    pub bias_min: f64,
    pub bias_max: f64,
    pub grayscale_prob: f64,
    pub blur_prob: f64,
    pub sigma_min: f64,
    pub sigma_max: f64,
}

impl Default for StrongAugmentConfig {
    fn default() -> Self {
        StrongAugmentConfig {
            gain_min: 0.6,
            gain_max: 1.4,
            bias_min: -0.2,
            bias_max: 0.2,
            grayscale_prob: 0.2,
            blur_prob: 0.5,
            sigma_min: 0.1,
            sigma_max: 1.0,
        }
    }
}

impl StrongAugmentConfig {
    /// Degenerate ranges that force the identity, for tests.
    pub fn identity() -> Self {
        StrongAugmentConfig {
            gain_min: 1.0,
            gain_max: 1.0,
            bias_min: 0.0,
            bias_max: 0.0,
            grayscale_prob: 0.0,
            blur_prob: 0.0,
            sigma_min: 0.1,
            sigma_max: 0.1,
        }
    }
}

fn draw(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}

fn draw_bool(rng: &mut impl Rng, p: f64) -> bool {
    rng.gen_bool(p.clamp(0.0, 1.0))
}

/// Photometric-only strong perturbation: per-channel gain and bias, optional
/// grayscale collapse, optional separable Gaussian blur, then a clip to
/// [0, 1]. Pixel positions never move. Draw order: gains, biases, grayscale
/// coin, blur coin, sigma.
pub fn strong_augment<R: Rng>(image: &Image, cfg: &StrongAugmentConfig, rng: &mut R) -> Image {
    let channels = image.channels();
    let gains: Vec<f64> = (0..channels).map(|_| draw(rng, cfg.gain_min, cfg.gain_max)).collect();
    let biases: Vec<f64> = (0..channels).map(|_| draw(rng, cfg.bias_min, cfg.bias_max)).collect();
    let to_gray = draw_bool(rng, cfg.grayscale_prob);
    let do_blur = draw_bool(rng, cfg.blur_prob);
    let sigma = draw(rng, cfg.sigma_min, cfg.sigma_max);

    let mut out = image.clone();
    let (h, w) = (out.height(), out.width());
    for c in 0..channels {
        for y in 0..h {
            for x in 0..w {
                out.set(c, y, x, out.get(c, y, x) * gains[c] + biases[c]);
            }
        }
    }
    if to_gray {
        for y in 0..h {
            for x in 0..w {
                let mean = (0..channels).map(|c| out.get(c, y, x)).sum::<f64>() / channels as f64;
                for c in 0..channels {
                    out.set(c, y, x, mean);
                }
            }
        }
    }
    if do_blur {
        out = gaussian_blur(&out, sigma);
    }
    for v in out.data_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    out
}

/// Separable Gaussian blur with edge replication. Radius grows with sigma;
/// at sigma -> 0 the kernel collapses to a delta.
pub fn gaussian_blur(image: &Image, sigma: f64) -> Image {
    let radius = ((2.0 * sigma).ceil() as usize).max(1);
    let mut kernel = Vec::with_capacity(2 * radius + 1);
    for i in -(radius as isize)..=radius as isize {
        kernel.push((-((i * i) as f64) / (2.0 * sigma * sigma)).exp());
    }
    let sum: f64 = kernel.iter().sum();
    for k in &mut kernel {
        *k /= sum;
    }

    let (channels, h, w) = (image.channels(), image.height(), image.width());
    let clamp = |v: isize, hi: usize| v.clamp(0, hi as isize - 1) as usize;
    let mut tmp = Image::filled(channels, h, w, 0.0);
    for c in 0..channels {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (ki, kv) in kernel.iter().enumerate() {
                    let sx = clamp(x as isize + ki as isize - radius as isize, w);
                    acc += kv * image.get(c, y, sx);
                }
                tmp.set(c, y, x, acc);
            }
        }
    }
    let mut out = Image::filled(channels, h, w, 0.0);
    for c in 0..channels {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (ki, kv) in kernel.iter().enumerate() {
                    let sy = clamp(y as isize + ki as isize - radius as isize, h);
                    acc += kv * tmp.get(c, sy, x);
                }
                out.set(c, y, x, acc);
            }
        }
    }
    out
}

/// Rectangular paste region.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CutMixBox {
    pub y: usize,
    pub x: usize,
    pub h: usize,
    pub w: usize,
}

impl CutMixBox {
    pub fn area(&self) -> usize {
        self.h * self.w
    }
}

/// Donor index plus paste region for one target sample.
#[derive(Debug, Clone, Copy)]
pub struct CutMixAssignment {
    pub donor: usize,
    pub region: CutMixBox,
}

#[derive(Debug, Clone, Copy)]
pub struct CutMixConfig {
    pub prob: f64,
    pub area_min: f64,
    pub area_max: f64,
}

impl Default for CutMixConfig {
    fn default() -> Self {
        CutMixConfig { prob: 0.5, area_min: 0.25, area_max: 0.5 }
    }
}

/// Per-target paste decisions for a batch. A batch of one sample has no
/// donors, so every slot is `None`. Draw order per target: paste coin,
/// donor, area fraction, y offset, x offset.
pub fn sample_cutmix<R: Rng>(
    batch: usize,
    h: usize,
    w: usize,
    cfg: &CutMixConfig,
    rng: &mut R,
) -> Vec<Option<CutMixAssignment>> {
    if batch < 2 {
        return vec![None; batch];
    }
    (0..batch)
        .map(|i| {
            if !draw_bool(rng, cfg.prob) {
                return None;
            }
            let mut donor = rng.gen_range(0..batch - 1);
            if donor >= i {
                donor += 1;
            }
            let frac = draw(rng, cfg.area_min, cfg.area_max);
            let mut bh = ((h as f64 * frac.sqrt()).floor() as usize).clamp(1, h);
            let mut bw = ((w as f64 * frac.sqrt()).floor() as usize).clamp(1, w);
            // Rounding can push the realized fraction outside the target
            // band on small grids; nudge the sides back in.
            let lo = (cfg.area_min * (h * w) as f64).ceil() as usize;
            let hi = (cfg.area_max * (h * w) as f64).floor() as usize;
            while bh * bw < lo && (bh < h || bw < w) {
                if bh <= bw && bh < h {
                    bh += 1;
                } else {
                    bw += 1;
                }
            }
            while bh * bw > hi && (bh > 1 || bw > 1) {
                if bh >= bw && bh > 1 {
                    bh -= 1;
                } else {
                    bw -= 1;
                }
            }
            let y = rng.gen_range(0..=h - bh);
            let x = rng.gen_range(0..=w - bw);
            Some(CutMixAssignment { donor, region: CutMixBox { y, x, h: bh, w: bw } })
        })
        .collect()
}

fn paste_region<T: Copy>(dst: &mut [T], src: &[T], w: usize, region: &CutMixBox) {
    for y in region.y..region.y + region.h {
        let row = y * w;
        dst[row + region.x..row + region.x + region.w]
            .copy_from_slice(&src[row + region.x..row + region.x + region.w]);
    }
}

/// Pastes donor regions into the images of a batch. All donors are read from
/// a pre-mix snapshot, so paste order cannot cascade.
pub fn apply_cutmix_images(images: &mut [Image], assignments: &[Option<CutMixAssignment>]) {
    let snapshot: Vec<Image> = images.to_vec();
    for (i, a) in assignments.iter().enumerate() {
        let Some(a) = a else { continue };
        let donor = &snapshot[a.donor];
        let (h, w) = (donor.height(), donor.width());
        for c in 0..donor.channels() {
            let plane = c * h * w;
            let (dst, src) = (
                &mut images[i].data_mut()[plane..plane + h * w],
                &donor.data()[plane..plane + h * w],
            );
            paste_region(dst, src, w, &a.region);
        }
    }
}

/// Same paste pattern on label grids.
pub fn apply_cutmix_labels(labels: &mut [LabelMap], assignments: &[Option<CutMixAssignment>]) {
    let snapshot: Vec<LabelMap> = labels.to_vec();
    for (i, a) in assignments.iter().enumerate() {
        let Some(a) = a else { continue };
        let w = snapshot[a.donor].width();
        paste_region(labels[i].data_mut(), snapshot[a.donor].data(), w, &a.region);
    }
}

/// Same paste pattern on confidence masks.
pub fn apply_cutmix_masks(masks: &mut [Mask], assignments: &[Option<CutMixAssignment>]) {
    let snapshot: Vec<Mask> = masks.to_vec();
    for (i, a) in assignments.iter().enumerate() {
        let Some(a) = a else { continue };
        let w = snapshot[a.donor].width();
        paste_region(masks[i].data_mut(), snapshot[a.donor].data(), w, &a.region);
    }
}

/// Same paste pattern on per-sample (channels, h, w) value fields, used to
/// mix detached soft targets alongside the hard ones.
pub fn apply_cutmix_fields(
    fields: &mut [Vec<f64>],
    channels: usize,
    h: usize,
    w: usize,
    assignments: &[Option<CutMixAssignment>],
) {
    let snapshot: Vec<Vec<f64>> = fields.to_vec();
    for (i, a) in assignments.iter().enumerate() {
        let Some(a) = a else { continue };
        for c in 0..channels {
            let plane = c * h * w;
            paste_region(
                &mut fields[i][plane..plane + h * w],
                &snapshot[a.donor][plane..plane + h * w],
                w,
                &a.region,
            );
        }
    }
}
