//! Deterministic synthetic segmentation data.
//!
//! Each image is a noisy color field with 1..n overlapping shapes painted on
//! top; every semantic class uses one geometry (rectangle, disc, or triangle)
//! and one base color, so the task is learnable from color plus shape but not
//! trivial under noise. A per-channel illumination affine varies between
//! samples, which keeps a tiny labeled pool from covering the appearance
//! distribution. Sample content is a pure function of (dataset seed,
//! sample id): regenerating any sample in isolation yields byte-identical
//! pixels.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::label::LabelMap;
use crate::rng::sample_stream;
use crate::tensor::Tensor;

/// Row-major (channel, row, column) image with values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::invalid(
                "Image::new",
                format!("{} values for {channels}x{height}x{width}", data.len()),
            ));
        }
        Ok(Image { channels, height, width, data })
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f64) -> Self {
        Image { channels, height, width, data: vec![value; channels * height * width] }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        &self.data[c * self.height * self.width..(c + 1) * self.height * self.width]
    }

    /// Constant tensor leaf view of the pixels.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::leaf(&[self.channels, self.height, self.width], self.data.clone())
            .expect("image shape is consistent by construction")
    }
}

/// One dataset element. Unlabeled samples still carry their ground truth,
/// exposed only through [`Sample::eval_label`] for diagnostics and scoring.
#[derive(Debug, Clone)]
pub struct Sample {
    pub id: u64,
    pub image: Image,
    ground_truth: LabelMap,
    labeled: bool,
}

impl Sample {
    pub fn is_labeled(&self) -> bool {
        self.labeled
    }

    /// Training label; `None` for unlabeled samples.
    pub fn label(&self) -> Option<&LabelMap> {
        self.labeled.then_some(&self.ground_truth)
    }

    /// Ground truth for evaluation-only use, present on every sample.
    pub fn eval_label(&self) -> &LabelMap {
        &self.ground_truth
    }
}

/// Generation recipe. Class 0 is background; classes 1.. paint shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub seed: u64,
    pub n_labeled: usize,
    pub n_unlabeled: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub classes: usize,
    pub noise_std: f64,
    pub shapes_min: usize,
    pub shapes_max: usize,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            seed: 0,
            n_labeled: 4,
            n_unlabeled: 256,
            height: 32,
            width: 32,
            channels: 3,
            classes: 4,
            noise_std: 0.08,
            shapes_min: 2,
            shapes_max: 4,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let err = |msg: String| Err(Error::invalid("DatasetSpec", msg));
        if self.height < 8 || self.width < 8 {
            return err(format!("image {}x{} too small to place shapes", self.height, self.width));
        }
        if self.channels == 0 {
            return err("channels must be positive".to_string());
        }
        if self.classes < 2 {
            return err("need background plus at least one shape class".to_string());
        }
        if self.classes > 255 {
            return err("at most 255 classes (labels are exported as bytes)".to_string());
        }
        if self.n_labeled == 0 {
            return err("need at least one labeled sample".to_string());
        }
        if self.shapes_min == 0 || self.shapes_max < self.shapes_min {
            return err(format!(
                "invalid shape count range {}..={}",
                self.shapes_min, self.shapes_max
            ));
        }
        if !self.noise_std.is_finite() || self.noise_std < 0.0 {
            return err(format!("noise_std {} must be finite and non-negative", self.noise_std));
        }
        Ok(())
    }
}

/// Labeled pool, unlabeled pool, and the recipe that produced them.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub labeled: Vec<Sample>,
    pub unlabeled: Vec<Sample>,
}

/// Base color of a class in one channel: evenly spaced hues at fixed
/// lightness. Every class keeps the same channel sum, so class differences
/// are orthogonal to the gray axis and no shared brightness shift can turn
/// one class color into another. Values stay inside [0.05, 0.95] so additive
/// noise rarely clips.
pub fn base_color(class: u32, channel: usize, classes: usize) -> f64 {
    let hue = std::f64::consts::TAU * class as f64 / classes as f64;
    let phase = std::f64::consts::TAU * channel as f64 / 3.0;
    0.5 + 0.45 * (hue + phase).cos()
}

#[derive(Debug, Clone, Copy)]
enum Geometry {
    Rectangle { cy: f64, cx: f64, hy: f64, hx: f64 },
    Disc { cy: f64, cx: f64, r: f64 },
    Triangle { ay: f64, ax: f64, by: f64, bx: f64, cy: f64, cx: f64 },
}

impl Geometry {
    fn contains(&self, y: f64, x: f64) -> bool {
        match *self {
            Geometry::Rectangle { cy, cx, hy, hx } => {
                (y - cy).abs() <= hy && (x - cx).abs() <= hx
            }
            Geometry::Disc { cy, cx, r } => {
                (y - cy) * (y - cy) + (x - cx) * (x - cx) <= r * r
            }
            Geometry::Triangle { ay, ax, by, bx, cy, cx } => {
                let sign = |x1: f64, y1: f64, x2: f64, y2: f64| -> f64 {
                    (x - x2) * (y1 - y2) - (x1 - x2) * (y - y2)
                };
                let d1 = sign(ax, ay, bx, by);
                let d2 = sign(bx, by, cx, cy);
                let d3 = sign(cx, cy, ax, ay);
                let has_neg = d1 < 0.0 || d2 < 0.0 || d3 < 0.0;
                let has_pos = d1 > 0.0 || d2 > 0.0 || d3 > 0.0;
                !(has_neg && has_pos)
            }
        }
    }
}

/// Generates one sample; pure in (spec.seed, id). Draw order per sample:
/// shape count, then per shape (class, center, size, orientation), then one
/// illumination gain per channel and one bias per channel, then one normal
/// draw per pixel per channel for the noise field.
pub fn generate_sample(spec: &DatasetSpec, id: u64, labeled: bool) -> Sample {
    let mut rng = sample_stream(spec.seed, id);
    let (h, w) = (spec.height, spec.width);

    let mut label = LabelMap::filled(h, w, 0);
    let n_shapes = rng.gen_range(spec.shapes_min..=spec.shapes_max);

    for _ in 0..n_shapes {
        let class = rng.gen_range(1..spec.classes as u32);
        // Keep centers away from the border; shrinks on grids under 16 pixels
        // so the smallest allowed size still has room.
        let margin = (h.min(w) as f64 / 4.0).min(4.0);
        let cyf = rng.gen_range(margin..h as f64 - margin);
        let cxf = rng.gen_range(margin..w as f64 - margin);
        // Cap the size so shape interiors stay within a small receptive
        // field's reach of their boundary.
        let max_r = (h.min(w) as f64 / 3.0).max(3.5).min(9.0);
        let r = rng.gen_range(3.0..max_r);
        let geom = match (class - 1) % 3 {
            0 => {
                let aspect: f64 = rng.gen_range(0.6..1.6);
                Geometry::Rectangle { cy: cyf, cx: cxf, hy: r / aspect.sqrt(), hx: r * aspect.sqrt() }
            }
            1 => Geometry::Disc { cy: cyf, cx: cxf, r },
            _ => {
                // Vertices on a circle around the center, so the center pixel
                // is always inside and the painted region is never empty.
                let theta = rng.gen_range(0.0..std::f64::consts::TAU);
                let v = |k: f64| {
                    let a = theta + k * std::f64::consts::TAU / 3.0;
                    (cyf + 1.3 * r * a.sin(), cxf + 1.3 * r * a.cos())
                };
                let (ay, ax) = v(0.0);
                let (by, bx) = v(1.0);
                let (ccy, ccx) = v(2.0);
                Geometry::Triangle { ay, ax, by, bx, cy: ccy, cx: ccx }
            }
        };
        for y in 0..h {
            for x in 0..w {
                if geom.contains(y as f64, x as f64) {
                    label.set(y, x, class);
                }
            }
        }
    }

    // Scene-wide illumination, one affine per channel. A handful of labeled
    // images pins only a handful of draws from this family, so generalizing
    // across lighting is where the unlabeled pool earns its keep; the strong
    // photometric jitter spans a wider affine range than generation uses.
    let gains: Vec<f64> = (0..spec.channels).map(|_| rng.gen_range(0.75..1.25)).collect();
    let biases: Vec<f64> = (0..spec.channels).map(|_| rng.gen_range(-0.12..0.12)).collect();

    let mut image = Image::filled(spec.channels, h, w, 0.0);
    for c in 0..spec.channels {
        for y in 0..h {
            for x in 0..w {
                let color = base_color(label.get(y, x), c, spec.classes);
                image.set(c, y, x, gains[c] * color + biases[c]);
            }
        }
    }
    for c in 0..spec.channels {
        for y in 0..h {
            for x in 0..w {
                let noise: f64 = rng.sample(StandardNormal);
                let v = (image.get(c, y, x) + spec.noise_std * noise).clamp(0.0, 1.0);
                image.set(c, y, x, v);
            }
        }
    }

    Sample { id, image, ground_truth: label, labeled }
}

/// Generates the labeled pool (ids `0..n_labeled`) followed by the unlabeled
/// pool (ids `n_labeled..n_labeled + n_unlabeled`).
pub fn generate(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let labeled = (0..spec.n_labeled as u64)
        .map(|id| generate_sample(spec, id, true))
        .collect();
    let unlabeled = (spec.n_labeled as u64..(spec.n_labeled + spec.n_unlabeled) as u64)
        .map(|id| generate_sample(spec, id, false))
        .collect();
    Ok(Dataset { spec: spec.clone(), labeled, unlabeled })
}

/// Held-out evaluation samples drawn from the same distribution, with ids
/// disjoint from both training pools.
pub fn generate_val(spec: &DatasetSpec, n_val: usize) -> Result<Vec<Sample>> {
    spec.validate()?;
    let base = (spec.n_labeled + spec.n_unlabeled) as u64;
    Ok((base..base + n_val as u64)
        .map(|id| generate_sample(spec, id, true))
        .collect())
}

const DATASET_MAGIC: &[u8; 4] = b"CMDS";
const DATASET_VERSION: u32 = 1;

/// Writes the dataset in the `CMDS` format: magic, version, spec fields as
/// little-endian u32 (the u64 seed split into low and high words), noise_std
/// as f64, then per sample the row-major image as f64 and the label grid as
/// bytes. Labeled samples come first; sample ids are implicit in the order.
pub fn write_dataset(path: &Path, dataset: &Dataset) -> Result<()> {
    let ctx = || format!("writing dataset {}", path.display());
    let file = File::create(path).map_err(|e| Error::io(ctx(), e))?;
    let mut out = BufWriter::new(file);
    let mut w = |bytes: &[u8]| out.write_all(bytes).map_err(|e| Error::io(ctx(), e));

    w(DATASET_MAGIC)?;
    w(&DATASET_VERSION.to_le_bytes())?;
    let s = &dataset.spec;
    w(&(s.seed as u32).to_le_bytes())?;
    w(&((s.seed >> 32) as u32).to_le_bytes())?;
    for v in [
        s.n_labeled,
        s.n_unlabeled,
        s.height,
        s.width,
        s.channels,
        s.classes,
        s.shapes_min,
        s.shapes_max,
    ] {
        w(&(v as u32).to_le_bytes())?;
    }
    w(&s.noise_std.to_le_bytes())?;
    for sample in dataset.labeled.iter().chain(&dataset.unlabeled) {
        for v in sample.image.data() {
            w(&v.to_le_bytes())?;
        }
        for &l in sample.ground_truth.data() {
            w(&[l as u8])?;
        }
    }
    out.flush().map_err(|e| Error::io(ctx(), e))
}

/// Reads a `CMDS` file back into memory.
pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let ctx = || format!("reading dataset {}", path.display());
    let file = File::open(path).map_err(|e| Error::io(ctx(), e))?;
    let mut input = BufReader::new(file);

    let mut magic = [0u8; 4];
    input.read_exact(&mut magic).map_err(|e| Error::io(ctx(), e))?;
    if &magic != DATASET_MAGIC {
        return Err(Error::CorruptFile { what: "dataset", msg: format!("bad magic {magic:?}") });
    }
    let read_u32 = |input: &mut BufReader<File>| -> Result<u32> {
        let mut b = [0u8; 4];
        input.read_exact(&mut b).map_err(|e| Error::io(ctx(), e))?;
        Ok(u32::from_le_bytes(b))
    };
    let version = read_u32(&mut input)?;
    if version != DATASET_VERSION {
        return Err(Error::CorruptFile {
            what: "dataset",
            msg: format!("unsupported version {version}"),
        });
    }
    let seed_lo = read_u32(&mut input)? as u64;
    let seed_hi = read_u32(&mut input)? as u64;
    let mut fields = [0usize; 8];
    for f in &mut fields {
        *f = read_u32(&mut input)? as usize;
    }
    let mut noise = [0u8; 8];
    input.read_exact(&mut noise).map_err(|e| Error::io(ctx(), e))?;
    let spec = DatasetSpec {
        seed: seed_lo | (seed_hi << 32),
        n_labeled: fields[0],
        n_unlabeled: fields[1],
        height: fields[2],
        width: fields[3],
        channels: fields[4],
        classes: fields[5],
        noise_std: f64::from_le_bytes(noise),
        shapes_min: fields[6],
        shapes_max: fields[7],
    };
    spec.validate().map_err(|e| Error::CorruptFile {
        what: "dataset",
        msg: format!("invalid header: {e}"),
    })?;

    let mut read_sample = |id: u64, labeled: bool| -> Result<Sample> {
        let n_px = spec.channels * spec.height * spec.width;
        let mut raw = vec![0u8; n_px * 8];
        input.read_exact(&mut raw).map_err(|e| Error::io(ctx(), e))?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk size 8")))
            .collect();
        let image = Image::new(spec.channels, spec.height, spec.width, data)?;
        let mut lbl = vec![0u8; spec.height * spec.width];
        input.read_exact(&mut lbl).map_err(|e| Error::io(ctx(), e))?;
        let label = LabelMap::new(
            spec.height,
            spec.width,
            lbl.iter().map(|&b| b as u32).collect(),
        )?;
        Ok(Sample { id, image, ground_truth: label, labeled })
    };

    let mut labeled = Vec::with_capacity(spec.n_labeled);
    for id in 0..spec.n_labeled as u64 {
        labeled.push(read_sample(id, true)?);
    }
    let mut unlabeled = Vec::with_capacity(spec.n_unlabeled);
    for id in spec.n_labeled as u64..(spec.n_labeled + spec.n_unlabeled) as u64 {
        unlabeled.push(read_sample(id, false)?);
    }
    Ok(Dataset { spec, labeled, unlabeled })
}
