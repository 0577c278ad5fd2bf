//! A small fully-convolutional segmentation network.
//!
//! Layout: two stride-2 3x3 conv layers (in_channels -> 16 -> D) with ReLU,
//! then three heads on the shared feature grid:
//!
//! - classifier: 1x1 conv to K classes, bilinearly upsampled to input size;
//! - extractor: 3x3 conv, per-channel spatial normalization with learned
//!   affine, ReLU, flattened to a (D, h*w) embedding for correlation;
//! - an optional channel-dropout perturbation applied to the feature grid
//!   before the heads (perturbation branch only), zeroing each channel with
//!   probability 1/2 and doubling survivors.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::data::Image;
use crate::error::{Error, Result};
use crate::rng::{stream, Role};
use crate::tensor::Tensor;

/// Width of the first encoder layer.
pub const HIDDEN_CHANNELS: usize = 16;

/// Total spatial downsampling between input and feature grid.
pub const DOWNSAMPLE: usize = 4;

/// One named parameter buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamBuf {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl ParamBuf {
    fn zeros(shape: &[usize]) -> ParamBuf {
        ParamBuf { shape: shape.to_vec(), data: vec![0.0; shape.iter().product()] }
    }

    fn filled(shape: &[usize], v: f64) -> ParamBuf {
        ParamBuf { shape: shape.to_vec(), data: vec![v; shape.iter().product()] }
    }
}

/// All trainable state, stored as plain buffers. Each training step turns
/// these into fresh autodiff leaves via [`ModelParams::tensors`].
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub in_channels: usize,
    pub feature_dim: usize,
    pub classes: usize,
    pub enc1_weight: ParamBuf,
    pub enc1_bias: ParamBuf,
    pub enc2_weight: ParamBuf,
    pub enc2_bias: ParamBuf,
    pub extract_weight: ParamBuf,
    pub extract_gain: ParamBuf,
    pub extract_bias: ParamBuf,
    pub proj1: ParamBuf,
    pub proj2: ParamBuf,
    pub cls_weight: ParamBuf,
    pub cls_bias: ParamBuf,
}

pub const PARAM_NAMES: [&str; 11] = [
    "enc1_weight",
    "enc1_bias",
    "enc2_weight",
    "enc2_bias",
    "extract_weight",
    "extract_gain",
    "extract_bias",
    "proj1",
    "proj2",
    "cls_weight",
    "cls_bias",
];

impl ModelParams {
    /// Kaiming fan-in Gaussian kernels, zero biases, unit norm gains, and
    /// identity-plus-noise projections. Deterministic in `seed`.
    pub fn init(in_channels: usize, feature_dim: usize, classes: usize, seed: u64) -> Result<Self> {
        if in_channels == 0 || feature_dim == 0 || classes < 2 {
            return Err(Error::invalid(
                "ModelParams::init",
                format!("bad dims: in={in_channels} d={feature_dim} k={classes}"),
            ));
        }
        let mut rng = stream(seed, 0, Role::ModelInit, 0);
        let d = feature_dim;

        let mut kaiming = |shape: &[usize]| -> ParamBuf {
            let fan_in: usize = shape[1..].iter().product();
            let std = (2.0 / fan_in as f64).sqrt();
            let data = (0..shape.iter().product::<usize>())
                .map(|_| std * rng.sample::<f64, _>(StandardNormal))
                .collect();
            ParamBuf { shape: shape.to_vec(), data }
        };
        let enc1_weight = kaiming(&[HIDDEN_CHANNELS, in_channels, 3, 3]);
        let enc2_weight = kaiming(&[d, HIDDEN_CHANNELS, 3, 3]);
        let extract_weight = kaiming(&[d, d, 3, 3]);
        let cls_weight = kaiming(&[classes, d, 1, 1]);

        let mut near_identity = || -> ParamBuf {
            let mut data = vec![0.0; d * d];
            for i in 0..d {
                data[i * d + i] = 1.0;
            }
            for v in &mut data {
                *v += 0.01 * rng.sample::<f64, _>(StandardNormal);
            }
            ParamBuf { shape: vec![d, d], data }
        };
        let proj1 = near_identity();
        let proj2 = near_identity();

        Ok(ModelParams {
            in_channels,
            feature_dim: d,
            classes,
            enc1_weight,
            enc1_bias: ParamBuf::zeros(&[HIDDEN_CHANNELS]),
            enc2_weight,
            enc2_bias: ParamBuf::zeros(&[d]),
            extract_weight,
            extract_gain: ParamBuf::filled(&[d], 1.0),
            extract_bias: ParamBuf::zeros(&[d]),
            proj1,
            proj2,
            cls_weight,
            cls_bias: ParamBuf::zeros(&[classes]),
        })
    }

    pub fn named(&self) -> Vec<(&'static str, &ParamBuf)> {
        vec![
            ("enc1_weight", &self.enc1_weight),
            ("enc1_bias", &self.enc1_bias),
            ("enc2_weight", &self.enc2_weight),
            ("enc2_bias", &self.enc2_bias),
            ("extract_weight", &self.extract_weight),
            ("extract_gain", &self.extract_gain),
            ("extract_bias", &self.extract_bias),
            ("proj1", &self.proj1),
            ("proj2", &self.proj2),
            ("cls_weight", &self.cls_weight),
            ("cls_bias", &self.cls_bias),
        ]
    }

    pub fn named_mut(&mut self) -> Vec<(&'static str, &mut ParamBuf)> {
        vec![
            ("enc1_weight", &mut self.enc1_weight),
            ("enc1_bias", &mut self.enc1_bias),
            ("enc2_weight", &mut self.enc2_weight),
            ("enc2_bias", &mut self.enc2_bias),
            ("extract_weight", &mut self.extract_weight),
            ("extract_gain", &mut self.extract_gain),
            ("extract_bias", &mut self.extract_bias),
            ("proj1", &mut self.proj1),
            ("proj2", &mut self.proj2),
            ("cls_weight", &mut self.cls_weight),
            ("cls_bias", &mut self.cls_bias),
        ]
    }

    /// Fresh trainable leaves over the current buffer values.
    pub fn tensors(&self) -> ParamTensors {
        self.lift_with(|b| Tensor::param(&b.shape, b.data.clone()))
    }

    /// Untracked leaves for inference; forwards built from these never
    /// record gradients.
    pub fn tensors_frozen(&self) -> ParamTensors {
        self.lift_with(|b| Tensor::leaf(&b.shape, b.data.clone()))
    }

    fn lift_with(&self, f: impl Fn(&ParamBuf) -> Result<Tensor>) -> ParamTensors {
        let lift = |b: &ParamBuf| f(b).expect("buffer shape is consistent");
        ParamTensors {
            enc1_weight: lift(&self.enc1_weight),
            enc1_bias: lift(&self.enc1_bias),
            enc2_weight: lift(&self.enc2_weight),
            enc2_bias: lift(&self.enc2_bias),
            extract_weight: lift(&self.extract_weight),
            extract_gain: lift(&self.extract_gain),
            extract_bias: lift(&self.extract_bias),
            proj1: lift(&self.proj1),
            proj2: lift(&self.proj2),
            cls_weight: lift(&self.cls_weight),
            cls_bias: lift(&self.cls_bias),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_checkpoint(path, self)
    }

    pub fn load(path: &Path) -> Result<ModelParams> {
        read_checkpoint(path)
    }
}

/// The parameter set lifted into autodiff leaves for one step.
#[derive(Clone)]
pub struct ParamTensors {
    pub enc1_weight: Tensor,
    pub enc1_bias: Tensor,
    pub enc2_weight: Tensor,
    pub enc2_bias: Tensor,
    pub extract_weight: Tensor,
    pub extract_gain: Tensor,
    pub extract_bias: Tensor,
    pub proj1: Tensor,
    pub proj2: Tensor,
    pub cls_weight: Tensor,
    pub cls_bias: Tensor,
}

impl ParamTensors {
    /// Fixed order matching [`PARAM_NAMES`].
    pub fn list(&self) -> Vec<&Tensor> {
        vec![
            &self.enc1_weight,
            &self.enc1_bias,
            &self.enc2_weight,
            &self.enc2_bias,
            &self.extract_weight,
            &self.extract_gain,
            &self.extract_bias,
            &self.proj1,
            &self.proj2,
            &self.cls_weight,
            &self.cls_bias,
        ]
    }

    /// Rebuilds the set from tensors in [`PARAM_NAMES`] order, e.g. inside a
    /// gradient-check closure.
    pub fn from_list(tensors: &[Tensor]) -> Result<ParamTensors> {
        if tensors.len() != PARAM_NAMES.len() {
            return Err(Error::invalid(
                "ParamTensors::from_list",
                format!("expected {} tensors, got {}", PARAM_NAMES.len(), tensors.len()),
            ));
        }
        Ok(ParamTensors {
            enc1_weight: tensors[0].clone(),
            enc1_bias: tensors[1].clone(),
            enc2_weight: tensors[2].clone(),
            enc2_bias: tensors[3].clone(),
            extract_weight: tensors[4].clone(),
            extract_gain: tensors[5].clone(),
            extract_bias: tensors[6].clone(),
            proj1: tensors[7].clone(),
            proj2: tensors[8].clone(),
            cls_weight: tensors[9].clone(),
            cls_bias: tensors[10].clone(),
        })
    }
}

/// Encoder: two stride-2 convs with ReLU. (C, H, W) -> (D, H/4, W/4) for
/// inputs whose sides are multiples of [`DOWNSAMPLE`].
pub fn encode(t: &ParamTensors, image: &Tensor) -> Result<Tensor> {
    let s = image.shape();
    if s.len() != 3 || s[1] % DOWNSAMPLE != 0 || s[2] % DOWNSAMPLE != 0 {
        return Err(Error::invalid(
            "encode",
            format!("input {s:?} must be (C, H, W) with H, W multiples of {DOWNSAMPLE}"),
        ));
    }
    let x = image
        .conv2d(&t.enc1_weight, 2, 1)?
        .channel_bias(&t.enc1_bias)?
        .relu();
    let x = x
        .conv2d(&t.enc2_weight, 2, 1)?
        .channel_bias(&t.enc2_bias)?
        .relu();
    Ok(x)
}

/// Zeroes the channels where `keep` is false and doubles the survivors, so
/// the expected activation is unchanged.
pub fn channel_dropout(feature: &Tensor, keep: &[bool]) -> Result<Tensor> {
    let s = feature.shape();
    if s.len() != 3 || keep.len() != s[0] {
        return Err(Error::invalid(
            "channel_dropout",
            format!("mask of {} channels for feature {s:?}", keep.len()),
        ));
    }
    let plane = s[1] * s[2];
    let mut factor = vec![0.0; feature.numel()];
    for (c, &k) in keep.iter().enumerate() {
        if k {
            factor[c * plane..(c + 1) * plane].fill(2.0);
        }
    }
    feature.mul(&Tensor::leaf(s, factor)?)
}

/// Independent keep/drop coin per channel at p = 1/2.
pub fn sample_dropout_mask<R: Rng>(channels: usize, rng: &mut R) -> Vec<bool> {
    (0..channels).map(|_| rng.gen_bool(0.5)).collect()
}

/// Classifier head: 1x1 conv to class scores, bilinearly upsampled to
/// (out_h, out_w).
pub fn classify(t: &ParamTensors, feature: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    feature
        .conv2d(&t.cls_weight, 1, 0)?
        .channel_bias(&t.cls_bias)?
        .bilinear_resize(out_h, out_w)
}

/// Extractor head: 3x3 conv, spatial normalization with learned affine,
/// ReLU, flattened to (D, h*w).
pub fn extract(t: &ParamTensors, feature: &Tensor) -> Result<Tensor> {
    let e = feature
        .conv2d(&t.extract_weight, 1, 1)?
        .spatial_norm()?
        .channel_affine(&t.extract_gain, &t.extract_bias)?
        .relu();
    let s = e.shape().to_vec();
    e.reshape(&[s[0], s[1] * s[2]])
}

/// Logits at input resolution, the shared feature grid, and the flattened
/// correlation embedding.
pub struct ForwardOutput {
    pub logits: Tensor,
    pub feature: Tensor,
    pub embedding: Tensor,
}

/// Full forward pass. `perturb` routes the feature grid through channel
/// dropout before both heads; `None` leaves it untouched.
pub fn forward(t: &ParamTensors, image: &Image, perturb: Option<&[bool]>) -> Result<ForwardOutput> {
    let input = image.to_tensor();
    let feature = encode(t, &input)?;
    let used = match perturb {
        Some(keep) => channel_dropout(&feature, keep)?,
        None => feature.clone(),
    };
    let logits = classify(t, &used, image.height(), image.width())?;
    let embedding = extract(t, &used)?;
    Ok(ForwardOutput { logits, feature: used, embedding })
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"CMPT";
const CHECKPOINT_VERSION: u32 = 1;

/// Writes all parameters: magic, version, then per tensor the name length,
/// name bytes, rank, dims (little-endian u32) and the data as little-endian
/// f64, in [`PARAM_NAMES`] order.
pub fn write_checkpoint(path: &Path, params: &ModelParams) -> Result<()> {
    let ctx = || format!("writing checkpoint {}", path.display());
    let file = File::create(path).map_err(|e| Error::io(ctx(), e))?;
    let mut out = BufWriter::new(file);
    let mut w = |bytes: &[u8]| out.write_all(bytes).map_err(|e| Error::io(ctx(), e));

    w(CHECKPOINT_MAGIC)?;
    w(&CHECKPOINT_VERSION.to_le_bytes())?;
    for (name, buf) in params.named() {
        w(&(name.len() as u32).to_le_bytes())?;
        w(name.as_bytes())?;
        w(&(buf.shape.len() as u32).to_le_bytes())?;
        for &d in &buf.shape {
            w(&(d as u32).to_le_bytes())?;
        }
        for v in &buf.data {
            w(&v.to_le_bytes())?;
        }
    }
    out.flush().map_err(|e| Error::io(ctx(), e))
}

/// Reads a checkpoint written by [`write_checkpoint`], checking names,
/// order, and shape consistency.
pub fn read_checkpoint(path: &Path) -> Result<ModelParams> {
    let ctx = || format!("reading checkpoint {}", path.display());
    let file = File::open(path).map_err(|e| Error::io(ctx(), e))?;
    let mut input = BufReader::new(file);

    let mut magic = [0u8; 4];
    input.read_exact(&mut magic).map_err(|e| Error::io(ctx(), e))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::CorruptFile { what: "checkpoint", msg: format!("bad magic {magic:?}") });
    }
    let mut u32_buf = [0u8; 4];
    input.read_exact(&mut u32_buf).map_err(|e| Error::io(ctx(), e))?;
    let version = u32::from_le_bytes(u32_buf);
    if version != CHECKPOINT_VERSION {
        return Err(Error::CorruptFile {
            what: "checkpoint",
            msg: format!("unsupported version {version}"),
        });
    }

    let mut bufs = Vec::new();
    for expected in PARAM_NAMES {
        input.read_exact(&mut u32_buf).map_err(|e| Error::io(ctx(), e))?;
        let name_len = u32::from_le_bytes(u32_buf) as usize;
        let mut name = vec![0u8; name_len];
        input.read_exact(&mut name).map_err(|e| Error::io(ctx(), e))?;
        let name = String::from_utf8(name).map_err(|_| Error::CorruptFile {
            what: "checkpoint",
            msg: "parameter name is not utf-8".to_string(),
        })?;
        if name != expected {
            return Err(Error::CorruptFile {
                what: "checkpoint",
                msg: format!("expected parameter {expected}, found {name}"),
            });
        }
        input.read_exact(&mut u32_buf).map_err(|e| Error::io(ctx(), e))?;
        let rank = u32::from_le_bytes(u32_buf) as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            input.read_exact(&mut u32_buf).map_err(|e| Error::io(ctx(), e))?;
            shape.push(u32::from_le_bytes(u32_buf) as usize);
        }
        let numel: usize = shape.iter().product();
        let mut raw = vec![0u8; numel * 8];
        input.read_exact(&mut raw).map_err(|e| Error::io(ctx(), e))?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk size 8")))
            .collect();
        bufs.push(ParamBuf { shape, data });
    }

    let dims_err = |msg: String| Error::CorruptFile { what: "checkpoint", msg };
    let enc1 = &bufs[0];
    let enc2 = &bufs[2];
    let cls = &bufs[9];
    if enc1.shape.len() != 4 || enc2.shape.len() != 4 || cls.shape.len() != 4 {
        return Err(dims_err("kernel tensors must be rank 4".to_string()));
    }
    let params = ModelParams {
        in_channels: enc1.shape[1],
        feature_dim: enc2.shape[0],
        classes: cls.shape[0],
        enc1_weight: bufs[0].clone(),
        enc1_bias: bufs[1].clone(),
        enc2_weight: bufs[2].clone(),
        enc2_bias: bufs[3].clone(),
        extract_weight: bufs[4].clone(),
        extract_gain: bufs[5].clone(),
        extract_bias: bufs[6].clone(),
        proj1: bufs[7].clone(),
        proj2: bufs[8].clone(),
        cls_weight: bufs[9].clone(),
        cls_bias: bufs[10].clone(),
    };
    if params.proj1.shape != vec![params.feature_dim, params.feature_dim] {
        return Err(dims_err(format!(
            "projection shape {:?} does not match feature dim {}",
            params.proj1.shape, params.feature_dim
        )));
    }
    Ok(params)
}
