//! Model-free threshold simulation: drives the EMA update with synthetic
//! proposal streams from several initial values at once.

use corrmatch_core::engine::ThresholdState;
use corrmatch_core::rng::{stream, Role};
use rand::Rng;

use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum StreamKind {
    /// Every proposal is the same value.
    Constant(f64),
    /// Proposals move linearly from the first value to the second.
    Ramp(f64, f64),
    /// Mean plus uniform noise in [-amplitude, amplitude], clamped to [0, 1].
    Noisy { mean: f64, amplitude: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimSpec {
    pub kind: StreamKind,
    pub tau0: Vec<f64>,
    pub lambda: f64,
    pub steps: u64,
    pub seed: u64,
}

impl Default for SimSpec {
    fn default() -> Self {
        SimSpec {
            kind: StreamKind::Constant(0.6),
            tau0: vec![0.75, 0.85, 0.95],
            lambda: 0.999,
            steps: 2000,
            seed: 0,
        }
    }
}

/// Parses `key=value` pairs separated by `;`, e.g.
/// `kind=noisy:0.6:0.2;tau0=0.75,0.85,0.95;lambda=0.999;steps=2000;seed=0`.
pub fn parse_spec(text: &str) -> Result<SimSpec> {
    let mut spec = SimSpec::default();
    let mut saw_kind = false;
    for part in text.split(';').filter(|p| !p.trim().is_empty()) {
        let (key, value) = part
            .split_once('=')
            .ok_or_else(|| CliError::config(format!("spec part {part:?} is not key=value")))?;
        let (key, value) = (key.trim(), value.trim());
        match key {
            "kind" => {
                spec.kind = parse_kind(value)?;
                saw_kind = true;
            }
            "tau0" => {
                spec.tau0 = value
                    .split(',')
                    .map(|v| parse_unit(v.trim(), "tau0"))
                    .collect::<Result<Vec<f64>>>()?;
                if spec.tau0.is_empty() {
                    return Err(CliError::config("tau0 list is empty"));
                }
            }
            "lambda" => {
                let v: f64 = value
                    .parse()
                    .map_err(|_| CliError::config(format!("lambda {value:?} is not a number")))?;
                if !(0.0..1.0).contains(&v) {
                    return Err(CliError::config(format!("lambda {v} must lie in [0, 1)")));
                }
                spec.lambda = v;
            }
            "steps" => {
                spec.steps = value
                    .parse()
                    .map_err(|_| CliError::config(format!("steps {value:?} is not a count")))?;
                if spec.steps == 0 {
                    return Err(CliError::config("steps must be at least 1"));
                }
            }
            "seed" => {
                spec.seed = value
                    .parse()
                    .map_err(|_| CliError::config(format!("seed {value:?} is not a number")))?;
            }
            other => {
                return Err(CliError::config(format!(
                    "unknown spec key {other:?}, expected kind, tau0, lambda, steps, seed"
                )))
            }
        }
    }
    if !saw_kind {
        return Err(CliError::config("spec is missing kind=constant:…|ramp:…|noisy:…"));
    }
    Ok(spec)
}

fn parse_kind(value: &str) -> Result<StreamKind> {
    let mut parts = value.split(':');
    let name = parts.next().unwrap_or_default();
    let args: Vec<&str> = parts.collect();
    match (name, args.as_slice()) {
        ("constant", [c]) => Ok(StreamKind::Constant(parse_unit(c, "constant value")?)),
        ("ramp", [a, b]) => Ok(StreamKind::Ramp(
            parse_unit(a, "ramp start")?,
            parse_unit(b, "ramp end")?,
        )),
        ("noisy", [mean, amp]) => {
            let mean = parse_unit(mean, "noisy mean")?;
            let amplitude: f64 = amp
                .parse()
                .map_err(|_| CliError::config(format!("noisy amplitude {amp:?} is not a number")))?;
            if !(0.0..=1.0).contains(&amplitude) {
                return Err(CliError::config(format!("noisy amplitude {amplitude} must lie in [0, 1]")));
            }
            Ok(StreamKind::Noisy { mean, amplitude })
        }
        _ => Err(CliError::config(format!(
            "kind {value:?} is not constant:<c>, ramp:<a>:<b>, or noisy:<mean>:<amplitude>"
        ))),
    }
}

fn parse_unit(text: &str, what: &str) -> Result<f64> {
    let v: f64 = text
        .parse()
        .map_err(|_| CliError::config(format!("{what} {text:?} is not a number")))?;
    if !(0.0..=1.0).contains(&v) {
        return Err(CliError::config(format!("{what} {v} must lie in [0, 1]")));
    }
    Ok(v)
}

/// The proposal sequence of a spec; every initialization consumes this same
/// sequence.
pub fn proposals(spec: &SimSpec) -> Vec<f64> {
    let mut rng = stream(spec.seed, 0, Role::ThresholdStream, 0);
    (0..spec.steps)
        .map(|t| match spec.kind {
            StreamKind::Constant(c) => c,
            StreamKind::Ramp(a, b) => {
                if spec.steps <= 1 {
                    a
                } else {
                    a + (b - a) * t as f64 / (spec.steps - 1) as f64
                }
            }
            StreamKind::Noisy { mean, amplitude } => {
                let noise = if amplitude > 0.0 {
                    rng.gen_range(-amplitude..amplitude)
                } else {
                    0.0
                };
                (mean + noise).clamp(0.0, 1.0)
            }
        })
        .collect()
}

/// Runs the simulation and renders the trajectory table as CSV text:
/// one row per update, one tau column per initialization.
pub fn simulate_csv(spec: &SimSpec) -> Result<String> {
    let proposals = proposals(spec);
    let mut states = spec
        .tau0
        .iter()
        .map(|&t0| Ok(ThresholdState::relaxed_global(t0, spec.lambda)?))
        .collect::<Result<Vec<ThresholdState>>>()?;

    let mut out = String::from("step,proposal");
    for t0 in &spec.tau0 {
        out.push_str(&format!(",tau_{t0}"));
    }
    out.push('\n');
    for (t, &p) in proposals.iter().enumerate() {
        out.push_str(&format!("{},{}", t + 1, p));
        for state in &mut states {
            state.update(p)?;
            out.push_str(&format!(",{}", state.value()));
        }
        out.push('\n');
    }
    Ok(out)
}
