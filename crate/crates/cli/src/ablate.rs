//! Ablation sweeps: the cross product of threshold modes, component
//! presets, and seeds, each cell trained to completion and summarized in
//! one CSV row.

use std::path::Path;

use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::runner::{self, fmt};

pub const ABLATION_HEADER: &str =
    "mode,tau0,components,seed,status,final_miou,mask_ratio,mining_ratio,filter_ratio,correct_pseudo_ratio,pixel_accuracy";

#[derive(Debug, Clone, PartialEq)]
pub struct ModeSpec {
    /// One of the threshold_mode strings accepted by the run config.
    pub mode: String,
    /// Initial (or, for fixed mode, permanent) threshold.
    pub tau0: f64,
}

impl ModeSpec {
    pub fn label(&self) -> String {
        if self.mode == "fixed" {
            format!("fixed:{}", self.tau0)
        } else {
            self.mode.clone()
        }
    }
}

/// Component presets. Only the losses that sit on top of the shared
/// hard-label branch are toggled; feature perturbation and mixing stay as
/// the base config set them.
pub const COMPONENTS: &[&str] = &["supervised", "hard", "hard+soft", "hard+corr", "full"];

#[derive(Debug, Clone, PartialEq)]
pub struct Sweep {
    pub modes: Vec<ModeSpec>,
    pub components: Vec<String>,
    pub seeds: Vec<u64>,
}

/// Parses `modes=relaxed_global,fixed:0.95;components=full,hard;seeds=0,1,2`.
/// Missing keys fall back to the base config's mode, the full preset, and
/// the base seed.
pub fn parse_sweep(text: &str, base: &RunConfig) -> Result<Sweep> {
    let mut sweep = Sweep {
        modes: vec![ModeSpec {
            mode: base.threshold_mode.clone(),
            tau0: base.tau0,
        }],
        components: vec!["full".to_string()],
        seeds: vec![base.seed],
    };
    for part in text.split(';').filter(|p| !p.trim().is_empty()) {
        let (key, value) = part
            .split_once('=')
            .ok_or_else(|| CliError::config(format!("sweep part {part:?} is not key=value")))?;
        match key.trim() {
            "modes" => {
                sweep.modes = value
                    .split(',')
                    .map(|m| parse_mode(m.trim(), base))
                    .collect::<Result<Vec<ModeSpec>>>()?;
                if sweep.modes.is_empty() {
                    return Err(CliError::config("modes list is empty"));
                }
            }
            "components" => {
                sweep.components = value
                    .split(',')
                    .map(|c| {
                        let c = c.trim();
                        if COMPONENTS.contains(&c) {
                            Ok(c.to_string())
                        } else {
                            Err(CliError::config(format!(
                                "unknown component preset {c:?}, expected one of {COMPONENTS:?}"
                            )))
                        }
                    })
                    .collect::<Result<Vec<String>>>()?;
                if sweep.components.is_empty() {
                    return Err(CliError::config("components list is empty"));
                }
            }
            "seeds" => {
                sweep.seeds = value
                    .split(',')
                    .map(|s| {
                        s.trim().parse::<u64>().map_err(|_| {
                            CliError::config(format!("seed {s:?} is not a number"))
                        })
                    })
                    .collect::<Result<Vec<u64>>>()?;
                if sweep.seeds.is_empty() {
                    return Err(CliError::config("seeds list is empty"));
                }
            }
            other => {
                return Err(CliError::config(format!(
                    "unknown sweep key {other:?}, expected modes, components, seeds"
                )))
            }
        }
    }
    Ok(sweep)
}

fn parse_mode(text: &str, base: &RunConfig) -> Result<ModeSpec> {
    match text.split_once(':') {
        Some(("fixed", value)) => {
            let tau0: f64 = value
                .parse()
                .map_err(|_| CliError::config(format!("fixed threshold {value:?} is not a number")))?;
            Ok(ModeSpec {
                mode: "fixed".to_string(),
                tau0,
            })
        }
        Some((other, _)) => Err(CliError::config(format!(
            "mode {other:?} does not take a value, only fixed:<tau> does"
        ))),
        None => match text {
            "fixed" | "relaxed_global" | "relaxed_per_class" => Ok(ModeSpec {
                mode: text.to_string(),
                tau0: base.tau0,
            }),
            other => Err(CliError::config(format!(
                "unknown threshold mode {other:?}"
            ))),
        },
    }
}

/// The base config specialized to one sweep cell.
pub fn cell_config(base: &RunConfig, mode: &ModeSpec, components: &str, seed: u64) -> RunConfig {
    let mut cfg = base.clone();
    cfg.threshold_mode = mode.mode.clone();
    cfg.tau0 = mode.tau0;
    cfg.seed = seed;
    cfg.supervised_only = components == "supervised";
    match components {
        "hard" | "supervised" => {
            cfg.use_soft_loss = false;
            cfg.use_corr_loss = false;
        }
        "hard+soft" => {
            cfg.use_soft_loss = true;
            cfg.use_corr_loss = false;
        }
        "hard+corr" => {
            cfg.use_soft_loss = false;
            cfg.use_corr_loss = true;
        }
        _ => {
            cfg.use_soft_loss = true;
            cfg.use_corr_loss = true;
        }
    }
    cfg
}

fn cell_dir_name(mode: &ModeSpec, components: &str, seed: u64) -> String {
    format!("{}_{}_s{}", mode.label(), components, seed)
        .replace([':', '+'], "-")
}

/// Runs every cell sequentially, writing each run into its own
/// subdirectory and the summary table to `ablation.csv`. A cell that fails
/// numerically is recorded with empty measurements and the sweep moves on.
pub fn run_ablation(base: &RunConfig, sweep: &Sweep, out_dir: &Path) -> Result<std::path::PathBuf> {
    std::fs::create_dir_all(out_dir)?;
    let mut rows = String::from(ABLATION_HEADER);
    rows.push('\n');
    for mode in &sweep.modes {
        for components in &sweep.components {
            for &seed in &sweep.seeds {
                let cfg = cell_config(base, mode, components, seed);
                cfg.validate()?;
                let cell_dir = out_dir.join(cell_dir_name(mode, components, seed));
                let row = match runner::run_training(&cfg, &cell_dir) {
                    Ok(summary) => {
                        let miou = summary.final_miou.map(fmt).unwrap_or_default();
                        let t = &summary.tail;
                        format!(
                            "{},{},{},{},ok,{},{},{},{},{},{}",
                            mode.label(),
                            fmt(mode.tau0),
                            components,
                            seed,
                            miou,
                            fmt(t.mask_ratio),
                            fmt(t.mining_ratio),
                            fmt(t.filter_ratio),
                            fmt(t.correct_pseudo_ratio),
                            fmt(t.pixel_accuracy),
                        )
                    }
                    Err(CliError::Numerical(reason)) => {
                        eprintln!(
                            "cell {} {} seed {} failed: {}",
                            mode.label(),
                            components,
                            seed,
                            reason
                        );
                        format!(
                            "{},{},{},{},failed,,,,,,",
                            mode.label(),
                            fmt(mode.tau0),
                            components,
                            seed,
                        )
                    }
                    Err(other) => return Err(other),
                };
                rows.push_str(&row);
                rows.push('\n');
            }
        }
    }
    let csv_path = out_dir.join("ablation.csv");
    std::fs::write(&csv_path, rows)?;
    Ok(csv_path)
}
