//! One deterministic training run: batch sampling, step loop, CSV logging,
//! periodic evaluation, checkpoint, and plots.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use corrmatch_core::data::{self, Sample};
use corrmatch_core::engine::{evaluate_miou, poly_lr, train_step, SgdMomentum, POLY_POWER};
use corrmatch_core::metrics::StepDiagnostics;
use corrmatch_core::model::ModelParams;
use corrmatch_core::rng::{stream, Role};
use corrmatch_core::Error;
use rand::Rng;

use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::svg;

pub const METRICS_HEADER: &str =
    "iteration,lr,ls_h,ls_c,lu_h,lu_s,lu_c,total,tau,val_miou";
pub const DIAGNOSTICS_HEADER: &str =
    "iteration,mask_ratio,mining_ratio,filter_ratio,correct_pseudo_ratio,pixel_accuracy";

/// Mean diagnostics over the last quarter of the run.
#[derive(Debug, Clone, Copy, Default)]
pub struct TailMeans {
    pub mask_ratio: f64,
    pub mining_ratio: f64,
    pub filter_ratio: f64,
    pub correct_pseudo_ratio: f64,
    pub pixel_accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub iterations: u64,
    pub final_miou: Option<f64>,
    pub tail: TailMeans,
}

struct LoggedStep {
    iteration: u64,
    lr: f64,
    losses: corrmatch_core::engine::LossValues,
    tau: f64,
    miou: Option<f64>,
    diag: StepDiagnostics,
}

fn sample_batch<'a>(
    pool: &'a [Sample],
    batch: usize,
    seed: u64,
    iteration: u64,
    role: Role,
) -> Vec<&'a Sample> {
    let mut rng = stream(seed, iteration, role, 0);
    (0..batch).map(|_| &pool[rng.gen_range(0..pool.len())]).collect()
}

/// Formats a float with the shortest representation that round-trips, so
/// CSV consumers can reconstruct the exact value.
pub(crate) fn fmt(v: f64) -> String {
    format!("{v}")
}

pub fn run_training(cfg: &RunConfig, out_dir: &Path) -> Result<RunSummary> {
    cfg.validate()?;
    let spec = cfg.dataset_spec();
    let dataset = data::generate(&spec)?;
    let val = data::generate_val(&spec, cfg.n_val)?;
    let engine_cfg = cfg.engine_config();

    let mut params =
        ModelParams::init(cfg.channels, cfg.feature_dim, cfg.classes, cfg.seed)?;
    let mut opt = SgdMomentum::new(&params, cfg.momentum)?;
    let mut threshold = cfg.threshold_state()?;

    std::fs::create_dir_all(out_dir)
        .map_err(|e| CliError::config(format!("creating {}: {e}", out_dir.display())))?;
    let mut metrics = csv_writer(&out_dir.join("metrics.csv"), METRICS_HEADER)?;
    let mut diagnostics = csv_writer(&out_dir.join("diagnostics.csv"), DIAGNOSTICS_HEADER)?;

    let mut history: Vec<LoggedStep> = Vec::with_capacity(cfg.total_iters as usize);
    let unlabeled_batch = if cfg.supervised_only || cfg.n_unlabeled == 0 {
        0
    } else {
        cfg.batch_unlabeled
    };

    for iteration in 0..cfg.total_iters {
        let labeled = sample_batch(
            &dataset.labeled,
            cfg.batch_labeled,
            cfg.seed,
            iteration,
            Role::LabeledBatch,
        );
        let unlabeled = if unlabeled_batch == 0 {
            Vec::new()
        } else {
            sample_batch(
                &dataset.unlabeled,
                unlabeled_batch,
                cfg.seed,
                iteration,
                Role::UnlabeledBatch,
            )
        };

        let step = train_step(
            &mut params,
            &mut opt,
            &mut threshold,
            &labeled,
            &unlabeled,
            iteration,
            &engine_cfg,
        );
        let (losses, diag) = match step {
            Ok(v) => v,
            Err(Error::NonFinite { context, value }) => {
                metrics.flush()?;
                diagnostics.flush()?;
                let msg = format!("{context} (value {value})");
                std::fs::write(out_dir.join("abort.txt"), format!("{msg}\n"))?;
                return Err(CliError::Numerical(msg));
            }
            Err(other) => return Err(other.into()),
        };

        let lr = poly_lr(cfg.lr0, iteration, cfg.total_iters, POLY_POWER);
        let eval_now =
            (iteration + 1) % cfg.eval_interval == 0 || iteration + 1 == cfg.total_iters;
        let miou = if eval_now {
            Some(evaluate_miou(&params, &val, cfg.classes)?)
        } else {
            None
        };

        writeln!(
            metrics,
            "{},{},{},{},{},{},{},{},{},{}",
            iteration,
            fmt(lr),
            fmt(losses.sup_hard),
            fmt(losses.sup_corr),
            fmt(losses.unsup_hard),
            fmt(losses.unsup_soft),
            fmt(losses.unsup_corr),
            fmt(losses.total),
            fmt(diag.threshold),
            miou.map(fmt).unwrap_or_default(),
        )?;
        writeln!(
            diagnostics,
            "{},{},{},{},{},{}",
            iteration,
            fmt(diag.mask_ratio),
            fmt(diag.mining_ratio),
            fmt(diag.filter_ratio),
            fmt(diag.correct_pseudo_ratio),
            fmt(diag.pixel_accuracy),
        )?;

        history.push(LoggedStep {
            iteration,
            lr,
            losses,
            tau: diag.threshold,
            miou,
            diag,
        });
    }
    metrics.flush()?;
    diagnostics.flush()?;

    params.save(&out_dir.join("model.cmpt"))?;
    write_plots(out_dir, &history)?;

    Ok(summarize(&history))
}

fn csv_writer(path: &Path, header: &str) -> Result<BufWriter<File>> {
    let file = File::create(path)
        .map_err(|e| CliError::config(format!("creating {}: {e}", path.display())))?;
    let mut w = BufWriter::new(file);
    writeln!(w, "{header}")?;
    Ok(w)
}

fn summarize(history: &[LoggedStep]) -> RunSummary {
    let n = history.len();
    let tail_len = (n.max(4) / 4).min(n).max(1);
    let tail_slice = &history[n - tail_len..];
    let mut tail = TailMeans::default();
    for step in tail_slice {
        tail.mask_ratio += step.diag.mask_ratio;
        tail.mining_ratio += step.diag.mining_ratio;
        tail.filter_ratio += step.diag.filter_ratio;
        tail.correct_pseudo_ratio += step.diag.correct_pseudo_ratio;
        tail.pixel_accuracy += step.diag.pixel_accuracy;
    }
    let scale = 1.0 / tail_slice.len() as f64;
    tail.mask_ratio *= scale;
    tail.mining_ratio *= scale;
    tail.filter_ratio *= scale;
    tail.correct_pseudo_ratio *= scale;
    tail.pixel_accuracy *= scale;

    RunSummary {
        iterations: n as u64,
        final_miou: history.iter().rev().find_map(|s| s.miou),
        tail,
    }
}

fn write_plots(out_dir: &Path, history: &[LoggedStep]) -> Result<()> {
    let series = |f: &dyn Fn(&LoggedStep) -> Option<f64>| -> Vec<(f64, f64)> {
        history
            .iter()
            .filter_map(|s| f(s).map(|y| (s.iteration as f64, y)))
            .collect()
    };
    let quantities: [(&str, Vec<(f64, f64)>); 11] = [
        ("ls_h", series(&|s| Some(s.losses.sup_hard))),
        ("ls_c", series(&|s| Some(s.losses.sup_corr))),
        ("lu_h", series(&|s| Some(s.losses.unsup_hard))),
        ("lu_s", series(&|s| Some(s.losses.unsup_soft))),
        ("lu_c", series(&|s| Some(s.losses.unsup_corr))),
        ("total", series(&|s| Some(s.losses.total))),
        ("tau", series(&|s| Some(s.tau))),
        ("lr", series(&|s| Some(s.lr))),
        ("val_miou", series(&|s| s.miou)),
        ("mask_ratio", series(&|s| Some(s.diag.mask_ratio))),
        ("mining_ratio", series(&|s| Some(s.diag.mining_ratio))),
    ];
    for (name, points) in quantities {
        svg::line_plot(&out_dir.join(format!("plot_{name}.svg")), name, &points)?;
    }
    Ok(())
}

/// Writes the generated dataset as a CMDS file and returns its path.
pub fn run_generate(cfg: &RunConfig, out_dir: &Path) -> Result<std::path::PathBuf> {
    cfg.validate()?;
    let dataset = data::generate(&cfg.dataset_spec())?;
    std::fs::create_dir_all(out_dir)
        .map_err(|e| CliError::config(format!("creating {}: {e}", out_dir.display())))?;
    let path = out_dir.join("dataset.cmds");
    data::write_dataset(&path, &dataset)?;
    Ok(path)
}
