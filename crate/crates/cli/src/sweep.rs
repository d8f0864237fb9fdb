//! One-axis sweeps: a pipeline run per grid point, all sharing one stage cache.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::pipeline::Pipeline;
use crate::report::{Defense, RunStatus};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum Axis {
    HoldingRatio,
    BetaOverAlpha,
    TriggerSize,
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Axis::HoldingRatio => "holding_ratio",
            Axis::BetaOverAlpha => "beta_over_alpha",
            Axis::TriggerSize => "trigger_size",
        })
    }
}

/// Ratios of the beta/alpha grid; beta stays at 1 and alpha = 1 / ratio.
pub const BETA_OVER_ALPHA: [f64; 6] = [0.001, 0.01, 0.1, 1.0, 10.0, 100.0];
pub const TRIGGER_SIZES: [usize; 3] = [3, 5, 7];

impl Axis {
    pub fn values(self) -> Vec<f64> {
        match self {
            Axis::HoldingRatio => (1..=10).map(|i| i as f64 / 100.0).collect(),
            Axis::BetaOverAlpha => BETA_OVER_ALPHA.to_vec(),
            Axis::TriggerSize => TRIGGER_SIZES.iter().map(|&s| s as f64).collect(),
        }
    }

    /// `base` with the axis set to `value`.
    pub fn apply(self, base: &ExperimentConfig, value: f64) -> ExperimentConfig {
        let mut cfg = base.clone();
        match self {
            Axis::HoldingRatio => cfg.split.holding_ratio = value,
            Axis::BetaOverAlpha => {
                cfg.unlearn.beta = 1.0;
                cfg.unlearn.alpha = 1.0 / value;
            }
            Axis::TriggerSize => cfg.attack.size = value as usize,
        }
        cfg
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: f64,
    pub status: String,
    /// Post-unlearning metrics; empty when unlearning did not run.
    pub asr: Option<f64>,
    pub acc: Option<f64>,
    pub before_asr: Option<f64>,
    pub before_acc: Option<f64>,
    pub finetune_asr: Option<f64>,
    pub finetune_acc: Option<f64>,
    pub pool_size: Option<usize>,
    pub error: Option<String>,
}

/// Runs every grid point of `axis` under `out/sweep_<axis>/<value>/` with a shared cache at `out/cache`,
/// then writes `out/tables/sweep_<axis>.csv`. A failing point is recorded and the sweep moves on.
pub fn sweep(base: &ExperimentConfig, axis: Axis, out: &Path) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    for value in axis.values() {
        let mut cfg = axis.apply(base, value);
        cfg.out_dir = point_dir(out, axis, value);
        log::info!("{axis} = {value}");
        let row = match cfg.validate() {
            Err(e) => failed_row(value, format!("[config] {e:#}")),
            Ok(()) => match Pipeline::new(cfg).with_cache_dir(out.join("cache")).run() {
                Err(e) => failed_row(value, e.to_string()),
                Ok(report) => {
                    let metric = |d: Defense| report.row(d).map(|r| (r.asr, r.acc));
                    let (asr, acc) = metric(Defense::Unlearn).unzip();
                    let (before_asr, before_acc) = metric(Defense::None).unzip();
                    let (finetune_asr, finetune_acc) = metric(Defense::FineTune).unzip();
                    SweepRow {
                        value,
                        status: status_name(report.status).into(),
                        asr,
                        acc,
                        before_asr,
                        before_acc,
                        finetune_asr,
                        finetune_acc,
                        pool_size: report.pool.as_ref().map(|p| p.entries.len()),
                        error: report.error.map(|e| format!("[{}] {}", e.stage, e.message)),
                    }
                }
            },
        };
        rows.push(row);
    }
    write_table(&out.join("tables").join(format!("sweep_{axis}.csv")), axis, &rows)?;
    Ok(rows)
}

pub fn point_dir(out: &Path, axis: Axis, value: f64) -> PathBuf {
    out.join(format!("sweep_{axis}")).join(value.to_string())
}

fn failed_row(value: f64, error: String) -> SweepRow {
    log::error!("sweep point {value}: {error}");
    SweepRow {
        value,
        status: status_name(RunStatus::Failed).into(),
        asr: None,
        acc: None,
        before_asr: None,
        before_acc: None,
        finetune_asr: None,
        finetune_acc: None,
        pool_size: None,
        error: Some(error),
    }
}

fn status_name(s: RunStatus) -> &'static str {
    match s {
        RunStatus::Complete => "complete",
        RunStatus::NoTriggerRecovered => "no_trigger_recovered",
        RunStatus::Failed => "failed",
    }
}

fn write_table(path: &Path, axis: Axis, rows: &[SweepRow]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let mut w = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    let axis_name = axis.to_string();
    w.write_record([
        axis_name.as_str(),
        "status",
        "asr",
        "acc",
        "before_asr",
        "before_acc",
        "finetune_asr",
        "finetune_acc",
        "pool_size",
        "error",
    ])?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in rows {
        w.write_record([
            r.value.to_string(),
            r.status.clone(),
            opt(r.asr),
            opt(r.acc),
            opt(r.before_asr),
            opt(r.before_acc),
            opt(r.finetune_asr),
            opt(r.finetune_acc),
            r.pool_size.map(|n| n.to_string()).unwrap_or_default(),
            r.error.clone().unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
