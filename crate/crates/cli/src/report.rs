//! The structured run report and its on-disk layout.
//!
//! `report.json` is the full record; `tables/comparison.csv` repeats the
//! defense rows for plotting. Paths inside the report are relative to the
//! output directory.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use purify_core::recovery::CandidateRecord;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::pipeline::Stage;

/// Bumped whenever a field changes meaning or disappears.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Defense {
    /// The backdoored victim as trained.
    None,
    FineTune,
    Unlearn,
}

impl Defense {
    pub fn name(self) -> &'static str {
        match self {
            Defense::None => "none",
            Defense::FineTune => "fine_tune",
            Defense::Unlearn => "unlearn",
        }
    }
}

/// Attack success rate of the true trigger and clean accuracy, both on the evaluation split.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub asr: f64,
    pub acc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DefenseRow {
    pub defense: Defense,
    pub asr: f64,
    pub acc: f64,
    /// Checkpoint the row was measured on.
    pub model: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoolEntryReport {
    pub label: usize,
    pub threshold: f64,
    pub asr: f64,
    pub pgm: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoolReport {
    pub tau: f64,
    pub modal_label: Option<usize>,
    pub entries: Vec<PoolEntryReport>,
    /// Every validated candidate, accepted or not.
    pub candidates: Vec<CandidateRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnlearnReport {
    /// Optimisation steps taken.
    pub iterations: usize,
    pub early_stopped: bool,
    pub diverged: bool,
    pub trace: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Complete,
    /// Recovery found nothing; unlearning was skipped.
    NoTriggerRecovered,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageFailure {
    pub stage: Stage,
    pub message: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema_version: u32,
    pub seed: u64,
    pub config: ExperimentConfig,
    pub status: RunStatus,
    pub error: Option<StageFailure>,
    /// Clean and triggered metrics of the never-poisoned twin.
    pub clean_twin: Option<Metrics>,
    pub rows: Vec<DefenseRow>,
    pub true_trigger_pgm: Option<String>,
    pub pool: Option<PoolReport>,
    pub unlearn: Option<UnlearnReport>,
    /// Wall-clock seconds per stage; excluded from reproducibility comparisons.
    pub timings: BTreeMap<String, f64>,
}

impl Report {
    pub fn new(config: ExperimentConfig) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            seed: config.seed,
            config,
            status: RunStatus::Complete,
            error: None,
            clean_twin: None,
            rows: Vec::new(),
            true_trigger_pgm: None,
            pool: None,
            unlearn: None,
            timings: BTreeMap::new(),
        }
    }

    pub fn row(&self, defense: Defense) -> Option<&DefenseRow> {
        self.rows.iter().find(|r| r.defense == defense)
    }

    /// The report with timings cleared: the part that must reproduce bit for bit.
    pub fn without_timings(&self) -> Self {
        Self {
            timings: BTreeMap::new(),
            ..self.clone()
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_json(&text).with_context(|| format!("parsing {}", path.display()))
    }
}

/// Writes `report.json` and `tables/comparison.csv` under `dir`.
pub fn emit_report(report: &Report, dir: &Path) -> Result<()> {
    let tables = dir.join("tables");
    fs::create_dir_all(&tables).with_context(|| format!("creating {}", tables.display()))?;
    let path = dir.join("report.json");
    fs::write(&path, report.to_json()?).with_context(|| format!("writing {}", path.display()))?;

    let path = tables.join("comparison.csv");
    let mut w = csv::Writer::from_path(&path).with_context(|| format!("writing {}", path.display()))?;
    w.write_record(["defense", "asr", "acc"])?;
    for r in &report.rows {
        w.write_record([r.defense.name().to_string(), r.asr.to_string(), r.acc.to_string()])?;
    }
    w.flush()?;
    Ok(())
}
