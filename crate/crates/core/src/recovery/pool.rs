use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::Candidate;
use crate::error::{invalid, Error, IoContext, Result};
use crate::numcore::{checkpoint, ParamVector, Scalar, Tensor};
use crate::pgm;

/// A validated recovered perturbation.
#[derive(Clone, Debug, PartialEq)]
pub struct PoolEntry {
    /// Presumed target label.
    pub label: usize,
    pub threshold: Scalar,
    /// Attack-success rate measured on the holdout.
    pub asr: Scalar,
    /// Additive perturbation shaped `(H, W, C)`, values in `[-1, 1]`.
    pub perturbation: Tensor,
}

/// Outcome of validating one candidate, accepted or not.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateRecord {
    pub label: usize,
    pub threshold: Scalar,
    pub asr: Scalar,
    pub accepted: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TriggerPool {
    tau: Scalar,
    entries: Vec<PoolEntry>,
    evaluated: Vec<CandidateRecord>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    tau: Scalar,
    entries: Vec<ManifestEntry>,
    #[serde(default)]
    evaluated: Vec<CandidateRecord>,
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    label: usize,
    threshold: Scalar,
    asr: Scalar,
    segment: String,
}

const WEIGHTS_FILE: &str = "pool.bers";
const MANIFEST_FILE: &str = "pool.toml";

impl TriggerPool {
    pub fn new(tau: Scalar) -> Self {
        Self {
            tau,
            entries: Vec::new(),
            evaluated: Vec::new(),
        }
    }

    /// Builds a pool from explicit entries; every entry must meet `tau`.
    pub fn from_entries(tau: Scalar, entries: Vec<PoolEntry>) -> Result<Self> {
        let mut pool = Self::new(tau);
        for e in entries {
            pool.push(e)?;
        }
        Ok(pool)
    }

    pub fn push(&mut self, entry: PoolEntry) -> Result<()> {
        if !(entry.asr >= self.tau) {
            return Err(invalid(format!(
                "pool entry ASR {} is below the acceptance threshold {}",
                entry.asr, self.tau
            )));
        }
        if entry.perturbation.rank() != 3 || entry.perturbation.max_abs() > 1.0 {
            return Err(invalid("pool perturbations must be (H, W, C) tensors bounded by 1"));
        }
        self.evaluated.push(CandidateRecord {
            label: entry.label,
            threshold: entry.threshold,
            asr: entry.asr,
            accepted: true,
        });
        self.entries.push(entry);
        Ok(())
    }

    /// Records a candidate and keeps it if `asr >= tau`. Returns whether it was accepted.
    pub fn consider(&mut self, label: usize, candidate: Candidate, asr: Scalar) -> bool {
        let accepted = asr >= self.tau;
        self.evaluated.push(CandidateRecord {
            label,
            threshold: candidate.threshold,
            asr,
            accepted,
        });
        if accepted {
            self.entries.push(PoolEntry {
                label,
                threshold: candidate.threshold,
                asr,
                perturbation: candidate.perturbation,
            });
        }
        accepted
    }

    pub fn tau(&self) -> Scalar {
        self.tau
    }

    pub fn entries(&self) -> &[PoolEntry] {
        &self.entries
    }

    /// Every candidate seen, in validation order.
    pub fn evaluated(&self) -> &[CandidateRecord] {
        &self.evaluated
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Most frequent presumed label among entries; ties go to the smaller label.
    pub fn modal_label(&self) -> Option<usize> {
        let max = self.entries.iter().map(|e| e.label).max()?;
        let mut counts = vec![0usize; max + 1];
        for e in &self.entries {
            counts[e.label] += 1;
        }
        let best = *counts.iter().max()?;
        counts.iter().position(|&c| c == best)
    }

    /// Writes `pool.bers` (perturbations) and `pool.toml` (manifest) into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).at(dir)?;
        let mut weights = ParamVector::new();
        let mut manifest = Manifest {
            tau: self.tau,
            entries: Vec::with_capacity(self.entries.len()),
            evaluated: self.evaluated.clone(),
        };
        for (i, e) in self.entries.iter().enumerate() {
            let segment = format!("entry{i}");
            weights.push(segment.clone(), e.perturbation.clone())?;
            manifest.entries.push(ManifestEntry {
                label: e.label,
                threshold: e.threshold,
                asr: e.asr,
                segment,
            });
        }
        checkpoint::save(&dir.join(WEIGHTS_FILE), &weights)?;
        let path = dir.join(MANIFEST_FILE);
        std::fs::write(&path, toml::to_string(&manifest)?).at(&path)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let manifest: Manifest = toml::from_str(&std::fs::read_to_string(&path).at(&path)?)?;
        let weights = checkpoint::load(&dir.join(WEIGHTS_FILE))?;
        let mut entries = Vec::with_capacity(manifest.entries.len());
        for m in manifest.entries {
            let perturbation = weights
                .get(&m.segment)
                .cloned()
                .ok_or_else(|| Error::Format(format!("pool checkpoint lacks segment {}", m.segment)))?;
            entries.push(PoolEntry {
                label: m.label,
                threshold: m.threshold,
                asr: m.asr,
                perturbation,
            });
        }
        let mut pool = Self::from_entries(manifest.tau, entries)?;
        if !manifest.evaluated.is_empty() {
            pool.evaluated = manifest.evaluated;
        }
        Ok(pool)
    }

    /// Writes one PGM per entry into `dir`, returning the file paths in entry order.
    pub fn write_pgms(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir).at(dir)?;
        self.entries
            .iter()
            .enumerate()
            .map(|(i, e)| {
                let path = dir.join(format!("trigger{i:02}_label{}_eps{:.3}.pgm", e.label, e.threshold));
                pgm::write(&path, &pgm::encode_signed(&e.perturbation)?)?;
                Ok(path)
            })
            .collect()
    }
}
