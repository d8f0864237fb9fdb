//! Experiment configuration: one TOML document with a default for every knob.
//!
//! Every section maps onto a config type of `purify-core`. The top-level `seed`
//! drives every stage; `seed` keys inside sections are overwritten with it when
//! the pipeline runs, so a single number pins the whole experiment.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use purify_core::eraser::FinetuneConfig;
use purify_core::netlab::Arch;
use purify_core::poisoner::Placement;
use purify_core::{ArchKind, RecoveryConfig, TrainConfig, TriggerSpec, UnlearnConfig};
use serde::{Deserialize, Serialize};

pub const MNIST_DIR_ENV: &str = "MNIST_DIR";
pub const DEFAULT_MNIST_DIR: &str = "/root/data/mnist";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub data: DataConfig,
    pub victim: VictimConfig,
    pub attack: AttackConfig,
    pub split: SplitConfig,
    pub recovery: RecoveryConfig,
    pub unlearn: UnlearnConfig,
    pub finetune: FinetuneConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            data: DataConfig::default(),
            victim: VictimConfig::default(),
            attack: AttackConfig::default(),
            split: SplitConfig::default(),
            recovery: RecoveryConfig::default(),
            unlearn: UnlearnConfig::default(),
            finetune: FinetuneConfig::default(),
        }
    }
}

/// Where the IDX files live and how much of the training split is used.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Directory holding `train-images-idx3-ubyte` and friends. Unset means `$MNIST_DIR`, then `/root/data/mnist`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
    pub train_subset: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            dir: None,
            train_subset: 10_000,
        }
    }
}

impl DataConfig {
    pub fn resolved_dir(&self) -> PathBuf {
        self.dir
            .clone()
            .or_else(|| std::env::var_os(MNIST_DIR_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from(DEFAULT_MNIST_DIR))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VictimConfig {
    pub arch: ArchKind,
    pub conv_filters: [usize; 2],
    pub hidden: usize,
    pub train: TrainConfig,
}

impl Default for VictimConfig {
    fn default() -> Self {
        Self {
            arch: ArchKind::SmallCnn,
            conv_filters: [8, 16],
            hidden: 64,
            train: TrainConfig {
                epochs: 5,
                batch_size: 64,
                lr: 0.02,
                momentum: 0.9,
                seed: 0,
            },
        }
    }
}

impl VictimConfig {
    pub fn arch(&self, input_shape: [usize; 3], classes: usize) -> Arch {
        Arch::new(self.arch, input_shape, classes).with_widths(self.conv_filters, self.hidden)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TriggerKind {
    /// Solid white square patch.
    Badnet,
    /// Dense pseudo-random square blended in at `kappa`.
    Blended,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackConfig {
    pub kind: TriggerKind,
    pub size: usize,
    pub target: usize,
    pub kappa: f64,
    /// Re-draw the trigger position for every image instead of the fixed bottom-right slot.
    pub random_placement: bool,
    pub poison_rate: f64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            kind: TriggerKind::Badnet,
            size: 3,
            target: 7,
            kappa: 0.2,
            random_placement: false,
            poison_rate: 0.1,
        }
    }
}

impl AttackConfig {
    pub fn trigger(&self, image_shape: [usize; 3], seed: u64) -> purify_core::Result<TriggerSpec> {
        let mut spec = match self.kind {
            TriggerKind::Badnet => TriggerSpec::badnet(self.size, image_shape, self.target)?,
            TriggerKind::Blended => TriggerSpec::blended_noise(self.size, image_shape, self.kappa, self.target, seed)?,
        };
        if self.random_placement {
            spec.placement = Placement::RandomPerImage;
        }
        Ok(spec)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    /// Defender's clean data as a fraction of the training-set size, drawn from the test split.
    pub holding_ratio: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self { holding_ratio: 0.05 }
    }
}

impl ExperimentConfig {
    /// Defaults, then `path` (if any), then each `key=value` override in order.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                text.parse::<toml::Table>()
                    .with_context(|| format!("parsing {}", p.display()))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: Self = toml::Value::Table(table)
            .try_into()
            .context("configuration does not match the schema")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.train_subset == 0 {
            bail!("data.train_subset must be at least 1");
        }
        self.victim.train.validate().context("victim.train")?;
        if self.victim.conv_filters.contains(&0) || self.victim.hidden == 0 {
            bail!("victim widths must be positive");
        }
        if self.attack.size == 0 {
            bail!("attack.size must be at least 1");
        }
        if !(self.attack.poison_rate > 0.0 && self.attack.poison_rate < 1.0) {
            bail!("attack.poison_rate must lie in (0, 1), got {}", self.attack.poison_rate);
        }
        if self.attack.kind == TriggerKind::Blended && !(self.attack.kappa > 0.0 && self.attack.kappa <= 1.0) {
            bail!("attack.kappa must lie in (0, 1], got {}", self.attack.kappa);
        }
        if !(self.split.holding_ratio > 0.0 && self.split.holding_ratio <= 1.0) {
            bail!("split.holding_ratio must lie in (0, 1], got {}", self.split.holding_ratio);
        }
        self.recovery.validate().context("recovery")?;
        self.unlearn.validate().context("unlearn")?;
        let ft = &self.finetune;
        if ft.batch_size == 0 || !(ft.lr >= 0.0 && ft.lr.is_finite()) {
            bail!("finetune needs a positive batch size and a finite non-negative lr");
        }
        Ok(())
    }
}

/// Sets `a.b.c = value` in `table`; `value` is read as a TOML literal, falling back to a bare string.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .with_context(|| format!("override `{assignment}` is not of the form key=value"))?;
    let key = key.trim();
    let value = parse_value(raw.trim());
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        bail!("override key `{key}` has an empty component");
    }
    let (last, parents) = parts.split_last().expect("split yields at least one part");
    let mut node = table;
    for p in parents {
        let entry = node
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = match entry {
            toml::Value::Table(t) => t,
            _ => bail!("override `{key}`: `{p}` is not a table"),
        };
    }
    node.insert(last.to_string(), value);
    Ok(())
}

fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}
