//! The staged experiment: clean twin, poisoned victim, recovery, unlearning and
//! the fine-tuning baseline, then evaluation on the held-back test remainder.
//!
//! Each stage writes its artefacts to `<cache>/<stage>-<hash>/`, where the hash
//! covers the stage's own settings and the hashes of the stages it consumes.
//! A directory counts as valid once its `COMPLETE` marker exists and its stored
//! fingerprint matches, so deleting any stage directory re-runs that stage and
//! nothing upstream of it.

use std::cell::{OnceCell, RefCell};
use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use purify_core::datapipe::{load_idx, random_subset, take_clean_holdout};
use purify_core::eraser::{finetune_baseline, unlearn_with_probe, FinetuneConfig, Probe, UnlearnTrace};
use purify_core::netlab::{accuracy, train, EpochStats};
use purify_core::numcore::rng;
use purify_core::poisoner::{attack_success_rate, poison_dataset};
use purify_core::{
    pgm, Classifier, LabeledDataset, Perturbation, RecoveryConfig, SplitSpec, Tensor, TrainConfig, TriggerPool, TriggerSpec,
};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{AttackConfig, ExperimentConfig, VictimConfig};
use crate::report::{
    emit_report, Defense, DefenseRow, Metrics, PoolEntryReport, PoolReport, Report, RunStatus, StageFailure, UnlearnReport,
};

const FINGERPRINT_FILE: &str = "fingerprint.toml";
const COMPLETE_FILE: &str = "COMPLETE";
const MODEL_FILE: &str = "model.bers";
const SECONDS_FILE: &str = "seconds";
/// Bumped when a stage's on-disk artefacts change shape, invalidating old caches.
const CACHE_FORMAT: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Config,
    Data,
    TrainVictim,
    Poison,
    Recover,
    Unlearn,
    Finetune,
    Eval,
    Emit,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Config => "config",
            Stage::Data => "data",
            Stage::TrainVictim => "train-victim",
            Stage::Poison => "poison",
            Stage::Recover => "recover",
            Stage::Unlearn => "unlearn",
            Stage::Finetune => "finetune",
            Stage::Eval => "eval",
            Stage::Emit => "emit",
        })
    }
}

/// A failure attributed to the stage that raised it.
#[derive(Debug)]
pub struct StageError {
    pub stage: Stage,
    pub error: anyhow::Error,
}

impl fmt::Display for StageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}] {:#}", self.stage, self.error)
    }
}

impl std::error::Error for StageError {}

pub type StageResult<T> = std::result::Result<T, StageError>;

pub trait Tag<T> {
    fn stage(self, stage: Stage) -> StageResult<T>;
}

impl<T, E: Into<anyhow::Error>> Tag<T> for std::result::Result<T, E> {
    fn stage(self, stage: Stage) -> StageResult<T> {
        self.map_err(|e| {
            let error = e.into();
            match error.downcast::<StageError>() {
                Ok(inner) => inner,
                Err(error) => StageError { stage, error },
            }
        })
    }
}

/// The datasets and trigger every stage works from.
#[derive(Debug)]
pub struct Data {
    /// Training subset the victims see.
    pub train: LabeledDataset,
    /// Defender's clean sample, drawn from the test split.
    pub holdout: LabeledDataset,
    /// Test split minus the holdout; all reported metrics come from here.
    pub eval: LabeledDataset,
    pub classes: usize,
    pub trigger: TriggerSpec,
}

/// A model together with the checkpoint it was loaded from or saved to.
#[derive(Clone, Debug)]
pub struct Checkpointed {
    pub model: Classifier,
    pub path: PathBuf,
}

#[derive(Clone, Debug)]
pub struct Unlearned {
    pub purified: Checkpointed,
    pub trace: UnlearnTrace,
}

struct Fingerprint {
    text: String,
    hash: String,
}

#[derive(Serialize)]
struct Key<'a, T: Serialize> {
    stage: String,
    format: u32,
    upstream: &'a str,
    inputs: T,
}

fn fingerprint<T: Serialize>(stage: Stage, upstream: &str, inputs: T) -> Result<Fingerprint> {
    let text = toml::to_string(&Key {
        stage: stage.to_string(),
        format: CACHE_FORMAT,
        upstream,
        inputs,
    })?;
    let digest = Sha256::digest(text.as_bytes());
    let hash = digest[..8].iter().map(|b| format!("{b:02x}")).collect();
    Ok(Fingerprint { text, hash })
}

#[derive(Serialize)]
struct DataKey {
    dir: String,
    train_subset: usize,
    seed: u64,
}

pub struct Pipeline {
    cfg: ExperimentConfig,
    out: PathBuf,
    cache: PathBuf,
    data: OnceCell<Data>,
    timings: RefCell<BTreeMap<String, f64>>,
}

impl Pipeline {
    /// Writes into `cfg.out_dir`, caching stages under `cfg.out_dir/cache`.
    pub fn new(cfg: ExperimentConfig) -> Self {
        let out = cfg.out_dir.clone();
        Self {
            cache: out.join("cache"),
            out,
            cfg,
            data: OnceCell::new(),
            timings: RefCell::new(BTreeMap::new()),
        }
    }

    /// Shares a stage cache between runs, e.g. the points of a sweep.
    pub fn with_cache_dir(mut self, cache: PathBuf) -> Self {
        self.cache = cache;
        self
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    pub fn out_dir(&self) -> &Path {
        &self.out
    }

    pub fn cache_dir(&self) -> &Path {
        &self.cache
    }

    pub fn timings(&self) -> BTreeMap<String, f64> {
        self.timings.borrow().clone()
    }

    fn seed(&self) -> u64 {
        self.cfg.seed
    }

    fn record_time(&self, stage: Stage, start: Instant) {
        *self.timings.borrow_mut().entry(stage.to_string()).or_default() += start.elapsed().as_secs_f64();
    }

    pub fn data(&self) -> StageResult<&Data> {
        if let Some(d) = self.data.get() {
            return Ok(d);
        }
        let start = Instant::now();
        let d = self.load_data().stage(Stage::Data)?;
        self.record_time(Stage::Data, start);
        Ok(self.data.get_or_init(|| d))
    }

    fn load_data(&self) -> Result<Data> {
        let dir = self.cfg.data.resolved_dir();
        let load = |images: &str, labels: &str| {
            load_idx(&dir.join(images), &dir.join(labels)).with_context(|| format!("loading IDX files from {}", dir.display()))
        };
        let full = load("train-images-idx3-ubyte", "train-labels-idx1-ubyte")?;
        let test = load("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")?;
        let n = self.cfg.data.train_subset;
        let train = match n.cmp(&full.len()) {
            std::cmp::Ordering::Greater => bail!("train_subset {n} exceeds the {} available samples", full.len()),
            std::cmp::Ordering::Equal => full,
            std::cmp::Ordering::Less => random_subset(&full, n, self.seed())?,
        };
        let split = take_clean_holdout(
            &test,
            train.len(),
            &SplitSpec {
                holding_ratio: self.cfg.split.holding_ratio,
                seed: self.seed(),
            },
        )?;
        let classes = train.max_label().max(test.max_label()).map_or(0, |m| m + 1).max(2);
        let trigger = self.cfg.attack.trigger(train.image_shape(), self.seed())?;
        if trigger.target >= classes {
            bail!("attack target {} is outside the {classes} labels", trigger.target);
        }
        Ok(Data {
            train,
            holdout: split.holdout,
            eval: split.remainder,
            classes,
            trigger,
        })
    }

    fn data_key(&self) -> DataKey {
        DataKey {
            dir: self.cfg.data.resolved_dir().display().to_string(),
            train_subset: self.cfg.data.train_subset,
            seed: self.seed(),
        }
    }

    fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed(),
            ..self.cfg.victim.train.clone()
        }
    }

    /// Returns the cached value for `fp` or runs `compute` in a fresh stage directory.
    fn cached<T>(
        &self,
        stage: Stage,
        fp: &Fingerprint,
        load: impl Fn(&Path) -> Result<T>,
        compute: impl FnOnce(&Path) -> Result<T>,
    ) -> StageResult<T> {
        let dir = self.cache.join(format!("{stage}-{}", fp.hash));
        let run = || -> Result<T> {
            let stored = fs::read_to_string(dir.join(FINGERPRINT_FILE)).ok();
            if dir.join(COMPLETE_FILE).exists() && stored.as_deref() == Some(fp.text.as_str()) {
                match load(&dir) {
                    Ok(v) => {
                        log::info!("{stage}: reusing {}", dir.display());
                        return Ok(v);
                    }
                    Err(e) => log::warn!("{stage}: cached artefacts in {} unreadable ({e:#}); recomputing", dir.display()),
                }
            }
            if dir.exists() {
                fs::remove_dir_all(&dir).with_context(|| format!("clearing {}", dir.display()))?;
            }
            fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
            fs::write(dir.join(FINGERPRINT_FILE), &fp.text)?;
            let before = self.stage_time(stage);
            let v = compute(&dir)?;
            fs::write(dir.join(SECONDS_FILE), (self.stage_time(stage) - before).to_string())?;
            fs::write(dir.join(COMPLETE_FILE), b"")?;
            Ok(v)
        };
        run().stage(stage)
    }

    fn stage_time(&self, stage: Stage) -> f64 {
        self.timings.borrow().get(&stage.to_string()).copied().unwrap_or(0.0)
    }

    /// Seconds the cached artefact of `stage` took to compute, whether in this run or an earlier one.
    pub fn recorded_seconds(&self, stage: Stage) -> Option<f64> {
        let fp = match stage {
            Stage::TrainVictim => self.clean_twin_fp(),
            Stage::Poison => self.victim_fp(),
            Stage::Recover => self.pool_fp(),
            Stage::Unlearn => self.unlearn_fp(),
            Stage::Finetune => self.finetune_fp(),
            _ => return None,
        }
        .ok()?;
        let dir = self.cache.join(format!("{stage}-{}", fp.hash));
        fs::read_to_string(dir.join(SECONDS_FILE)).ok()?.trim().parse().ok()
    }

    fn clean_twin_fp(&self) -> Result<Fingerprint> {
        #[derive(Serialize)]
        struct Inputs<'a> {
            data: DataKey,
            victim: &'a VictimConfig,
        }
        fingerprint(
            Stage::TrainVictim,
            "",
            Inputs {
                data: self.data_key(),
                victim: &self.cfg.victim,
            },
        )
    }

    fn victim_fp(&self) -> Result<Fingerprint> {
        #[derive(Serialize)]
        struct Inputs<'a> {
            data: DataKey,
            victim: &'a VictimConfig,
            attack: &'a AttackConfig,
        }
        fingerprint(
            Stage::Poison,
            "",
            Inputs {
                data: self.data_key(),
                victim: &self.cfg.victim,
                attack: &self.cfg.attack,
            },
        )
    }

    fn pool_fp(&self) -> Result<Fingerprint> {
        #[derive(Serialize)]
        struct Inputs {
            holding_ratio: f64,
            recovery: RecoveryConfig,
        }
        let mut recovery = self.cfg.recovery.clone();
        recovery.seed = self.seed();
        let inputs = Inputs {
            holding_ratio: self.cfg.split.holding_ratio,
            recovery,
        };
        fingerprint(Stage::Recover, &self.victim_fp()?.hash, inputs)
    }

    fn unlearn_fp(&self) -> Result<Fingerprint> {
        let mut unlearn = self.cfg.unlearn.clone();
        unlearn.seed = self.seed();
        fingerprint(Stage::Unlearn, &self.pool_fp()?.hash, unlearn)
    }

    fn finetune_fp(&self) -> Result<Fingerprint> {
        #[derive(Serialize)]
        struct Inputs {
            holding_ratio: f64,
            finetune: FinetuneConfig,
        }
        let inputs = Inputs {
            holding_ratio: self.cfg.split.holding_ratio,
            finetune: self.finetune_config(),
        };
        fingerprint(Stage::Finetune, &self.victim_fp()?.hash, inputs)
    }

    fn finetune_config(&self) -> FinetuneConfig {
        FinetuneConfig {
            seed: self.seed(),
            ..self.cfg.finetune.clone()
        }
    }

    fn train_victim(&self, stage: Stage, dir: &Path, data: &LabeledDataset) -> Result<Checkpointed> {
        let d = self.data()?;
        let start = Instant::now();
        let arch = self.cfg.victim.arch(d.train.image_shape(), d.classes);
        let init = Classifier::from_arch(arch, self.seed())?;
        let (model, history) = train(&init, data, &self.train_config())?;
        let path = dir.join(MODEL_FILE);
        model.save(&path)?;
        write_json(&dir.join("history.json"), &history)?;
        self.record_time(stage, start);
        Ok(Checkpointed { model, path })
    }

    /// The never-poisoned twin trained on the same subset with the same seed.
    pub fn clean_twin(&self) -> StageResult<Checkpointed> {
        let fp = self.clean_twin_fp().stage(Stage::TrainVictim)?;
        self.cached(Stage::TrainVictim, &fp, load_checkpoint, |dir| {
            let d = self.data()?;
            self.train_victim(Stage::TrainVictim, dir, &d.train)
        })
    }

    /// The backdoored victim: poison the training subset, then train from the same initialisation as the twin.
    pub fn victim(&self) -> StageResult<Checkpointed> {
        let fp = self.victim_fp().stage(Stage::Poison)?;
        self.cached(Stage::Poison, &fp, load_checkpoint, |dir| {
            let d = self.data()?;
            let poisoned = poison_dataset(&d.train, &d.trigger, self.cfg.attack.poison_rate, self.seed())?;
            log::info!("poisoned {} of {} training samples", poisoned.poisoned_indices.len(), d.train.len());
            d.trigger.save(&dir.join("trigger.bers"))?;
            self.train_victim(Stage::Poison, dir, &poisoned.data)
        })
    }

    pub fn pool(&self) -> StageResult<TriggerPool> {
        let fp = self.pool_fp().stage(Stage::Recover)?;
        self.cached(
            Stage::Recover,
            &fp,
            |dir| Ok(TriggerPool::load(&dir.join("pool"))?),
            |dir| {
                let victim = self.victim()?;
                let d = self.data()?;
                let start = Instant::now();
                let mut rc = self.cfg.recovery.clone();
                rc.seed = self.seed();
                let pool = purify_core::recovery::recover_all(&victim.model, &d.holdout, &rc)?;
                pool.save(&dir.join("pool"))?;
                self.record_time(Stage::Recover, start);
                Ok(pool)
            },
        )
    }

    /// `None` when recovery found no trigger.
    pub fn unlearned(&self) -> StageResult<Option<Unlearned>> {
        if self.pool()?.is_empty() {
            return Ok(None);
        }
        let fp = self.unlearn_fp().stage(Stage::Unlearn)?;
        self.cached(
            Stage::Unlearn,
            &fp,
            |dir| {
                let purified = load_checkpoint(dir)?;
                let text = fs::read_to_string(dir.join("trace.json"))?;
                Ok(Some(Unlearned {
                    purified,
                    trace: serde_json::from_str(&text)?,
                }))
            },
            |dir| {
                let victim = self.victim()?;
                let pool = self.pool()?;
                let d = self.data()?;
                let start = Instant::now();
                let mut uc = self.cfg.unlearn.clone();
                uc.seed = self.seed();
                let probe = Probe {
                    data: &d.eval,
                    trigger: Perturbation::Trigger(&d.trigger),
                    target: d.trigger.target,
                };
                let (model, trace) = unlearn_with_probe(&victim.model, &pool, &d.holdout, &uc, Some(&probe))?;
                let path = dir.join(MODEL_FILE);
                model.save(&path)?;
                write_json(&dir.join("trace.json"), &trace)?;
                self.record_time(Stage::Unlearn, start);
                Ok(Some(Unlearned {
                    purified: Checkpointed { model, path },
                    trace,
                }))
            },
        )
    }

    pub fn finetuned(&self) -> StageResult<Checkpointed> {
        let fp = self.finetune_fp().stage(Stage::Finetune)?;
        self.cached(Stage::Finetune, &fp, load_checkpoint, |dir| {
            let victim = self.victim()?;
            let d = self.data()?;
            let start = Instant::now();
            let model = finetune_baseline(&victim.model, &d.holdout, &self.finetune_config())?;
            let path = dir.join(MODEL_FILE);
            model.save(&path)?;
            self.record_time(Stage::Finetune, start);
            Ok(Checkpointed { model, path })
        })
    }

    /// True-trigger ASR and clean accuracy on the evaluation split.
    pub fn evaluate(&self, model: &Classifier) -> StageResult<Metrics> {
        let d = self.data()?;
        let start = Instant::now();
        let m = (|| -> Result<Metrics> {
            Ok(Metrics {
                asr: attack_success_rate(model, &d.eval, Perturbation::Trigger(&d.trigger), d.trigger.target, self.seed())?,
                acc: accuracy(model, &d.eval)?,
            })
        })()
        .stage(Stage::Eval)?;
        self.record_time(Stage::Eval, start);
        Ok(m)
    }

    fn display_path(&self, p: &Path) -> String {
        p.strip_prefix(&self.out).unwrap_or(p).display().to_string()
    }

    /// Runs every stage and writes `report.json`, tables, traces and trigger images under the output directory.
    ///
    /// A failing stage does not abort: the partial report records the stage and message and is still emitted.
    /// Only a failure to write the report itself is returned as an error.
    pub fn run(&self) -> StageResult<Report> {
        let mut report = Report::new(self.cfg.clone());
        if let Err(e) = self.run_into(&mut report) {
            log::error!("{e}");
            report.status = RunStatus::Failed;
            report.error = Some(StageFailure {
                stage: e.stage,
                message: format!("{:#}", e.error),
            });
        }
        report.timings = self.timings();
        emit_report(&report, &self.out).stage(Stage::Emit)?;
        Ok(report)
    }

    fn run_into(&self, report: &mut Report) -> StageResult<()> {
        let d = self.data()?;
        report.true_trigger_pgm = Some(self.write_true_trigger(d).stage(Stage::Emit)?);

        let twin = self.clean_twin()?;
        report.clean_twin = Some(self.evaluate(&twin.model)?);

        let victim = self.victim()?;
        let before = self.evaluate(&victim.model)?;
        report.rows.push(self.row(Defense::None, before, &victim.path));

        let pool = self.pool()?;
        report.pool = Some(self.write_pool(&pool).stage(Stage::Emit)?);

        let ft = self.finetuned()?;
        let m = self.evaluate(&ft.model)?;
        report.rows.push(self.row(Defense::FineTune, m, &ft.path));

        match self.unlearned()? {
            None => {
                log::warn!("recovery found no trigger; unlearning skipped");
                report.status = RunStatus::NoTriggerRecovered;
            }
            Some(u) => {
                let m = self.evaluate(&u.purified.model)?;
                report.rows.push(self.row(Defense::Unlearn, m, &u.purified.path));
                let traces = self.out.join("traces");
                fs::create_dir_all(&traces).stage(Stage::Emit)?;
                let path = traces.join(format!("unlearn_seed{}.csv", self.seed()));
                u.trace.save_csv(&path, d.classes).stage(Stage::Emit)?;
                report.unlearn = Some(UnlearnReport {
                    iterations: u.trace.records.iter().filter(|r| r.loss.is_some()).count(),
                    early_stopped: u.trace.early_stopped,
                    diverged: u.trace.diverged,
                    trace: self.display_path(&path),
                });
            }
        }
        Ok(())
    }

    fn row(&self, defense: Defense, m: Metrics, model: &Path) -> DefenseRow {
        DefenseRow {
            defense,
            asr: m.asr,
            acc: m.acc,
            model: self.display_path(model),
        }
    }

    fn write_true_trigger(&self, d: &Data) -> Result<String> {
        let dir = self.out.join("triggers");
        fs::create_dir_all(&dir)?;
        let shape = d.train.image_shape();
        let mut canvas = Tensor::zeros(&shape);
        d.trigger.stamp(canvas.data_mut(), shape, &mut rng::seeded(self.seed()))?;
        let path = dir.join("true_trigger.pgm");
        pgm::write(&path, &pgm::encode_unit(&canvas)?)?;
        Ok(self.display_path(&path))
    }

    /// Replaces `triggers/recovered/` with one PGM per pool entry.
    fn write_pool(&self, pool: &TriggerPool) -> Result<PoolReport> {
        let dir = self.out.join("triggers").join("recovered");
        if dir.exists() {
            fs::remove_dir_all(&dir)?;
        }
        let paths = pool.write_pgms(&dir)?;
        Ok(PoolReport {
            tau: pool.tau(),
            modal_label: pool.modal_label(),
            entries: pool
                .entries()
                .iter()
                .zip(&paths)
                .map(|(e, p)| PoolEntryReport {
                    label: e.label,
                    threshold: e.threshold,
                    asr: e.asr,
                    pgm: self.display_path(p),
                })
                .collect(),
            candidates: pool.evaluated().to_vec(),
        })
    }
}

fn load_checkpoint(dir: &Path) -> Result<Checkpointed> {
    let path = dir.join(MODEL_FILE);
    Ok(Checkpointed {
        model: Classifier::load(&path)?,
        path,
    })
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

/// Training history of a cached victim, if the stage directory holds one.
pub fn read_history(checkpoint: &Path) -> Result<Vec<EpochStats>> {
    let path = checkpoint.with_file_name("history.json");
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    Ok(serde_json::from_str(&text)?)
}
