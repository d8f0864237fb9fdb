//! Backdoor erasure by unlearning recovered triggers.
//!
//! [`unlearn`] descends
//! `alpha * (CE(clean) - CE(backdoor)) + beta * sum_k w_k |theta_k - theta0_k|`,
//! which ascends the cross-entropy of triggered inputs on their presumed
//! target while an importance-weighted L1 anchor keeps parameters that matter
//! for clean data close to their starting point. The importance weights `w`
//! ([`penalty_weights`]) are mean absolute per-sample gradients of the clean
//! loss and are recomputed at every iteration.

use std::io::Write;
use std::path::Path;

use rand::seq::IndexedRandom;
use serde::{Deserialize, Serialize};

use crate::datapipe::LabeledDataset;
use crate::error::{invalid, Error, IoContext, Result};
use crate::netlab::{accuracy, train, Classifier, TrainConfig};
use crate::numcore::{rng, BoundParams, Direction, ParamVector, Scalar, Sgd, Tape, Tensor, Var};
use crate::poisoner::{triggered_predictions, Perturbation};
use crate::recovery::TriggerPool;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// Clean loss minus backdoor loss plus the weighted anchor.
    #[default]
    Weighted,
    /// Negated backdoor loss only.
    Naive,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UnlearnConfig {
    pub alpha: Scalar,
    pub beta: Scalar,
    pub max_iters: usize,
    pub lr: Scalar,
    pub momentum: Scalar,
    pub clean_batch: usize,
    pub backdoor_batch: usize,
    /// Stop once every pool entry's holdout ASR is at or below this value.
    pub early_stop_asr: Scalar,
    pub objective: Objective,
    pub seed: u64,
}

impl Default for UnlearnConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
            max_iters: 50,
            lr: 0.01,
            momentum: 0.9,
            clean_batch: 128,
            backdoor_batch: 128,
            early_stop_asr: 0.01,
            objective: Objective::Weighted,
            seed: 0,
        }
    }
}

impl UnlearnConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite() && self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(invalid(format!(
                "alpha and beta must be finite and non-negative (got {}, {})",
                self.alpha, self.beta
            )));
        }
        if self.max_iters == 0 {
            return Err(invalid("max_iters must be at least 1"));
        }
        if self.clean_batch == 0 || self.backdoor_batch == 0 {
            return Err(invalid("unlearning batch sizes must be positive"));
        }
        if !(0.0..=1.0).contains(&self.early_stop_asr) {
            return Err(invalid("early_stop_asr must lie in [0, 1]"));
        }
        Sgd::new(self.lr, self.momentum).map(|_| ())
    }
}

/// Per-parameter anchor weights, laid out like the model's parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct PenaltyWeights(ParamVector);

impl PenaltyWeights {
    pub fn new(weights: ParamVector) -> Result<Self> {
        let ok = weights
            .segments()
            .iter()
            .all(|(_, t)| t.data().iter().all(|&w| w >= 0.0 && w.is_finite()));
        if !ok {
            return Err(invalid("penalty weights must be finite and non-negative"));
        }
        Ok(Self(weights))
    }

    pub fn params(&self) -> &ParamVector {
        &self.0
    }

    pub fn flatten(&self) -> Vec<Scalar> {
        self.0.flatten()
    }
}

/// Neumaier-compensated running sum, so the result does not depend on summation order beyond ~1 ulp.
#[derive(Clone, Copy, Default)]
struct CompensatedSum {
    sum: Scalar,
    carry: Scalar,
}

impl CompensatedSum {
    fn add(&mut self, v: Scalar) {
        let t = self.sum + v;
        if self.sum.abs() >= v.abs() {
            self.carry += (self.sum - t) + v;
        } else {
            self.carry += (v - t) + self.sum;
        }
        self.sum = t;
    }

    fn value(self) -> Scalar {
        self.sum + self.carry
    }
}

/// `w_k = (1/N) * sum_i |d CE(x_i, y_i) / d theta_k|` over every sample of `clean`.
pub fn penalty_weights(model: &Classifier, clean: &LabeledDataset) -> Result<PenaltyWeights> {
    if clean.is_empty() {
        return Err(Error::Empty("penalty weights need at least one clean sample".into()));
    }
    let dims = model.params().total_dims();
    let mut acc = vec![CompensatedSum::default(); dims];
    for i in 0..clean.len() {
        let (x, y) = clean.batch(&[i]);
        let (_, grads) = model.loss_and_grad(&x, &y)?;
        for (a, g) in acc.iter_mut().zip(grads.flatten()) {
            a.add(g.abs());
        }
    }
    let n = clean.len() as Scalar;
    let flat: Vec<Scalar> = acc.into_iter().map(|a| a.value() / n).collect();
    PenaltyWeights::new(model.params().unflatten(&flat)?)
}

/// The unlearning objective and its parts, recorded on one tape.
#[derive(Clone, Copy, Debug)]
pub struct UnlearnTerms<'t> {
    pub total: Var<'t>,
    pub clean_ce: Var<'t>,
    pub backdoor_ce: Var<'t>,
    /// `sum_k w_k |theta_k - theta0_k|`, before scaling by beta.
    pub penalty: Var<'t>,
}

/// Labelled inputs `[N, H, W, C]`.
#[derive(Clone, Copy, Debug)]
pub struct Batch<'a> {
    pub images: &'a Tensor,
    pub labels: &'a [usize],
}

fn weighted_anchor<'t>(bound: &BoundParams<'t>, anchor: &ParamVector, weights: &PenaltyWeights) -> Result<Var<'t>> {
    let mut total: Option<Var<'t>> = None;
    for (name, var) in bound.iter() {
        let (Some(a), Some(w)) = (anchor.get(name), weights.params().get(name)) else {
            return Err(invalid(format!("unlearn penalty: no anchor or weight for segment {name}")));
        };
        let term = var.weighted_l1_distance(a, w)?;
        total = Some(match total {
            Some(t) => t.add(term)?,
            None => term,
        });
    }
    total.ok_or_else(|| Error::Empty("model has no parameters".into()))
}

/// Records `alpha * (CE(clean) - CE(backdoor)) + beta * penalty` with the model bound as `bound`.
#[allow(clippy::too_many_arguments)]
pub fn unlearn_loss<'t>(
    tape: &'t Tape,
    model: &Classifier,
    bound: &BoundParams<'t>,
    clean: Batch<'_>,
    backdoor: Batch<'_>,
    anchor: &ParamVector,
    weights: &PenaltyWeights,
    alpha: Scalar,
    beta: Scalar,
) -> Result<UnlearnTerms<'t>> {
    model.params().check_layout(anchor, "unlearn anchor")?;
    model.params().check_layout(weights.params(), "unlearn penalty weights")?;
    let clean_ce = model
        .forward(bound, tape.constant(clean.images.clone())?)?
        .softmax_cross_entropy(clean.labels)?;
    let backdoor_ce = model
        .forward(bound, tape.constant(backdoor.images.clone())?)?
        .softmax_cross_entropy(backdoor.labels)?;
    let penalty = weighted_anchor(bound, anchor, weights)?;
    let total = clean_ce.sub(backdoor_ce)?.scale(alpha).add(penalty.scale(beta))?;
    Ok(UnlearnTerms {
        total,
        clean_ce,
        backdoor_ce,
        penalty,
    })
}

/// Records `-CE(backdoor)`.
pub fn naive_unlearn_loss<'t>(
    tape: &'t Tape,
    model: &Classifier,
    bound: &BoundParams<'t>,
    backdoor: Batch<'_>,
) -> Result<Var<'t>> {
    Ok(model
        .forward(bound, tape.constant(backdoor.images.clone())?)?
        .softmax_cross_entropy(backdoor.labels)?
        .scale(-1.0))
}

/// Evaluation against a known trigger, used to chart the true effect of unlearning.
#[derive(Clone, Copy, Debug)]
pub struct Probe<'a> {
    pub data: &'a LabeledDataset,
    pub trigger: Perturbation<'a>,
    pub target: usize,
}

/// One row of an [`UnlearnTrace`], measured at the parameters of iteration `iteration`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub iteration: usize,
    /// Attack success rate (probe trigger on probe data if a probe is given, else the worst pool entry on the holdout).
    pub asr: Scalar,
    /// Clean accuracy (probe data if given, else the holdout).
    pub acc: Scalar,
    /// Objective value of the step taken from these parameters; absent for the final record.
    pub loss: Option<Scalar>,
    /// Prediction counts per class on the triggered inputs behind `asr`.
    pub histogram: Vec<usize>,
    /// Worst pool-entry ASR on the holdout; drives early stopping.
    pub holdout_asr: Scalar,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct UnlearnTrace {
    pub records: Vec<TraceRecord>,
    pub early_stopped: bool,
    /// The objective became non-finite; the last finite parameters were kept.
    pub diverged: bool,
}

impl UnlearnTrace {
    pub fn csv_header(classes: usize) -> String {
        let mut h = String::from("iteration,asr,acc,loss");
        for k in 0..classes {
            h.push_str(&format!(",h{k}"));
        }
        h
    }

    pub fn write_csv(&self, out: &mut impl Write, classes: usize) -> std::io::Result<()> {
        writeln!(out, "{}", Self::csv_header(classes))?;
        for r in &self.records {
            let loss = r.loss.map(|l| l.to_string()).unwrap_or_default();
            write!(out, "{},{},{},{}", r.iteration, r.asr, r.acc, loss)?;
            for k in 0..classes {
                write!(out, ",{}", r.histogram.get(k).copied().unwrap_or(0))?;
            }
            writeln!(out)?;
        }
        Ok(())
    }

    pub fn save_csv(&self, path: &Path, classes: usize) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path).at(path)?);
        self.write_csv(&mut f, classes).at(path)?;
        f.flush().at(path)
    }

    pub fn last(&self) -> Option<&TraceRecord> {
        self.records.last()
    }
}

fn histogram(preds: &[usize], classes: usize) -> Vec<usize> {
    let mut h = vec![0; classes];
    for &p in preds {
        h[p] += 1;
    }
    h
}

/// Holdout predictions on samples of other labels, perturbed by every pool entry.
fn worst_pool_asr(model: &Classifier, pool: &TriggerPool, holdout: &LabeledDataset) -> Result<(Scalar, Vec<usize>)> {
    let mut worst = 0.0;
    let mut hist = vec![0; model.classes()];
    for e in pool.entries() {
        let preds = triggered_predictions(model, holdout, Perturbation::Additive(&e.perturbation), e.label, 0)?;
        let asr = preds.iter().filter(|&&p| p == e.label).count() as Scalar / preds.len() as Scalar;
        if asr > worst {
            worst = asr;
        }
        for (h, c) in hist.iter_mut().zip(histogram(&preds, model.classes())) {
            *h += c;
        }
    }
    Ok((worst, hist))
}

fn measure(
    model: &Classifier,
    pool: &TriggerPool,
    holdout: &LabeledDataset,
    probe: Option<&Probe<'_>>,
    iteration: usize,
) -> Result<TraceRecord> {
    let (holdout_asr, holdout_hist) = worst_pool_asr(model, pool, holdout)?;
    let (asr, acc, hist) = match probe {
        Some(p) => {
            let preds = triggered_predictions(model, p.data, p.trigger, p.target, 0)?;
            let asr = preds.iter().filter(|&&y| y == p.target).count() as Scalar / preds.len() as Scalar;
            (asr, accuracy(model, p.data)?, histogram(&preds, model.classes()))
        }
        None => (holdout_asr, accuracy(model, holdout)?, holdout_hist),
    };
    Ok(TraceRecord {
        iteration,
        asr,
        acc,
        loss: None,
        histogram: hist,
        holdout_asr,
    })
}

/// Holdout images of other labels with a randomly chosen pool perturbation, labelled with that entry's target.
fn backdoor_batch(pool: &TriggerPool, holdout: &LabeledDataset, size: usize, rng: &mut rng::Rng) -> Result<(Tensor, Vec<usize>)> {
    let eligible: Vec<(usize, Vec<usize>)> = pool
        .entries()
        .iter()
        .enumerate()
        .map(|(k, e)| (k, holdout.indices_without_label(e.label)))
        .filter(|(_, idx)| !idx.is_empty())
        .collect();
    if eligible.is_empty() {
        return Err(Error::Empty("no holdout image can carry a pool perturbation".into()));
    }
    let shape = holdout.image_shape();
    let per = holdout.image_len();
    let mut pixels = Vec::with_capacity(size * per);
    let mut labels = Vec::with_capacity(size);
    for _ in 0..size {
        let (k, idx) = eligible.choose(rng).expect("nonempty");
        let entry = &pool.entries()[*k];
        let i = *idx.choose(rng).expect("nonempty");
        let mut img = holdout.image(i).to_vec();
        Perturbation::Additive(&entry.perturbation).apply(&mut img, shape, 0, i)?;
        pixels.extend(img);
        labels.push(entry.label);
    }
    let mut dims = vec![size];
    dims.extend_from_slice(&shape);
    Ok((Tensor::new(dims, pixels)?, labels))
}

fn sample_rows(n: usize, size: usize, rng: &mut rng::Rng) -> Vec<usize> {
    let all: Vec<usize> = (0..n).collect();
    (0..size).map(|_| *all.choose(rng).expect("nonempty")).collect()
}

/// Unlearns the pool's triggers from `model` using the defender's clean `holdout`.
pub fn unlearn(
    model: &Classifier,
    pool: &TriggerPool,
    holdout: &LabeledDataset,
    cfg: &UnlearnConfig,
) -> Result<(Classifier, UnlearnTrace)> {
    unlearn_with_probe(model, pool, holdout, cfg, None)
}

/// [`unlearn`], additionally charting ASR and accuracy on a probe with a known trigger.
pub fn unlearn_with_probe(
    model: &Classifier,
    pool: &TriggerPool,
    holdout: &LabeledDataset,
    cfg: &UnlearnConfig,
    probe: Option<&Probe<'_>>,
) -> Result<(Classifier, UnlearnTrace)> {
    cfg.validate()?;
    if pool.is_empty() {
        return Err(Error::EmptyPool);
    }
    if holdout.is_empty() {
        return Err(Error::Empty("unlearning needs a nonempty clean holdout".into()));
    }
    let anchor = model.params().clone();
    let mut current = model.clone();
    let mut opt = Sgd::new(cfg.lr, cfg.momentum)?;
    let mut rng = rng::seeded(cfg.seed);
    let mut trace = UnlearnTrace::default();
    for j in 0..cfg.max_iters {
        let mut record = measure(&current, pool, holdout, probe, j)?;
        if record.holdout_asr <= cfg.early_stop_asr {
            trace.records.push(record);
            trace.early_stopped = true;
            return Ok((current, trace));
        }
        let rows = sample_rows(holdout.len(), cfg.clean_batch, &mut rng);
        let (clean_x, clean_y) = holdout.batch(&rows);
        let (bd_x, bd_y) = backdoor_batch(pool, holdout, cfg.backdoor_batch, &mut rng)?;
        let tape = Tape::new();
        let bound = tape.bind(current.params(), true)?;
        let backdoor = Batch {
            images: &bd_x,
            labels: &bd_y,
        };
        let loss = match cfg.objective {
            Objective::Weighted => {
                let weights = match penalty_weights(&current, holdout) {
                    Ok(w) => w,
                    Err(Error::InvalidArgument(_)) => {
                        log::warn!("penalty weights became non-finite at iteration {j}; keeping the last finite parameters");
                        trace.records.push(record);
                        trace.diverged = true;
                        return Ok((current, trace));
                    }
                    Err(e) => return Err(e),
                };
                let clean = Batch {
                    images: &clean_x,
                    labels: &clean_y,
                };
                unlearn_loss(&tape, &current, &bound, clean, backdoor, &anchor, &weights, cfg.alpha, cfg.beta)?.total
            }
            Objective::Naive => naive_unlearn_loss(&tape, &current, &bound, backdoor)?,
        };
        let value = loss.item()?;
        let grads = if value.is_finite() {
            Some(tape.backward(loss)?.for_params(&bound))
        } else {
            None
        };
        let Some(grads) = grads.filter(ParamVector::is_finite) else {
            log::warn!("unlearning objective became non-finite at iteration {j}; keeping the last finite parameters");
            trace.records.push(record);
            trace.diverged = true;
            return Ok((current, trace));
        };
        record.loss = Some(value);
        trace.records.push(record);
        let before = current.params().clone();
        opt.step(current.params_mut(), &grads, Direction::Descend)?;
        if !current.params().is_finite() {
            current.set_params(before)?;
            trace.diverged = true;
            return Ok((current, trace));
        }
    }
    let mut last = measure(&current, pool, holdout, probe, cfg.max_iters)?;
    last.loss = None;
    trace.early_stopped = last.holdout_asr <= cfg.early_stop_asr;
    trace.records.push(last);
    Ok((current, trace))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub lr: Scalar,
    pub momentum: Scalar,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            lr: 0.01,
            momentum: 0.9,
            batch_size: 128,
            seed: 0,
        }
    }
}

/// Continued clean-data training, the comparison defense. `epochs == 0` or `lr == 0` returns the model unchanged.
pub fn finetune_baseline(model: &Classifier, clean: &LabeledDataset, cfg: &FinetuneConfig) -> Result<Classifier> {
    if clean.is_empty() {
        return Err(Error::Empty("fine-tuning needs a nonempty clean set".into()));
    }
    if cfg.epochs == 0 || cfg.lr == 0.0 {
        return Ok(model.clone());
    }
    let train_cfg = TrainConfig {
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        lr: cfg.lr,
        momentum: cfg.momentum,
        seed: cfg.seed,
    };
    Ok(train(model, clean, &train_cfg)?.0)
}

#[cfg(test)]
mod tests;
