//! Trigger recovery against a frozen classifier.
//!
//! For every candidate label and every confidence threshold a fresh
//! [`Generator`] learns a perturbation distribution that pushes clean images to
//! the label, while an [`MiEstimator`] rewards output diversity. Mean
//! generator outputs that reach the attack-success threshold form the
//! [`TriggerPool`].

mod nets;
mod pool;

pub use nets::{fit_mine, gaussian_noise, Generator, MiEstimator, MineFitConfig};
pub use pool::{CandidateRecord, PoolEntry, TriggerPool};

use crate::datapipe::LabeledDataset;
use crate::error::{invalid, Error, Result};
use crate::netlab::Classifier;
use crate::numcore::{rng, BoundParams, Direction, Scalar, Sgd, Tape, Tensor, Var};
use crate::poisoner::{attack_success_rate, Perturbation};
use rand::seq::IndexedRandom;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RecoveryConfig {
    /// Number of confidence thresholds (generators per label).
    pub thresholds: usize,
    /// Weight of the mutual-information bonus.
    pub eta: Scalar,
    /// Attack-success rate a candidate needs to enter the pool.
    pub tau: Scalar,
    pub batch_size: usize,
    pub steps: usize,
    pub noise_dim: usize,
    pub lr: Scalar,
    pub momentum: Scalar,
    pub generator_hidden: [usize; 2],
    /// Spread of untrained generator samples (scale of the output layer's initial weights).
    pub generator_init_scale: Scalar,
    pub mine_hidden: usize,
    /// Generator draws averaged into one candidate perturbation.
    pub mean_draws: usize,
    pub seed: u64,
}

impl Default for RecoveryConfig {
    fn default() -> Self {
        Self {
            thresholds: 5,
            eta: 0.1,
            tau: 0.9,
            batch_size: 64,
            steps: 30,
            noise_dim: 32,
            lr: 0.001,
            momentum: 0.9,
            generator_hidden: [256, 512],
            generator_init_scale: 0.3,
            mine_hidden: 64,
            mean_draws: 256,
            seed: 0,
        }
    }
}

impl RecoveryConfig {
    pub fn validate(&self) -> Result<()> {
        if self.thresholds == 0 {
            return Err(invalid("recovery needs at least one threshold"));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(invalid(format!("tau must lie in (0, 1], got {}", self.tau)));
        }
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(invalid(format!("eta must be a finite non-negative weight, got {}", self.eta)));
        }
        if self.batch_size < 2 {
            return Err(invalid("recovery batch size must be at least 2"));
        }
        if !(self.generator_init_scale >= 0.0 && self.generator_init_scale.is_finite()) {
            return Err(invalid("generator_init_scale must be finite and non-negative"));
        }
        if self.noise_dim == 0 || self.mean_draws == 0 || self.mine_hidden == 0 || self.generator_hidden.contains(&0) {
            return Err(invalid("recovery network sizes and draw counts must be positive"));
        }
        Sgd::new(self.lr, self.momentum).map(|_| ())
    }
}

/// Evenly spaced thresholds `i / n` for `i = 1..=n`.
pub fn make_thresholds(n: usize) -> Result<Vec<Scalar>> {
    if n == 0 {
        return Err(invalid("make_thresholds needs n >= 1"));
    }
    Ok((1..=n).map(|i| i as Scalar / n as Scalar).collect())
}

/// One batch of recovery inputs: clean images `[b, H, W, C]` and two independent noise draws `[b, d]`.
#[derive(Clone, Copy, Debug)]
pub struct RecoveryBatch<'a> {
    pub images: &'a Tensor,
    pub noise: &'a Tensor,
    pub noise_marginal: &'a Tensor,
}

/// The recovery objective and its two components, all recorded on one tape.
#[derive(Clone, Copy, Debug)]
pub struct RecoveryLoss<'t> {
    pub total: Var<'t>,
    /// Mean of `max(0, eps - p_target)` over the batch.
    pub hinge: Var<'t>,
    /// Donsker-Varadhan estimate of `I(G(noise); noise)`.
    pub mutual_info: Var<'t>,
}

/// Networks being optimised for one (label, threshold) job, bound on a tape.
pub struct BoundNets<'a, 't> {
    pub generator: &'a Generator,
    pub generator_params: &'a BoundParams<'t>,
    pub estimator: &'a MiEstimator,
    pub estimator_params: &'a BoundParams<'t>,
}

/// Records `hinge - eta * MI` for a frozen `victim` on `tape`. The victim's parameters are bound as constants.
#[allow(clippy::too_many_arguments)]
pub fn recovery_loss<'t>(
    tape: &'t Tape,
    victim: &Classifier,
    nets: &BoundNets<'_, 't>,
    batch: RecoveryBatch<'_>,
    target: usize,
    threshold: Scalar,
    eta: Scalar,
) -> Result<RecoveryLoss<'t>> {
    if target >= victim.classes() {
        return Err(invalid(format!(
            "presumed target {target} is outside the label space of {} classes",
            victim.classes()
        )));
    }
    let b = batch.images.shape()[0];
    if batch.noise.shape()[0] != b || batch.noise_marginal.shape() != batch.noise.shape() {
        return Err(Error::ShapeMismatch {
            op: "recovery batch",
            lhs: batch.images.shape().to_vec(),
            rhs: batch.noise.shape().to_vec(),
        });
    }
    let frozen = tape.bind(victim.params(), false)?;
    let noise = tape.constant(batch.noise.clone())?;
    let noise_marginal = tape.constant(batch.noise_marginal.clone())?;
    let perturbation = nets.generator.forward(nets.generator_params, noise)?;
    let mut image_shape = vec![b];
    image_shape.extend_from_slice(&victim.input_shape());
    let perturbed = tape
        .constant(batch.images.clone())?
        .add(perturbation.reshape(&image_shape)?)?
        .clip(0.0, 1.0);
    let logits = victim.forward(&frozen, perturbed)?;
    let prob = logits.log_softmax_pick(&vec![target; b])?.exp();
    let hinge = prob.scale(-1.0).add_scalar(threshold).relu().mean()?;
    let mutual_info = nets.estimator.dv_bound(
        nets.estimator_params,
        (perturbation, noise),
        (perturbation, noise_marginal),
    )?;
    let total = hinge.sub(mutual_info.scale(eta))?;
    Ok(RecoveryLoss {
        total,
        hinge,
        mutual_info,
    })
}

/// Mean perturbation produced for one threshold.
#[derive(Clone, Debug, PartialEq)]
pub struct Candidate {
    pub threshold: Scalar,
    pub perturbation: Tensor,
    /// Hinge value at the last optimisation step (0 when no steps ran).
    pub final_hinge: Scalar,
}

fn job_seed(seed: u64, target: usize, threshold_index: usize) -> u64 {
    rng::derive_seed(seed, &[target as u64, threshold_index as u64])
}

/// Trains one generator per threshold for presumed target `target`.
/// Jobs whose loss turns non-finite are dropped with a warning.
pub fn recover_for_label(
    victim: &Classifier,
    holdout: &LabeledDataset,
    target: usize,
    cfg: &RecoveryConfig,
) -> Result<Vec<Candidate>> {
    cfg.validate()?;
    if holdout.is_empty() {
        return Err(Error::Empty("recovery needs a nonempty clean holdout".into()));
    }
    if target >= victim.classes() {
        return Err(invalid(format!(
            "presumed target {target} is outside the label space of {} classes",
            victim.classes()
        )));
    }
    if holdout.image_shape() != victim.input_shape() {
        return Err(Error::ShapeMismatch {
            op: "recover_for_label",
            lhs: holdout.image_shape().to_vec(),
            rhs: victim.input_shape().to_vec(),
        });
    }
    let pool_indices = holdout.indices_without_label(target);
    if pool_indices.is_empty() {
        return Err(Error::Empty(format!("every holdout image already has label {target}")));
    }
    let mut out = Vec::new();
    for (i, &eps) in make_thresholds(cfg.thresholds)?.iter().enumerate() {
        match run_job(victim, holdout, &pool_indices, target, eps, job_seed(cfg.seed, target, i), cfg) {
            Ok(Some(c)) => out.push(c),
            Ok(None) => log::warn!("recovery for label {target} at threshold {eps:.3} diverged; skipped"),
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

fn run_job(
    victim: &Classifier,
    holdout: &LabeledDataset,
    pool_indices: &[usize],
    target: usize,
    eps: Scalar,
    seed: u64,
    cfg: &RecoveryConfig,
) -> Result<Option<Candidate>> {
    let shape = victim.input_shape();
    let mut generator = Generator::new(
        cfg.noise_dim,
        cfg.generator_hidden,
        shape,
        cfg.generator_init_scale,
        rng::derive_seed(seed, &[0]),
    )?;
    let mut estimator = MiEstimator::new(
        generator.output_len(),
        cfg.noise_dim,
        cfg.mine_hidden,
        rng::derive_seed(seed, &[1]),
    )?;
    let mut g_opt = Sgd::new(cfg.lr, cfg.momentum)?;
    let mut h_opt = Sgd::new(cfg.lr, cfg.momentum)?;
    let mut rng = rng::seeded(rng::derive_seed(seed, &[2]));
    let mut final_hinge = 0.0;
    for _ in 0..cfg.steps {
        let rows: Vec<usize> = (0..cfg.batch_size)
            .map(|_| *pool_indices.choose(&mut rng).expect("nonempty"))
            .collect();
        let (images, _) = holdout.batch(&rows);
        let noise = gaussian_noise(cfg.batch_size, cfg.noise_dim, &mut rng);
        let noise_marginal = gaussian_noise(cfg.batch_size, cfg.noise_dim, &mut rng);
        let tape = Tape::new();
        let g_bound = tape.bind(generator.params(), true)?;
        let h_bound = tape.bind(estimator.params(), true)?;
        let nets = BoundNets {
            generator: &generator,
            generator_params: &g_bound,
            estimator: &estimator,
            estimator_params: &h_bound,
        };
        let batch = RecoveryBatch {
            images: &images,
            noise: &noise,
            noise_marginal: &noise_marginal,
        };
        let loss = recovery_loss(&tape, victim, &nets, batch, target, eps, cfg.eta)?;
        final_hinge = loss.hinge.item()?;
        let grads = match tape.backward(loss.total) {
            Ok(g) => g,
            Err(Error::NonFinite { .. }) => return Ok(None),
            Err(e) => return Err(e),
        };
        let g_grads = grads.for_params(&g_bound);
        let h_grads = grads.for_params(&h_bound);
        if !g_grads.is_finite() || !h_grads.is_finite() {
            return Ok(None);
        }
        g_opt.step(generator.params_mut(), &g_grads, Direction::Descend)?;
        h_opt.step(estimator.params_mut(), &h_grads, Direction::Descend)?;
    }
    let perturbation = generator.mean_output(cfg.mean_draws, &mut rng)?;
    if !perturbation.is_finite() {
        return Ok(None);
    }
    Ok(Some(Candidate {
        threshold: eps,
        perturbation,
        final_hinge,
    }))
}

/// Runs recovery for every label and keeps candidates whose holdout attack-success rate reaches `tau`.
/// An empty pool is a valid result.
pub fn recover_all(victim: &Classifier, holdout: &LabeledDataset, cfg: &RecoveryConfig) -> Result<TriggerPool> {
    cfg.validate()?;
    let mut pool = TriggerPool::new(cfg.tau);
    for target in 0..victim.classes() {
        if holdout.indices_without_label(target).is_empty() {
            log::warn!("label {target}: holdout has no images of other labels; skipped");
            continue;
        }
        for cand in recover_for_label(victim, holdout, target, cfg)? {
            let asr = attack_success_rate(victim, holdout, Perturbation::Additive(&cand.perturbation), target, 0)?;
            log::info!(
                "label {target} threshold {:.3}: hinge {:.4}, holdout ASR {asr:.4}",
                cand.threshold,
                cand.final_hinge
            );
            pool.consider(target, cand, asr);
        }
    }
    Ok(pool)
}
