use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::arch::{argmax, Classifier};
use crate::datapipe::LabeledDataset;
use crate::error::{invalid, Error, Result};
use crate::numcore::{rng, Direction, Scalar, Sgd};

/// Optimizer settings for supervised training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            batch_size: 128,
            lr: 0.01,
            momentum: 0.9,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(invalid("training needs at least one epoch"));
        }
        if self.batch_size == 0 {
            return Err(invalid("batch size must be at least 1"));
        }
        if self.lr < 0.0 || !self.lr.is_finite() {
            return Err(invalid(format!("learning rate must be non-negative, got {}", self.lr)));
        }
        Ok(())
    }
}

/// Mean loss and running accuracy over one epoch's mini-batches.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: Scalar,
    pub accuracy: Scalar,
}

fn check_labels(model: &Classifier, data: &LabeledDataset) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Empty("training set".into()));
    }
    if data.image_shape() != model.input_shape() {
        return Err(Error::ShapeMismatch {
            op: "train",
            lhs: model.input_shape().to_vec(),
            rhs: data.image_shape().to_vec(),
        });
    }
    match data.max_label() {
        Some(y) if y >= model.classes() => Err(invalid(format!(
            "label {y} outside the label space of {} classes",
            model.classes()
        ))),
        _ => Ok(()),
    }
}

/// Mini-batch momentum SGD on cross-entropy. The final partial batch is kept.
/// With `lr == 0` the parameters are left untouched.
pub fn train(model: &Classifier, data: &LabeledDataset, cfg: &TrainConfig) -> Result<(Classifier, Vec<EpochStats>)> {
    cfg.validate()?;
    check_labels(model, data)?;
    let mut model = model.clone();
    let mut opt = if cfg.lr > 0.0 {
        Some(Sgd::new(cfg.lr, cfg.momentum)?)
    } else {
        None
    };
    let mut rng = rng::seeded(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let (batch, labels) = data.batch(chunk);
            let logits_loss = step(&mut model, opt.as_mut(), &batch, &labels)?;
            loss_sum += logits_loss.0 * chunk.len() as Scalar;
            correct += logits_loss.1;
        }
        history.push(EpochStats {
            epoch,
            loss: loss_sum / data.len() as Scalar,
            accuracy: correct as Scalar / data.len() as Scalar,
        });
    }
    Ok((model, history))
}

/// One descent step; returns the batch loss and the number of correct predictions before the update.
fn step(
    model: &mut Classifier,
    opt: Option<&mut Sgd>,
    batch: &crate::numcore::Tensor,
    labels: &[usize],
) -> Result<(Scalar, usize)> {
    use crate::numcore::Tape;
    let tape = Tape::new();
    let bound = tape.bind(model.params(), opt.is_some())?;
    let x = tape.constant(batch.clone())?;
    let logits = model.forward(&bound, x)?;
    let k = model.classes();
    let correct = logits
        .value()
        .data()
        .chunks_exact(k)
        .zip(labels)
        .filter(|(row, &y)| argmax(row) == y)
        .count();
    let loss = logits.softmax_cross_entropy(labels)?;
    let value = loss.item()?;
    if let Some(opt) = opt {
        let grads = tape.backward(loss)?.for_params(&bound);
        opt.step(model.params_mut(), &grads, Direction::Descend)?;
    }
    Ok((value, correct))
}

/// Fraction of samples whose arg-max logit equals the label (ties toward the smaller index).
pub fn accuracy(model: &Classifier, data: &LabeledDataset) -> Result<Scalar> {
    if data.is_empty() {
        return Err(Error::Empty("accuracy needs at least one sample".into()));
    }
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut correct = 0usize;
    for chunk in idx.chunks(EVAL_BATCH_SIZE) {
        let (batch, labels) = data.batch(chunk);
        let preds = model.predict(&batch)?;
        correct += preds.iter().zip(&labels).filter(|(p, y)| p == y).count();
    }
    Ok(correct as Scalar / data.len() as Scalar)
}

pub(crate) const EVAL_BATCH_SIZE: usize = 32;
