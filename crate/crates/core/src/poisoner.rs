//! Ground-truth backdoor attacks: trigger stamping, dataset poisoning and the
//! attack success rate (ASR) metric.

use std::path::Path;

use rand::seq::index;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::datapipe::LabeledDataset;
use crate::error::{invalid, Error, IoContext, Result};
use crate::netlab::Classifier;
use crate::numcore::rng::{self, Rng};
use crate::numcore::{checkpoint, ParamVector, Scalar, Tensor};

/// Where the trigger window goes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Placement {
    /// Top-left corner of the window at column `x`, row `y`.
    Fixed { x: usize, y: usize },
    /// A fresh uniformly drawn offset for every image.
    RandomPerImage,
}

/// How the pattern is combined with the pixels under it.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BlendMode {
    Replace,
    /// `window <- clip((1 - kappa) * window + kappa * pattern, 0, 1)`
    Blend { kappa: Scalar },
}

/// A square trigger pattern, its placement rule and the attacker's target label.
#[derive(Clone, Debug, PartialEq)]
pub struct TriggerSpec {
    pattern: Tensor,
    pub placement: Placement,
    pub mode: BlendMode,
    pub target: usize,
}

#[derive(Serialize, Deserialize)]
struct TriggerFile {
    target: usize,
    size: usize,
    channels: usize,
    placement: Placement,
    mode: BlendMode,
}

impl TriggerSpec {
    /// `pattern` must be `(s, s, C)` with values in `[0, 1]`.
    pub fn new(pattern: Tensor, placement: Placement, mode: BlendMode, target: usize) -> Result<Self> {
        let s = pattern.shape();
        if s.len() != 3 || s[0] != s[1] {
            return Err(invalid(format!("trigger pattern must be (s, s, C), got {s:?}")));
        }
        if pattern.data().iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(invalid("trigger pattern values must lie in [0, 1]"));
        }
        if let BlendMode::Blend { kappa } = mode {
            if !(kappa > 0.0 && kappa <= 1.0) {
                return Err(invalid(format!("blend factor must lie in (0, 1], got {kappa}")));
            }
        }
        Ok(Self {
            pattern,
            placement,
            mode,
            target,
        })
    }

    /// Solid white `size x size` patch, one pixel in from the bottom-right corner.
    pub fn badnet(size: usize, image_shape: [usize; 3], target: usize) -> Result<Self> {
        let [h, w, c] = image_shape;
        if size + 1 > h || size + 1 > w {
            return Err(invalid(format!("a {size}x{size} trigger does not fit a {h}x{w} image")));
        }
        Self::new(
            Tensor::full(&[size, size, c], 1.0),
            Placement::Fixed {
                x: w - size - 1,
                y: h - size - 1,
            },
            BlendMode::Replace,
            target,
        )
    }

    /// Dense pseudo-random pattern blended in at `kappa`; a stand-in for noise-style triggers.
    pub fn blended_noise(size: usize, image_shape: [usize; 3], kappa: Scalar, target: usize, seed: u64) -> Result<Self> {
        let [h, w, c] = image_shape;
        if size + 1 > h || size + 1 > w {
            return Err(invalid(format!("a {size}x{size} trigger does not fit a {h}x{w} image")));
        }
        let mut rng = rng::seeded(seed);
        let data = (0..size * size * c).map(|_| rng.random::<Scalar>()).collect();
        Self::new(
            Tensor::new(vec![size, size, c], data)?,
            Placement::Fixed {
                x: w - size - 1,
                y: h - size - 1,
            },
            BlendMode::Blend { kappa },
            target,
        )
    }

    pub fn pattern(&self) -> &Tensor {
        &self.pattern
    }

    pub fn size(&self) -> usize {
        self.pattern.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.pattern.shape()[2]
    }

    pub fn fits(&self, image_shape: [usize; 3]) -> Result<()> {
        let [h, w, c] = image_shape;
        let s = self.size();
        if c != self.channels() || s > h || s > w {
            return Err(invalid(format!(
                "trigger {:?} does not fit image shape {image_shape:?}",
                self.pattern.shape()
            )));
        }
        if let Placement::Fixed { x, y } = self.placement {
            if x + s > w || y + s > h {
                return Err(invalid(format!(
                    "trigger at ({x}, {y}) of size {s} leaves a {h}x{w} image"
                )));
            }
        }
        Ok(())
    }

    /// Stamps the trigger into a `(H, W, C)` pixel buffer in place.
    pub fn stamp(&self, pixels: &mut [Scalar], image_shape: [usize; 3], rng: &mut Rng) -> Result<()> {
        self.fits(image_shape)?;
        let [h, w, c] = image_shape;
        let s = self.size();
        let (x0, y0) = match self.placement {
            Placement::Fixed { x, y } => (x, y),
            Placement::RandomPerImage => (rng.random_range(0..=w - s), rng.random_range(0..=h - s)),
        };
        let pat = self.pattern.data();
        for dy in 0..s {
            for dx in 0..s {
                for ch in 0..c {
                    let p = pat[(dy * s + dx) * c + ch];
                    let px = &mut pixels[((y0 + dy) * w + x0 + dx) * c + ch];
                    *px = match self.mode {
                        BlendMode::Replace => p,
                        BlendMode::Blend { kappa } => ((1.0 - kappa) * *px + kappa * p).clamp(0.0, 1.0),
                    };
                }
            }
        }
        Ok(())
    }

    /// Writes `path` (pattern checkpoint) and `path` with extension `.trigger.toml`.
    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, &ParamVector::new().with("pattern", self.pattern.clone())?)?;
        let file = TriggerFile {
            target: self.target,
            size: self.size(),
            channels: self.channels(),
            placement: self.placement,
            mode: self.mode,
        };
        let side = path.with_extension("trigger.toml");
        std::fs::write(&side, toml::to_string(&file)?).at(&side)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let side = path.with_extension("trigger.toml");
        let file: TriggerFile = toml::from_str(&std::fs::read_to_string(&side).at(&side)?)?;
        let pattern = checkpoint::load(path)?
            .get("pattern")
            .cloned()
            .ok_or_else(|| Error::Format("trigger checkpoint lacks a pattern segment".into()))?;
        if pattern.shape() != [file.size, file.size, file.channels] {
            return Err(Error::Format("trigger pattern shape disagrees with its manifest".into()));
        }
        Self::new(pattern, file.placement, file.mode, file.target)
    }
}

/// Returns a copy of `image` (`(H, W, C)`) with the trigger applied.
pub fn apply_trigger(image: &Tensor, spec: &TriggerSpec, rng: &mut Rng) -> Result<Tensor> {
    let s = image.shape();
    if s.len() != 3 {
        return Err(invalid(format!("expected an (H, W, C) image, got {s:?}")));
    }
    let mut out = image.clone();
    spec.stamp(out.data_mut(), [s[0], s[1], s[2]], rng)?;
    Ok(out)
}

/// A training set with a trigger stamped into a subset of its samples.
#[derive(Clone, Debug)]
pub struct PoisonedDataset {
    pub data: LabeledDataset,
    /// Sorted indices of the poisoned samples.
    pub poisoned_indices: Vec<usize>,
    pub spec: TriggerSpec,
    pub poison_rate: Scalar,
}

fn per_image_rng(seed: u64, index: usize) -> Rng {
    rng::seeded(rng::derive_seed(seed, &[index as u64]))
}

/// Poisons `round(rate * N)` samples drawn uniformly among those whose label is not the target.
pub fn poison_dataset(data: &LabeledDataset, spec: &TriggerSpec, poison_rate: Scalar, seed: u64) -> Result<PoisonedDataset> {
    if !(poison_rate > 0.0 && poison_rate < 1.0) {
        return Err(invalid(format!("poison rate must lie in (0, 1), got {poison_rate}")));
    }
    spec.fits(data.image_shape())?;
    let count = (poison_rate * data.len() as Scalar + 0.5).floor() as usize;
    if count == 0 {
        return Err(invalid(format!(
            "poison rate {poison_rate} selects no samples out of {}",
            data.len()
        )));
    }
    let eligible = data.indices_without_label(spec.target);
    if eligible.len() < count {
        return Err(invalid(format!(
            "{count} poisoned samples requested but only {} have a non-target label",
            eligible.len()
        )));
    }
    let mut chosen: Vec<usize> = index::sample(&mut rng::seeded(seed), eligible.len(), count)
        .into_iter()
        .map(|i| eligible[i])
        .collect();
    chosen.sort_unstable();

    let shape = data.image_shape();
    let mut poisoned = data.clone();
    for &i in &chosen {
        spec.stamp(poisoned.image_mut(i), shape, &mut per_image_rng(seed, i))?;
        poisoned.labels_mut()[i] = spec.target;
    }
    poisoned.set_provenance(format!("{}#poisoned", data.provenance()));
    Ok(PoisonedDataset {
        data: poisoned,
        poisoned_indices: chosen,
        spec: spec.clone(),
        poison_rate,
    })
}

/// What gets added to clean images when measuring attack success.
#[derive(Clone, Copy, Debug)]
pub enum Perturbation<'a> {
    /// Full-image additive perturbation; inputs become `clip(x + p, 0, 1)`.
    Additive(&'a Tensor),
    Trigger(&'a TriggerSpec),
}

impl Perturbation<'_> {
    /// Perturbs image `i` of `data`; `seed` drives random trigger placement.
    pub fn apply(&self, pixels: &mut [Scalar], image_shape: [usize; 3], seed: u64, index: usize) -> Result<()> {
        match self {
            Perturbation::Additive(p) => {
                if p.len() != pixels.len() {
                    return Err(Error::ShapeMismatch {
                        op: "perturbation",
                        lhs: image_shape.to_vec(),
                        rhs: p.shape().to_vec(),
                    });
                }
                for (x, d) in pixels.iter_mut().zip(p.data()) {
                    *x = (*x + d).clamp(0.0, 1.0);
                }
                Ok(())
            }
            Perturbation::Trigger(spec) => spec.stamp(pixels, image_shape, &mut per_image_rng(seed, index)),
        }
    }
}

/// Predictions on perturbed copies of every sample whose label is not `target`.
pub fn triggered_predictions(
    model: &Classifier,
    data: &LabeledDataset,
    perturbation: Perturbation<'_>,
    target: usize,
    seed: u64,
) -> Result<Vec<usize>> {
    let eligible = data.indices_without_label(target);
    if eligible.is_empty() {
        return Err(Error::Empty(format!(
            "every evaluation sample already carries the target label {target}"
        )));
    }
    let shape = data.image_shape();
    let mut preds = Vec::with_capacity(eligible.len());
    for chunk in eligible.chunks(crate::netlab::EVAL_BATCH_SIZE) {
        let (mut batch, _) = data.batch(chunk);
        let per = data.image_len();
        for (slot, &i) in batch.data_mut().chunks_exact_mut(per).zip(chunk) {
            perturbation.apply(slot, shape, seed, i)?;
        }
        preds.extend(model.predict(&batch)?);
    }
    Ok(preds)
}

/// Fraction of non-target samples that the perturbation sends to `target`.
pub fn attack_success_rate(
    model: &Classifier,
    clean_eval: &LabeledDataset,
    perturbation: Perturbation<'_>,
    target: usize,
    seed: u64,
) -> Result<Scalar> {
    let preds = triggered_predictions(model, clean_eval, perturbation, target, seed)?;
    Ok(preds.iter().filter(|&&p| p == target).count() as Scalar / preds.len() as Scalar)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn white_patch(target: usize) -> TriggerSpec {
        TriggerSpec::new(
            Tensor::full(&[3, 3, 1], 1.0),
            Placement::Fixed { x: 0, y: 0 },
            BlendMode::Replace,
            target,
        )
        .unwrap()
    }

    #[test]
    fn replace_sets_exactly_the_window() {
        let img = Tensor::zeros(&[28, 28, 1]);
        let out = apply_trigger(&img, &white_patch(0), &mut rng::seeded(0)).unwrap();
        assert_eq!(out.data().iter().filter(|&&v| v == 1.0).count(), 9);
        assert_eq!(out.data().iter().filter(|&&v| v == 0.0).count(), 28 * 28 - 9);
        for y in 0..3 {
            for x in 0..3 {
                assert_eq!(out.data()[y * 28 + x], 1.0);
            }
        }
    }

    #[test]
    fn blend_at_one_matches_replace() {
        let mut r = rng::seeded(3);
        let img = Tensor::new(vec![8, 8, 1], (0..64).map(|_| r.random::<f64>()).collect()).unwrap();
        let pattern = Tensor::new(vec![3, 3, 1], (0..9).map(|i| i as f64 / 9.0).collect()).unwrap();
        let place = Placement::Fixed { x: 2, y: 4 };
        let rep = TriggerSpec::new(pattern.clone(), place, BlendMode::Replace, 1).unwrap();
        let blend = TriggerSpec::new(pattern, place, BlendMode::Blend { kappa: 1.0 }, 1).unwrap();
        let a = apply_trigger(&img, &rep, &mut rng::seeded(0)).unwrap();
        let b = apply_trigger(&img, &blend, &mut rng::seeded(0)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn half_blend_of_white_on_gray() {
        let img = Tensor::full(&[5, 5, 1], 0.4);
        let spec = TriggerSpec::new(
            Tensor::full(&[3, 3, 1], 1.0),
            Placement::Fixed { x: 1, y: 1 },
            BlendMode::Blend { kappa: 0.5 },
            0,
        )
        .unwrap();
        let out = apply_trigger(&img, &spec, &mut rng::seeded(0)).unwrap();
        for y in 0..5 {
            for x in 0..5 {
                let v = out.data()[y * 5 + x];
                if (1..4).contains(&x) && (1..4).contains(&y) {
                    assert!((v - 0.7).abs() < 1e-12);
                } else {
                    assert_eq!(v, 0.4);
                }
            }
        }
    }

    #[test]
    fn oversized_pattern_is_rejected() {
        let img = Tensor::zeros(&[2, 2, 1]);
        assert!(apply_trigger(&img, &white_patch(0), &mut rng::seeded(0)).is_err());
        let spec = TriggerSpec::new(
            Tensor::full(&[3, 3, 1], 1.0),
            Placement::Fixed { x: 26, y: 0 },
            BlendMode::Replace,
            0,
        )
        .unwrap();
        assert!(apply_trigger(&Tensor::zeros(&[28, 28, 1]), &spec, &mut rng::seeded(0)).is_err());
    }

    #[test]
    fn invalid_kappa_is_rejected() {
        for kappa in [0.0, -0.1, 1.5] {
            let r = TriggerSpec::new(
                Tensor::full(&[3, 3, 1], 1.0),
                Placement::RandomPerImage,
                BlendMode::Blend { kappa },
                0,
            );
            assert!(r.is_err(), "kappa {kappa}");
        }
    }

    #[test]
    fn random_placement_stays_in_bounds() {
        let spec = TriggerSpec::new(
            Tensor::full(&[5, 5, 1], 1.0),
            Placement::RandomPerImage,
            BlendMode::Replace,
            0,
        )
        .unwrap();
        let mut r = rng::seeded(11);
        for _ in 0..200 {
            let out = apply_trigger(&Tensor::zeros(&[9, 7, 1]), &spec, &mut r).unwrap();
            assert_eq!(out.data().iter().filter(|&&v| v == 1.0).count(), 25);
        }
    }

    fn toy_set(n: usize, labels: impl Fn(usize) -> usize) -> LabeledDataset {
        LabeledDataset::new(
            [6, 6, 1],
            (0..n * 36).map(|i| (i % 7) as f64 / 7.0).collect(),
            (0..n).map(labels).collect(),
            "toy",
        )
        .unwrap()
    }

    #[test]
    fn poisoning_counts_and_relabels() {
        // 1000 samples, 100 with the target label 0 -> 900 eligible
        let data = toy_set(1000, |i| if i < 100 { 0 } else { 1 + i % 9 });
        let spec = TriggerSpec::badnet(3, [6, 6, 1], 0).unwrap();
        let p = poison_dataset(&data, &spec, 0.1, 5).unwrap();
        assert_eq!(p.poisoned_indices.len(), 100);
        for &i in &p.poisoned_indices {
            assert_eq!(p.data.label(i), 0);
            assert_ne!(data.label(i), 0);
        }
        for i in 0..data.len() {
            if p.poisoned_indices.binary_search(&i).is_err() {
                assert_eq!(p.data.image(i), data.image(i));
                assert_eq!(p.data.label(i), data.label(i));
            }
        }
    }

    #[test]
    fn class_histogram_bookkeeping() {
        let data = toy_set(1000, |i| i % 10);
        let spec = TriggerSpec::badnet(3, [6, 6, 1], 4).unwrap();
        let p = poison_dataset(&data, &spec, 0.1, 9).unwrap();
        let before = data.class_counts(10);
        let after = p.data.class_counts(10);
        let mut drawn = [0usize; 10];
        for &i in &p.poisoned_indices {
            drawn[data.label(i)] += 1;
        }
        assert_eq!(drawn[4], 0);
        for c in 0..10 {
            let expected = if c == 4 { before[c] + 100 } else { before[c] - drawn[c] };
            assert_eq!(after[c], expected, "class {c}");
        }
    }

    #[test]
    fn degenerate_poison_rates_error() {
        let data = toy_set(10, |i| i % 3);
        let spec = TriggerSpec::badnet(3, [6, 6, 1], 0).unwrap();
        assert!(poison_dataset(&data, &spec, 0.01, 0).is_err());
        assert!(poison_dataset(&data, &spec, 0.0, 0).is_err());
        assert!(poison_dataset(&data, &spec, 1.0, 0).is_err());
        // 9 requested, only 6 eligible
        assert!(poison_dataset(&data, &spec, 0.9, 0).is_err());
    }

    #[test]
    fn trigger_roundtrips_through_files() {
        let dir = tempfile::tempdir().unwrap();
        let spec = TriggerSpec::blended_noise(5, [28, 28, 1], 0.2, 3, 17).unwrap();
        let path = dir.path().join("trigger.bers");
        spec.save(&path).unwrap();
        assert_eq!(TriggerSpec::load(&path).unwrap(), spec);
    }
}
