use std::path::{Path, PathBuf};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, IoContext, Result};
use crate::numcore::rng::{self, Rng};
use crate::numcore::{checkpoint, BoundParams, ParamVector, Scalar, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchKind {
    /// conv3x3 - relu - pool2 - conv3x3 - relu - pool2 - dense - relu - dense
    SmallCnn,
    /// flatten - dense - relu - dense
    Mlp,
}

/// Declarative description of a classifier; doubles as the sidecar file next to a checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Arch {
    pub kind: ArchKind,
    /// `(H, W, C)`
    pub input_shape: [usize; 3],
    pub classes: usize,
    /// Filter counts of the two convolutions (ignored by the MLP).
    #[serde(default = "default_filters")]
    pub conv_filters: [usize; 2],
    #[serde(default = "default_hidden")]
    pub hidden: usize,
}

fn default_filters() -> [usize; 2] {
    [8, 16]
}

fn default_hidden() -> usize {
    64
}

impl Arch {
    pub fn new(kind: ArchKind, input_shape: [usize; 3], classes: usize) -> Self {
        Self {
            kind,
            input_shape,
            classes,
            conv_filters: default_filters(),
            hidden: default_hidden(),
        }
    }

    pub fn with_widths(mut self, conv_filters: [usize; 2], hidden: usize) -> Self {
        self.conv_filters = conv_filters;
        self.hidden = hidden;
        self
    }

    /// Spatial size after the two conv/pool stages, or an error if the input is too small.
    fn cnn_feature_hw(&self) -> Result<(usize, usize)> {
        let stage = |d: usize| -> Option<usize> { d.checked_sub(2).map(|v| v / 2).filter(|&v| v >= 1) };
        let [h, w, _] = self.input_shape;
        match (stage(h).and_then(stage), stage(w).and_then(stage)) {
            (Some(fh), Some(fw)) => Ok((fh, fw)),
            _ => Err(invalid(format!(
                "input shape {:?} is too small for two 3x3 conv + 2x2 pool stages",
                self.input_shape
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(invalid(format!("need at least 2 classes, got {}", self.classes)));
        }
        if self.input_shape.contains(&0) || self.hidden == 0 || self.conv_filters.contains(&0) {
            return Err(invalid("architecture dimensions must be positive"));
        }
        if self.kind == ArchKind::SmallCnn {
            self.cnn_feature_hw()?;
        }
        Ok(())
    }

    /// `(name, shape, fan_in)` of every parameter segment, in order.
    fn layout(&self) -> Result<Vec<(&'static str, Vec<usize>, usize)>> {
        self.validate()?;
        let [h, w, c] = self.input_shape;
        let k = self.classes;
        let hid = self.hidden;
        Ok(match self.kind {
            ArchKind::SmallCnn => {
                let [f1, f2] = self.conv_filters;
                let (fh, fw) = self.cnn_feature_hw()?;
                let flat = fh * fw * f2;
                vec![
                    ("conv1.w", vec![3, 3, c, f1], 9 * c),
                    ("conv1.b", vec![f1], 9 * c),
                    ("conv2.w", vec![3, 3, f1, f2], 9 * f1),
                    ("conv2.b", vec![f2], 9 * f1),
                    ("fc1.w", vec![flat, hid], flat),
                    ("fc1.b", vec![hid], flat),
                    ("fc2.w", vec![hid, k], hid),
                    ("fc2.b", vec![k], hid),
                ]
            }
            ArchKind::Mlp => {
                let flat = h * w * c;
                vec![
                    ("fc1.w", vec![flat, hid], flat),
                    ("fc1.b", vec![hid], flat),
                    ("fc2.w", vec![hid, k], hid),
                    ("fc2.b", vec![k], hid),
                ]
            }
        })
    }

    pub fn param_count(&self) -> Result<usize> {
        Ok(self.layout()?.iter().map(|(_, s, _)| s.iter().product::<usize>()).sum())
    }

    /// Fan-in scaled uniform initialization: weights `U(+-sqrt(6/fan_in))`, biases `U(+-1/sqrt(fan_in))`.
    pub fn init_params(&self, seed: u64) -> Result<ParamVector> {
        let mut rng = rng::seeded(seed);
        let mut params = ParamVector::new();
        for (name, shape, fan_in) in self.layout()? {
            let bound = if name.ends_with(".w") {
                (6.0 / fan_in as Scalar).sqrt()
            } else {
                1.0 / (fan_in as Scalar).sqrt()
            };
            params.push(name, uniform(&mut rng, &shape, bound))?;
        }
        Ok(params)
    }
}

pub(crate) fn uniform(rng: &mut Rng, shape: &[usize], bound: Scalar) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::from_parts(shape.to_vec(), data)
}

/// Index of the largest value; ties go to the smaller index.
pub fn argmax(row: &[Scalar]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// A victim model `F`: architecture plus parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Classifier {
    arch: Arch,
    params: ParamVector,
}

impl Classifier {
    pub fn build(kind: ArchKind, input_shape: [usize; 3], classes: usize, seed: u64) -> Result<Self> {
        Self::from_arch(Arch::new(kind, input_shape, classes), seed)
    }

    pub fn from_arch(arch: Arch, seed: u64) -> Result<Self> {
        let params = arch.init_params(seed)?;
        Ok(Self { arch, params })
    }

    pub fn with_params(arch: Arch, params: ParamVector) -> Result<Self> {
        let expected = arch.init_params(0)?;
        if !expected.same_layout(&params) {
            return Err(Error::ShapeMismatch {
                op: "classifier",
                lhs: vec![expected.total_dims()],
                rhs: vec![params.total_dims()],
            });
        }
        Ok(Self { arch, params })
    }

    pub fn arch(&self) -> &Arch {
        &self.arch
    }

    pub fn classes(&self) -> usize {
        self.arch.classes
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.arch.input_shape
    }

    pub fn params(&self) -> &ParamVector {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamVector {
        &mut self.params
    }

    pub fn set_params(&mut self, params: ParamVector) -> Result<()> {
        self.params.check_layout(&params, "set_params")?;
        self.params = params;
        Ok(())
    }

    /// Records the forward pass of `x` (`[N, H, W, C]`) with parameters bound on the same tape.
    pub fn forward<'t>(&self, bound: &BoundParams<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let shape = x.shape();
        if shape.len() != 4 || shape[1..] != self.arch.input_shape {
            return Err(Error::ShapeMismatch {
                op: "classifier forward",
                lhs: shape,
                rhs: self.arch.input_shape.to_vec(),
            });
        }
        let n = shape[0];
        let features = match self.arch.kind {
            ArchKind::SmallCnn => {
                let h = x
                    .conv2d(bound.get("conv1.w")?, 1, 0)?
                    .add_bias(bound.get("conv1.b")?)?
                    .relu()
                    .maxpool2d()?;
                let h = h
                    .conv2d(bound.get("conv2.w")?, 1, 0)?
                    .add_bias(bound.get("conv2.b")?)?
                    .relu()
                    .maxpool2d()?;
                let flat = h.shape()[1..].iter().product::<usize>();
                h.reshape(&[n, flat])?
            }
            ArchKind::Mlp => x.reshape(&[n, self.arch.input_shape.iter().product()])?,
        };
        features
            .matmul(bound.get("fc1.w")?)?
            .add_bias(bound.get("fc1.b")?)?
            .relu()
            .matmul(bound.get("fc2.w")?)?
            .add_bias(bound.get("fc2.b")?)
    }

    /// Logits `[N, K]` for a batch, without recording gradients.
    pub fn logits(&self, batch: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let bound = tape.bind(&self.params, false)?;
        let x = tape.constant(batch.clone())?;
        Ok(self.forward(&bound, x)?.value())
    }

    pub fn predict(&self, batch: &Tensor) -> Result<Vec<usize>> {
        let logits = self.logits(batch)?;
        Ok(logits.data().chunks_exact(self.arch.classes).map(argmax).collect())
    }

    /// Mean cross-entropy and its gradient over one batch.
    pub fn loss_and_grad(&self, batch: &Tensor, labels: &[usize]) -> Result<(Scalar, ParamVector)> {
        let tape = Tape::new();
        let bound = tape.bind(&self.params, true)?;
        let x = tape.constant(batch.clone())?;
        let loss = self.forward(&bound, x)?.softmax_cross_entropy(labels)?;
        let value = loss.item()?;
        let grads = tape.backward(loss)?;
        Ok((value, grads.for_params(&bound)))
    }

    fn sidecar(path: &Path) -> PathBuf {
        path.with_extension("arch.toml")
    }

    /// Writes `path` (checkpoint) and `path` with extension `.arch.toml` (architecture).
    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, &self.params)?;
        let side = Self::sidecar(path);
        std::fs::write(&side, toml::to_string(&self.arch)?).at(&side)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let side = Self::sidecar(path);
        let arch: Arch = toml::from_str(&std::fs::read_to_string(&side).at(&side)?)?;
        Self::with_params(arch, checkpoint::load(path)?)
    }
}
