use crate::error::{invalid, Error, Result};
use crate::netlab::uniform;
use crate::numcore::{rng, BoundParams, ParamVector, Scalar, Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};

fn push_dense(
    params: &mut ParamVector,
    name: &str,
    fan_in: usize,
    fan_out: usize,
    rng: &mut rng::Rng,
    scale: Scalar,
) -> Result<()> {
    let w_bound = (6.0 / fan_in as Scalar).sqrt() * scale;
    let b_bound = scale / (fan_in as Scalar).sqrt();
    params.push(format!("{name}.w"), uniform(rng, &[fan_in, fan_out], w_bound))?;
    params.push(format!("{name}.b"), uniform(rng, &[fan_out], b_bound))
}

/// Dense layer with zero-initialised bias.
fn push_dense_zero_bias(
    params: &mut ParamVector,
    name: &str,
    fan_in: usize,
    fan_out: usize,
    rng: &mut rng::Rng,
    scale: Scalar,
) -> Result<()> {
    let w_bound = (6.0 / fan_in as Scalar).sqrt() * scale;
    params.push(format!("{name}.w"), uniform(rng, &[fan_in, fan_out], w_bound))?;
    params.push(format!("{name}.b"), Tensor::zeros(&[fan_out]))
}

fn dense<'t>(bound: &BoundParams<'t>, name: &str, x: Var<'t>) -> Result<Var<'t>> {
    x.matmul(bound.get(&format!("{name}.w"))?)?
        .add_bias(bound.get(&format!("{name}.b"))?)
}

/// Standard-normal noise matrix `[rows, cols]`.
pub fn gaussian_noise(rows: usize, cols: usize, rng: &mut rng::Rng) -> Tensor {
    let data = (0..rows * cols).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::from_parts(vec![rows, cols], data)
}

/// Noise draws used to centre a fresh generator's output layer.
const CENTERING_DRAWS: usize = 1024;

/// Noise-to-perturbation MLP: `d -> h1 -> h2 -> H*W*C`, ReLU hidden layers, tanh output.
///
/// The output bias is initialised so that the pre-activation averaged over
/// noise is zero: fresh samples vary with the noise but their mean is close to zero.
#[derive(Clone, Debug, PartialEq)]
pub struct Generator {
    noise_dim: usize,
    hidden: [usize; 2],
    output_shape: [usize; 3],
    params: ParamVector,
}

impl Generator {
    /// `output_scale` multiplies the usual uniform bound of the last layer's weights
    /// and so sets the spread of untrained samples.
    pub fn new(
        noise_dim: usize,
        hidden: [usize; 2],
        output_shape: [usize; 3],
        output_scale: Scalar,
        seed: u64,
    ) -> Result<Self> {
        if !(output_scale >= 0.0 && output_scale.is_finite()) {
            return Err(invalid(format!("output scale must be finite and non-negative, got {output_scale}")));
        }
        if noise_dim == 0 || hidden.contains(&0) || output_shape.contains(&0) {
            return Err(invalid(format!(
                "generator sizes must be positive (noise {noise_dim}, hidden {hidden:?}, output {output_shape:?})"
            )));
        }
        let out = output_shape.iter().product();
        let mut rng = rng::seeded(seed);
        let mut params = ParamVector::new();
        push_dense_zero_bias(&mut params, "g1", noise_dim, hidden[0], &mut rng, 1.0)?;
        push_dense_zero_bias(&mut params, "g2", hidden[0], hidden[1], &mut rng, 1.0)?;
        push_dense_zero_bias(&mut params, "g3", hidden[1], out, &mut rng, output_scale)?;
        let mut generator = Self {
            noise_dim,
            hidden,
            output_shape,
            params,
        };
        generator.center_output(&mut rng)?;
        Ok(generator)
    }

    /// Sets the output bias to `-W3 * E[h2]`, with the expectation estimated from fresh noise.
    fn center_output(&mut self, rng: &mut rng::Rng) -> Result<()> {
        let tape = Tape::new();
        let bound = tape.bind(&self.params, false)?;
        let noise = tape.constant(gaussian_noise(CENTERING_DRAWS, self.noise_dim, rng))?;
        let h = dense(&bound, "g1", noise)?.relu();
        let h = dense(&bound, "g2", h)?.relu().value();
        let width = self.hidden[1];
        let mut mean_h = vec![0.0; width];
        for row in h.data().chunks_exact(width) {
            mean_h.iter_mut().zip(row).for_each(|(m, v)| *m += v / CENTERING_DRAWS as Scalar);
        }
        let w = self.params.get("g3.w").expect("output layer exists").clone();
        let out = self.output_len();
        let mut bias = vec![0.0; out];
        for (hk, wrow) in mean_h.iter().zip(w.data().chunks_exact(out)) {
            bias.iter_mut().zip(wrow).for_each(|(b, wv)| *b -= hk * wv);
        }
        *self.params.get_mut("g3.b").expect("output layer exists") = Tensor::new(vec![out], bias)?;
        Ok(())
    }

    pub fn noise_dim(&self) -> usize {
        self.noise_dim
    }

    pub fn hidden(&self) -> [usize; 2] {
        self.hidden
    }

    pub fn output_shape(&self) -> [usize; 3] {
        self.output_shape
    }

    pub fn output_len(&self) -> usize {
        self.output_shape.iter().product()
    }

    pub fn params(&self) -> &ParamVector {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamVector {
        &mut self.params
    }

    /// Maps noise `[N, d]` to flattened perturbations `[N, H*W*C]` in `[-1, 1]`.
    pub fn forward<'t>(&self, bound: &BoundParams<'t>, noise: Var<'t>) -> Result<Var<'t>> {
        let shape = noise.shape();
        if shape.len() != 2 || shape[1] != self.noise_dim {
            return Err(Error::ShapeMismatch {
                op: "generator forward",
                lhs: shape,
                rhs: vec![0, self.noise_dim],
            });
        }
        let h = dense(bound, "g1", noise)?.relu();
        let h = dense(bound, "g2", h)?.relu();
        Ok(dense(bound, "g3", h)?.tanh())
    }

    pub fn sample(&self, noise: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let bound = tape.bind(&self.params, false)?;
        Ok(self.forward(&bound, tape.constant(noise.clone())?)?.value())
    }

    /// Elementwise mean of `draws` generator outputs, shaped like one image.
    pub fn mean_output(&self, draws: usize, rng: &mut rng::Rng) -> Result<Tensor> {
        if draws == 0 {
            return Err(invalid("mean_output needs at least one draw"));
        }
        let samples = self.sample(&gaussian_noise(draws, self.noise_dim, rng))?;
        let len = self.output_len();
        let mut mean = vec![0.0; len];
        for row in samples.data().chunks_exact(len) {
            mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
        }
        mean.iter_mut().for_each(|m| *m /= draws as Scalar);
        Tensor::new(self.output_shape.to_vec(), mean)
    }
}

/// Statistics network `T(a, b)` of a Donsker-Varadhan mutual-information bound: two tanh hidden layers, linear output.
#[derive(Clone, Debug, PartialEq)]
pub struct MiEstimator {
    a_dim: usize,
    b_dim: usize,
    params: ParamVector,
}

impl MiEstimator {
    pub fn new(a_dim: usize, b_dim: usize, hidden: usize, seed: u64) -> Result<Self> {
        if a_dim == 0 || b_dim == 0 || hidden == 0 {
            return Err(invalid("statistics network sizes must be positive"));
        }
        let mut rng = rng::seeded(seed);
        let mut params = ParamVector::new();
        push_dense(&mut params, "t1", a_dim + b_dim, hidden, &mut rng, 1.0)?;
        push_dense(&mut params, "t2", hidden, hidden, &mut rng, 1.0)?;
        push_dense(&mut params, "t3", hidden, 1, &mut rng, 1.0)?;
        Ok(Self { a_dim, b_dim, params })
    }

    pub fn params(&self) -> &ParamVector {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamVector {
        &mut self.params
    }

    /// `T` evaluated row-wise on `[N, a_dim]` and `[N, b_dim]`, giving `[N, 1]`.
    pub fn statistic<'t>(&self, bound: &BoundParams<'t>, a: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
        let (sa, sb) = (a.shape(), b.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != self.a_dim || sb[1] != self.b_dim {
            return Err(Error::ShapeMismatch {
                op: "statistic network",
                lhs: sa,
                rhs: sb,
            });
        }
        let h = dense(bound, "t1", a.concat_cols(b)?)?.tanh();
        let h = dense(bound, "t2", h)?.tanh();
        dense(bound, "t3", h)
    }

    /// `mean T(joint) - (logsumexp T(marginal) - ln N)`, differentiable through every input.
    pub fn dv_bound<'t>(
        &self,
        bound: &BoundParams<'t>,
        joint: (Var<'t>, Var<'t>),
        marginal: (Var<'t>, Var<'t>),
    ) -> Result<Var<'t>> {
        let n = joint.0.shape()[0];
        if n < 2 || marginal.0.shape()[0] != n {
            return Err(invalid(format!(
                "the bound needs equal joint and marginal batches of at least 2 (got {n} and {})",
                marginal.0.shape()[0]
            )));
        }
        let t_joint = self.statistic(bound, joint.0, joint.1)?.mean()?;
        let t_marg = self.statistic(bound, marginal.0, marginal.1)?.logsumexp()?;
        t_joint.sub(t_marg.add_scalar(-(n as Scalar).ln()))
    }

    /// Value of the bound for joint pairs `(a, b)` and marginal pairs `(a_m, b_m)`.
    pub fn estimate(&self, a: &Tensor, b: &Tensor, a_marg: &Tensor, b_marg: &Tensor) -> Result<Scalar> {
        let tape = Tape::new();
        let bound = tape.bind(&self.params, false)?;
        let c = |t: &Tensor| tape.constant(t.clone());
        self.dv_bound(&bound, (c(a)?, c(b)?), (c(a_marg)?, c(b_marg)?))?.item()
    }

    /// Bound on the given pairs with the marginal formed by shuffling the rows of `b`.
    pub fn estimate_shuffled(&self, a: &Tensor, b: &Tensor, seed: u64) -> Result<Scalar> {
        let b_marg = shuffled_rows(b, &mut rng::seeded(seed));
        self.estimate(a, b, a, &b_marg)
    }
}

fn shuffled_rows(t: &Tensor, rng: &mut rng::Rng) -> Tensor {
    let (rows, cols) = (t.shape()[0], t.len() / t.shape()[0]);
    let mut order: Vec<usize> = (0..rows).collect();
    order.shuffle(rng);
    gather_rows(t, &order, cols)
}

fn gather_rows(t: &Tensor, rows: &[usize], cols: usize) -> Tensor {
    let mut data = Vec::with_capacity(rows.len() * cols);
    for &r in rows {
        data.extend_from_slice(&t.data()[r * cols..(r + 1) * cols]);
    }
    Tensor::from_parts(vec![rows.len(), cols], data)
}

/// Optimisation settings for [`fit_mine`].
#[derive(Clone, Debug, PartialEq)]
pub struct MineFitConfig {
    pub hidden: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: Scalar,
    pub momentum: Scalar,
    pub seed: u64,
}

impl Default for MineFitConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            steps: 3000,
            batch_size: 256,
            lr: 0.01,
            momentum: 0.9,
            seed: 0,
        }
    }
}

/// Trains a statistics network on paired samples `a: [N, da]`, `b: [N, db]` by ascending the bound.
pub fn fit_mine(a: &Tensor, b: &Tensor, cfg: &MineFitConfig) -> Result<MiEstimator> {
    if a.rank() != 2 || b.rank() != 2 || a.shape()[0] != b.shape()[0] {
        return Err(Error::ShapeMismatch {
            op: "fit_mine",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let n = a.shape()[0];
    if cfg.batch_size < 2 || n < cfg.batch_size {
        return Err(invalid(format!(
            "fit_mine batch size {} must be in [2, {n}]",
            cfg.batch_size
        )));
    }
    let (da, db) = (a.shape()[1], b.shape()[1]);
    let mut est = MiEstimator::new(da, db, cfg.hidden, cfg.seed)?;
    let mut opt = crate::numcore::Sgd::new(cfg.lr, cfg.momentum)?;
    let mut rng = rng::seeded(rng::derive_seed(cfg.seed, &[1]));
    let mut order: Vec<usize> = (0..n).collect();
    for _ in 0..cfg.steps {
        order.shuffle(&mut rng);
        let rows = &order[..cfg.batch_size];
        let mut marg_rows = rows.to_vec();
        marg_rows.shuffle(&mut rng);
        let tape = Tape::new();
        let bound = tape.bind(&est.params, true)?;
        let ja = tape.constant(gather_rows(a, rows, da))?;
        let jb = tape.constant(gather_rows(b, rows, db))?;
        let mb = tape.constant(gather_rows(b, &marg_rows, db))?;
        let bound_value = est.dv_bound(&bound, (ja, jb), (ja, mb))?;
        let loss = bound_value.scale(-1.0);
        let grads = tape.backward(loss)?.for_params(&bound);
        opt.step(&mut est.params, &grads, crate::numcore::Direction::Descend)?;
    }
    Ok(est)
}
