//! Latent distributions: diagonal Gaussians, relaxed Bernoulli presences,
//! KL divergences and the priors used by the model.

use candle_core::{DType, Device, Tensor, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const LOG_STD_MIN: f64 = -10.0;
pub const LOG_STD_MAX: f64 = 2.0;
/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` before logs.
pub const PROB_EPS: f64 = 1e-6;
pub const DEFAULT_TEMPERATURE: f64 = 0.5;

/// Batched diagonal Gaussian; `mean` and `log_std` are `[N, d]`.
#[derive(Debug, Clone)]
pub struct DiagonalGaussian {
    pub mean: Tensor,
    pub log_std: Tensor,
}

impl DiagonalGaussian {
    /// Builds the distribution, clamping `log_std` into `[-10, 2]`.
    pub fn new(mean: Tensor, log_std: Tensor) -> Result<Self> {
        if mean.dims() != log_std.dims() {
            return Err(Error::Shape(format!("mean {:?} vs log_std {:?}", mean.dims(), log_std.dims())));
        }
        let log_std = log_std.clamp(LOG_STD_MIN, LOG_STD_MAX)?;
        Ok(DiagonalGaussian { mean, log_std })
    }

    /// Splits `[N, 2d]` network output into mean and log-std halves.
    pub fn from_params(params: &Tensor) -> Result<Self> {
        let d = params.dim(D::Minus1)? / 2;
        DiagonalGaussian::new(params.narrow(D::Minus1, 0, d)?, params.narrow(D::Minus1, d, d)?)
    }

    /// Distribution with the same fixed parameters for every row.
    pub fn constant(n: usize, mean: &[f64], std: &[f64], dtype: DType, device: &Device) -> Result<Self> {
        let d = mean.len();
        let m = Tensor::from_vec(mean.to_vec(), (1, d), device)?.to_dtype(dtype)?;
        let s: Vec<f64> = std.iter().map(|s| s.ln()).collect();
        let s = Tensor::from_vec(s, (1, d), device)?.to_dtype(dtype)?;
        DiagonalGaussian::new(m.broadcast_as((n, d))?.contiguous()?, s.broadcast_as((n, d))?.contiguous()?)
    }

    pub fn standard(n: usize, d: usize, dtype: DType, device: &Device) -> Result<Self> {
        DiagonalGaussian::constant(n, &vec![0.0; d], &vec![1.0; d], dtype, device)
    }

    pub fn dim(&self) -> Result<usize> {
        Ok(self.mean.dim(D::Minus1)?)
    }

    pub fn std(&self) -> Result<Tensor> {
        Ok(self.log_std.exp()?)
    }

    /// Reparameterised sample `mean + std · noise`.
    pub fn sample(&self, noise: &Tensor) -> Result<Tensor> {
        if noise.dims() != self.mean.dims() {
            return Err(Error::Shape(format!("noise {:?} vs mean {:?}", noise.dims(), self.mean.dims())));
        }
        Ok((&self.mean + self.std()?.mul(noise)?)?)
    }

    /// Rows `start..start + len`.
    pub fn rows(&self, start: usize, len: usize) -> Result<Self> {
        Ok(DiagonalGaussian { mean: self.mean.narrow(0, start, len)?, log_std: self.log_std.narrow(0, start, len)? })
    }
}

/// `KL(q ‖ p)` summed over the last dimension, `[N]`.
pub fn kl_gaussian_exclusive(q: &DiagonalGaussian, p: &DiagonalGaussian) -> Result<Tensor> {
    if q.mean.dims() != p.mean.dims() {
        return Err(Error::Shape(format!("q {:?} vs p {:?}", q.mean.dims(), p.mean.dims())));
    }
    let var_q = (&q.log_std * 2.0)?.exp()?;
    let var_p = (&p.log_std * 2.0)?.exp()?;
    let diff2 = (&q.mean - &p.mean)?.sqr()?;
    let ratio = ((var_q + diff2)? / (var_p * 2.0)?)?;
    let kl = ((&p.log_std - &q.log_std)? + ratio)?.affine(1.0, -0.5)?;
    Ok(kl.sum(D::Minus1)?)
}

/// `KL(p ‖ q)`: the prior is the first argument.
pub fn kl_gaussian_inclusive(q: &DiagonalGaussian, p: &DiagonalGaussian) -> Result<Tensor> {
    kl_gaussian_exclusive(p, q)
}

/// Elementwise Bernoulli `KL(q ‖ p)` for success probabilities.
pub fn kl_bernoulli(q_prob: &Tensor, p_prob: &Tensor) -> Result<Tensor> {
    let q = q_prob.clamp(PROB_EPS, 1.0 - PROB_EPS)?;
    let p = p_prob.clamp(PROB_EPS, 1.0 - PROB_EPS)?;
    let one_q = q.neg()?.affine(1.0, 1.0)?;
    let one_p = p.neg()?.affine(1.0, 1.0)?;
    let a = (&q * (q.log()? - p.log()?)?)?;
    let b = (&one_q * (one_q.log()? - one_p.log()?)?)?;
    Ok((a + b)?)
}

/// Presence variable relaxed with the binary Gumbel-Softmax trick.
#[derive(Debug, Clone)]
pub struct RelaxedBernoulli {
    pub logit: Tensor,
    pub temperature: f64,
}

impl RelaxedBernoulli {
    pub fn new(logit: Tensor, temperature: f64) -> Result<Self> {
        if temperature <= 0.0 {
            return Err(Error::precondition(format!("temperature must be positive, got {temperature}")));
        }
        Ok(RelaxedBernoulli { logit, temperature })
    }

    /// Logit of a success probability, clamped away from 0 and 1.
    pub fn from_prob(prob: &Tensor, temperature: f64) -> Result<Self> {
        let p = prob.clamp(PROB_EPS, 1.0 - PROB_EPS)?;
        let logit = (p.log()? - p.neg()?.affine(1.0, 1.0)?.log()?)?;
        RelaxedBernoulli::new(logit, temperature)
    }

    pub fn prob(&self) -> Result<Tensor> {
        Ok(candle_nn::ops::sigmoid(&self.logit)?)
    }

    /// `sigmoid((logit + log u - log(1-u)) / τ)`; with `hard` the forward value
    /// is thresholded at 0.5 while gradients follow the relaxed sample.
    pub fn sample(&self, uniform: &Tensor, hard: bool) -> Result<Tensor> {
        let u = uniform.clamp(PROB_EPS, 1.0 - PROB_EPS)?;
        let noise = (u.log()? - u.neg()?.affine(1.0, 1.0)?.log()?)?;
        let y = candle_nn::ops::sigmoid(&((&self.logit + noise)? / self.temperature)?)?;
        if !hard {
            return Ok(y);
        }
        let hard = y.ge(0.5)?.to_dtype(y.dtype())?;
        Ok(((hard - y.detach())? + &y)?)
    }
}

/// Scalar helper: `sigmoid((logit + log u - log(1-u)) / τ)`.
pub fn sample_bernoulli_gumbel(logit: f64, temperature: f64, u: f64) -> f64 {
    let u = u.clamp(PROB_EPS, 1.0 - PROB_EPS);
    let z = (logit + u.ln() - (1.0 - u).ln()) / temperature;
    1.0 / (1.0 + (-z).exp())
}

/// Parameters of the fixed and scheduled priors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PriorSet {
    pub what_std: f64,
    pub bg_std: f64,
    /// Box scale encoded by the discovery z_where prior mean.
    pub where_scale: f64,
    /// Std of the discovery z_where prior in transformed space.
    pub where_std: f64,
    /// Std of the prior on propagated pose updates.
    pub propagation_where_std: f64,
    pub pres_discovery_start: f64,
    pub pres_discovery_end: f64,
    pub pres_anneal_iterations: usize,
    pub pres_propagation_target: f64,
    /// Weight of the target in the propagated presence prior.
    pub pres_propagation_smoothing: f64,
}

impl Default for PriorSet {
    fn default() -> Self {
        PriorSet {
            what_std: 1.0,
            bg_std: 1.0,
            where_scale: 0.25,
            where_std: 0.5,
            propagation_where_std: 0.1,
            pres_discovery_start: 0.1,
            pres_discovery_end: 0.01,
            pres_anneal_iterations: 10_000,
            pres_propagation_target: 0.99,
            pres_propagation_smoothing: 0.5,
        }
    }
}

impl PriorSet {
    pub fn validate(&self) -> Result<()> {
        let probs = [
            self.pres_discovery_start,
            self.pres_discovery_end,
            self.pres_propagation_target,
        ];
        if probs.iter().any(|p| !(*p > 0.0 && *p < 1.0)) {
            return Err(Error::Config(format!("prior probabilities must lie in (0, 1): {probs:?}")));
        }
        if !(0.0..=1.0).contains(&self.pres_propagation_smoothing) {
            return Err(Error::Config("pres_propagation_smoothing must lie in [0, 1]".into()));
        }
        let stds = [self.what_std, self.bg_std, self.where_std, self.propagation_where_std];
        if stds.iter().any(|s| !(*s > 0.0)) || !(self.where_scale > 0.0 && self.where_scale < 1.0) {
            return Err(Error::Config("prior deviations must be positive and where_scale in (0, 1)".into()));
        }
        Ok(())
    }

    /// Discovery presence prior, annealed linearly over training.
    pub fn discovery_pres_prob(&self, iteration: usize) -> f64 {
        if self.pres_anneal_iterations == 0 {
            return self.pres_discovery_end;
        }
        let f = (iteration as f64 / self.pres_anneal_iterations as f64).min(1.0);
        self.pres_discovery_start + f * (self.pres_discovery_end - self.pres_discovery_start)
    }

    /// Propagated presence prior: the previous presence blended toward the target.
    pub fn propagation_pres_prob(&self, prev_pres: &Tensor) -> Result<Tensor> {
        let w = self.pres_propagation_smoothing;
        Ok(prev_pres.affine(1.0 - w, w * self.pres_propagation_target)?)
    }
}

/// Seeded noise stream. Every stochastic choice in the model draws from one
/// of these so runs are reproducible.
#[derive(Debug, Clone)]
pub struct NoiseSource {
    rng: ChaCha8Rng,
}

impl NoiseSource {
    pub fn new(seed: u64) -> Self {
        NoiseSource { rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn from_rng(rng: ChaCha8Rng) -> Self {
        NoiseSource { rng }
    }

    pub fn normal(&mut self, shape: &[usize], dtype: DType, device: &Device) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let v: Vec<f64> = (0..n).map(|_| self.rng.sample(StandardNormal)).collect();
        Ok(Tensor::from_vec(v, shape, device)?.to_dtype(dtype)?)
    }

    /// Uniform draws in the open interval `(0, 1)`.
    pub fn uniform(&mut self, shape: &[usize], dtype: DType, device: &Device) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let v: Vec<f64> = (0..n)
            .map(|_| {
                let u: f64 = self.rng.random();
                u.clamp(f64::EPSILON, 1.0 - f64::EPSILON)
            })
            .collect();
        Ok(Tensor::from_vec(v, shape, device)?.to_dtype(dtype)?)
    }
}
