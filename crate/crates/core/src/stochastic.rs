//! Distributions, reparameterised sampling, divergence terms and the
//! training schedules for temperature and pixel noise.
//!
//! Randomness never originates here: every sampler takes its noise as an
//! argument, drawn by a seeded [`NoiseSource`].

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Open01, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::{BinaryOp, Graph, Real, Tensor, UnaryOp, Var};

/// Diagonal Gaussian parameterised by mean and log-variance.
#[derive(Clone, Copy, Debug)]
pub struct DiagGaussian {
    pub mean: Var,
    pub log_var: Var,
}

impl DiagGaussian {
    pub fn new<T: Real>(g: &Graph<T>, mean: Var, log_var: Var) -> Result<Self> {
        if g.shape(mean) != g.shape(log_var) {
            return Err(Error::ShapeMismatch {
                op: "diag_gaussian",
                left: g.shape(mean).to_vec(),
                right: g.shape(log_var).to_vec(),
            });
        }
        Ok(DiagGaussian { mean, log_var })
    }

    /// Splits a flat `[2 * dim]` (or `[1, 2 * dim]`) parameter vector into
    /// mean (first half) and log-variance (second half).
    pub fn from_flat<T: Real>(g: &mut Graph<T>, params: Var, dim: usize) -> Result<Self> {
        let flat = g.reshape(params, &[2 * dim])?;
        let mean = g.slice(flat, 0, 0, dim)?;
        let log_var = g.slice(flat, 0, dim, dim)?;
        Ok(DiagGaussian { mean, log_var })
    }

    pub fn dim<T: Real>(&self, g: &Graph<T>) -> usize {
        g.value(self.mean).len()
    }

    /// Restriction to the elements `start..start+len`.
    pub fn slice<T: Real>(&self, g: &mut Graph<T>, start: usize, len: usize) -> Result<Self> {
        Ok(DiagGaussian {
            mean: g.slice(self.mean, 0, start, len)?,
            log_var: g.slice(self.log_var, 0, start, len)?,
        })
    }
}

/// `mean + exp(log_var / 2) * noise`.
pub fn sample_gaussian<T: Real>(g: &mut Graph<T>, d: &DiagGaussian, noise: &[T]) -> Result<Var> {
    let shape = g.shape(d.mean).to_vec();
    if noise.len() != g.value(d.mean).len() {
        return Err(Error::ShapeMismatch {
            op: "sample_gaussian",
            left: shape,
            right: vec![noise.len()],
        });
    }
    let eps = g.constant(Tensor::new(shape, noise.to_vec())?);
    let half = g.scale(d.log_var, 0.5);
    let std = g.exp(half);
    let scaled = g.mul(std, eps)?;
    g.add(d.mean, scaled)
}

/// `KL(d || N(0, I)) = 1/2 sum(mean^2 + exp(log_var) - 1 - log_var)`.
pub fn kl_gaussian_std<T: Real>(g: &mut Graph<T>, d: &DiagGaussian) -> Result<Var> {
    let m2 = g.unary(UnaryOp::Square, d.mean)?;
    let var = g.exp(d.log_var);
    let a = g.add(m2, var)?;
    let b = g.sub(a, d.log_var)?;
    let c = g.shift(b, -1.0);
    let s = g.sum_all(c);
    Ok(g.scale(s, 0.5))
}

/// `KL(q || p)` between diagonal Gaussians of equal dimension.
pub fn kl_gaussian<T: Real>(g: &mut Graph<T>, q: &DiagGaussian, p: &DiagGaussian) -> Result<Var> {
    let diff = g.sub(q.mean, p.mean)?;
    let d2 = g.unary(UnaryOp::Square, diff)?;
    let vq = g.exp(q.log_var);
    let num = g.add(vq, d2)?;
    let vp = g.exp(p.log_var);
    let ratio = g.div(num, vp)?;
    let dlv = g.sub(p.log_var, q.log_var)?;
    let t = g.add(ratio, dlv)?;
    let t = g.shift(t, -1.0);
    let s = g.sum_all(t);
    Ok(g.scale(s, 0.5))
}

/// Negative log-density of `x` under `d`, summed over elements.
pub fn gaussian_nll<T: Real>(g: &mut Graph<T>, x: Var, d: &DiagGaussian) -> Result<Var> {
    let diff = g.sub(x, d.mean)?;
    let d2 = g.unary(UnaryOp::Square, diff)?;
    let var = g.exp(d.log_var);
    let q = g.div(d2, var)?;
    let t = g.add(q, d.log_var)?;
    let t = g.shift(t, (2.0 * PI).ln());
    let s = g.sum_all(t);
    Ok(g.scale(s, 0.5))
}

/// Categorical distribution over the `N x N` pixel grid, relaxed with
/// Gumbel-Softmax at `temperature`.
#[derive(Clone, Copy, Debug)]
pub struct PositionDistribution {
    pub logits: Var,
    pub temperature: f64,
}

/// Relaxed one-hot sample `softmax((logits + gumbel) / temperature)` over all
/// cells of the map.
pub fn sample_position<T: Real>(g: &mut Graph<T>, p: &PositionDistribution, gumbel: &[T]) -> Result<Var> {
    if !(p.temperature > 0.0) {
        return Err(Error::Domain {
            op: "sample_position",
            detail: format!("temperature {} must be positive", p.temperature),
        });
    }
    let shape = g.shape(p.logits).to_vec();
    let n = g.value(p.logits).len();
    if gumbel.len() != n {
        return Err(Error::ShapeMismatch {
            op: "sample_position",
            left: shape,
            right: vec![gumbel.len()],
        });
    }
    let flat = g.reshape(p.logits, &[n])?;
    let noise = g.constant(Tensor::new(vec![n], gumbel.to_vec())?);
    let perturbed = g.add(flat, noise)?;
    let scaled = g.scale(perturbed, 1.0 / p.temperature);
    let probs = g.softmax(scaled, 0)?;
    g.reshape(probs, &shape)
}

/// Exact (non-relaxed) categorical probabilities of a logit map.
pub fn position_probabilities<T: Real>(g: &mut Graph<T>, logits: Var) -> Result<Var> {
    let shape = g.shape(logits).to_vec();
    let n = g.value(logits).len();
    let flat = g.reshape(logits, &[n])?;
    let probs = g.softmax(flat, 0)?;
    g.reshape(probs, &shape)
}

/// Gumbel-Softmax temperature at (zero-based) epoch `i`: `0.3 * 2^(0.0001 i)`.
pub fn gumbel_temperature(epoch: u64) -> f64 {
    0.3 * 2f64.powf(1e-4 * epoch as f64)
}

/// Pixel noise standard deviation for the one-based epoch number:
/// `0.01/sqrt(3)` through epoch 150 and `0.01/sqrt(5)` afterwards.
pub fn likelihood_sigma(epoch: u64) -> f64 {
    if epoch <= 150 {
        0.01 / 3f64.sqrt()
    } else {
        0.01 / 5f64.sqrt()
    }
}

fn check_normalized<T: Real>(g: &Graph<T>, v: Var, what: &'static str) -> Result<()> {
    let sum: f64 = g.value(v).iter().map(|x| x.as_f64()).sum();
    if (sum - 1.0).abs() > 1e-3 {
        return Err(Error::NotNormalized { what, sum });
    }
    Ok(())
}

/// L1 distance between the average of `posteriors` (position probability
/// maps, one per object per image) and the uniform map.
pub fn aggregated_position_l1<T: Real>(g: &mut Graph<T>, posteriors: &[Var]) -> Result<Var> {
    let first = *posteriors
        .first()
        .ok_or_else(|| Error::InvalidArgument("no position posteriors".into()))?;
    let shape = g.shape(first).to_vec();
    let cells: usize = shape.iter().product();
    for &p in posteriors {
        check_normalized(g, p, "position posterior")?;
    }
    let stacked = g.concat(posteriors, 0)?;
    let flat = g.reshape(stacked, &[posteriors.len(), cells])?;
    let mean = g.reduce(crate::tensor::ReduceOp::Mean, flat, &[0])?;
    let centred = g.shift(mean, -1.0 / cells as f64);
    let abs = g.unary(UnaryOp::Abs, centred)?;
    Ok(g.sum_all(abs))
}

/// Summed Gaussian log-density of pixels `x` around `mean` with standard
/// deviation `sigma`.
pub fn gaussian_log_likelihood<T: Real>(g: &mut Graph<T>, x: Var, mean: Var, sigma: f64) -> Result<Var> {
    if !(sigma > 0.0) {
        return Err(Error::Domain {
            op: "gaussian_log_likelihood",
            detail: format!("sigma {sigma} must be positive"),
        });
    }
    let pixels = g.value(x).len() as f64;
    let diff = g.binary(BinaryOp::Sub, x, mean)?;
    let sq = g.unary(UnaryOp::Square, diff)?;
    let s = g.sum_all(sq);
    let scaled = g.scale(s, -0.5 / (sigma * sigma));
    Ok(g.shift(scaled, -0.5 * pixels * (2.0 * PI * sigma * sigma).ln()))
}

/// `sum(alpha * ln alpha)` with `0 ln 0 = 0`; non-positive, zero for binary
/// masks.
pub fn alpha_entropy_regularizer<T: Real>(g: &mut Graph<T>, alpha: Var) -> Result<Var> {
    let t = g.unary(UnaryOp::XLogX, alpha)?;
    Ok(g.sum_all(t))
}

/// Seeded generator of the standard noise the samplers consume.
pub struct NoiseSource {
    rng: ChaCha8Rng,
}

impl NoiseSource {
    pub fn new(seed: u64) -> Self {
        NoiseSource {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn normal<T: Real>(&mut self, n: usize) -> Vec<T> {
        (0..n)
            .map(|_| T::of(self.rng.sample::<f64, _>(StandardNormal)))
            .collect()
    }

    /// Standard Gumbel noise `-ln(-ln u)`, `u ~ U(0, 1)`.
    pub fn gumbel<T: Real>(&mut self, n: usize) -> Vec<T> {
        (0..n)
            .map(|_| {
                let u: f64 = self.rng.sample(Open01);
                T::of(-(-u.ln()).ln())
            })
            .collect()
    }

    pub fn uniform(&mut self) -> f64 {
        self.rng.random()
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }
}

/// Mixes a base seed with stream identifiers into an independent seed.
pub fn derive_seed(base: u64, stream: &[u64]) -> u64 {
    // splitmix64 finaliser over each word
    let mut h = base ^ 0x9E37_79B9_7F4A_7C15;
    for &s in stream {
        h = h.wrapping_add(s).wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = h;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}
