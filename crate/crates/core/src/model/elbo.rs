use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::nets::{
    decode_background, decode_object, encode_background, encode_object, encode_positions, encode_scene,
    expected_coords, object_prior, position_prior,
};
use super::params::Bound;
use crate::compositor::{composite_soft, place, ObjectCanvas, PlacedObject};
use crate::error::{Error, Result};
use crate::stochastic::{
    aggregated_position_l1, alpha_entropy_regularizer, gaussian_log_likelihood, gaussian_nll, kl_gaussian,
    kl_gaussian_std, position_probabilities, sample_gaussian, sample_position, DiagGaussian, NoiseSource,
    PositionDistribution,
};
use crate::tensor::{Graph, ReduceOp, Real, Tensor, UnaryOp, Var};

/// Batch-mean ELBO terms. `total = recon_loglik - beta_obj*kl_obj -
/// beta_bg*kl_z_bg - kl_y_weight*kl_y - lambda_pos*l1_position -
/// lambda_alpha*alpha_reg`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ElboBreakdown {
    pub recon_loglik: f64,
    pub kl_y: f64,
    pub kl_z_bg: f64,
    pub kl_obj: f64,
    pub l1_position: f64,
    pub alpha_reg: f64,
    pub total: f64,
}

impl ElboBreakdown {
    pub const FIELDS: [&'static str; 7] = [
        "recon_loglik",
        "kl_y",
        "kl_z_bg",
        "kl_obj",
        "l1_position",
        "alpha_reg",
        "total",
    ];

    pub fn weighted_total(&self, cfg: &ModelConfig) -> f64 {
        self.recon_loglik
            - cfg.beta_obj * self.kl_obj
            - cfg.beta_bg * self.kl_z_bg
            - cfg.kl_y_weight * self.kl_y
            - cfg.lambda_pos * self.l1_position
            - cfg.lambda_alpha * self.alpha_reg
    }

    pub fn values(&self) -> [f64; 7] {
        [
            self.recon_loglik,
            self.kl_y,
            self.kl_z_bg,
            self.kl_obj,
            self.l1_position,
            self.alpha_reg,
            self.total,
        ]
    }
}

/// Batch-mean stage-2 terms. `total = position_ce + object_nll +
/// kl_y_weight*kl_y` (a loss, lower is better).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Stage2Breakdown {
    pub position_ce: f64,
    pub object_nll: f64,
    pub kl_y: f64,
    pub total: f64,
}

impl Stage2Breakdown {
    pub const FIELDS: [&'static str; 4] = ["position_ce", "object_nll", "kl_y", "total"];

    pub fn values(&self) -> [f64; 4] {
        [self.position_ce, self.object_nll, self.kl_y, self.total]
    }
}

/// Which priors the ELBO uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Objective {
    /// Standard-normal priors on `z_j`, `d_j`, `z_bg`; uniform positions.
    Stage1,
    /// Priors from the hyperprior networks given `y ~ Q(y | ...)`; the
    /// position term compares aggregated posterior and aggregated prior.
    Full,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub sigma: f64,
    pub gumbel_tau: f64,
}

/// Noise for one image, drawn in a fixed order.
pub struct ImageNoise<T> {
    pub gumbel: Vec<Vec<T>>,
    pub object: Vec<Vec<T>>,
    pub background: Vec<T>,
    pub scene: Vec<T>,
}

impl<T: Real> ImageNoise<T> {
    pub fn draw(cfg: &ModelConfig, noise: &mut NoiseSource) -> Self {
        let cells = cfg.image_size * cfg.image_size;
        let gumbel = (0..cfg.slots).map(|_| noise.gumbel(cells)).collect();
        let object = (0..cfg.slots).map(|_| noise.normal(cfg.object_dim + 1)).collect();
        let background = noise.normal(cfg.background_dim);
        let scene = noise.normal(cfg.scene_dim);
        ImageNoise {
            gumbel,
            object,
            background,
            scene,
        }
    }
}

fn sum_vars<T: Real>(g: &mut Graph<T>, xs: &[Var]) -> Result<Var> {
    let mut acc = xs[0];
    for &x in &xs[1..] {
        acc = g.add(acc, x)?;
    }
    Ok(acc)
}

/// Per-slot logit maps `[N, N]` from the position encoder output.
pub(crate) fn slot_logits<T: Real>(g: &mut Graph<T>, cfg: &ModelConfig, logits: Var) -> Result<Vec<Var>> {
    let n = cfg.image_size;
    (0..cfg.slots)
        .map(|j| {
            let s = g.slice(logits, 0, j, 1)?;
            g.reshape(s, &[n, n])
        })
        .collect()
}

/// L1 distance between the mean of `posteriors` and the mean of `priors`.
fn aggregated_l1_between<T: Real>(g: &mut Graph<T>, posteriors: &[Var], priors: &[Var]) -> Result<Var> {
    let mean_of = |g: &mut Graph<T>, maps: &[Var]| -> Result<Var> {
        let cells = g.value(maps[0]).len();
        let stacked = g.concat(maps, 0)?;
        let flat = g.reshape(stacked, &[maps.len(), cells])?;
        g.reduce(ReduceOp::Mean, flat, &[0])
    };
    let a = mean_of(g, posteriors)?;
    let b = mean_of(g, priors)?;
    let d = g.sub(a, b)?;
    let abs = g.unary(UnaryOp::Abs, d)?;
    Ok(g.sum_all(abs))
}

struct ImageTerms {
    recon: Var,
    kl_obj: Var,
    kl_bg: Var,
    kl_y: Option<Var>,
    alpha_reg: Var,
    posteriors: Vec<Var>,
    priors: Vec<Var>,
}

#[allow(clippy::too_many_arguments)]
fn image_terms<T: Real>(
    g: &mut Graph<T>,
    p: &Bound,
    cfg: &ModelConfig,
    x: Var,
    noise: &ImageNoise<T>,
    sched: Schedule,
    objective: Objective,
) -> Result<ImageTerms> {
    let d_obj = cfg.object_dim + 1;
    let logits = encode_positions(g, p, cfg, x)?;
    let slots = slot_logits(g, cfg, logits)?;
    let mut posteriors = Vec::with_capacity(cfg.slots);
    let mut placed = Vec::with_capacity(cfg.slots);
    let mut q_objects = Vec::with_capacity(cfg.slots);
    let mut thetas = Vec::with_capacity(cfg.slots);
    let mut alpha_regs = Vec::with_capacity(cfg.slots);
    for (j, &l) in slots.iter().enumerate() {
        posteriors.push(position_probabilities(g, l)?);
        let dist = PositionDistribution {
            logits: l,
            temperature: sched.gumbel_tau,
        };
        let theta = sample_position(g, &dist, &noise.gumbel[j])?;
        let enc = encode_object(g, p, cfg, x, theta)?;
        let q = DiagGaussian::from_flat(g, enc, d_obj)?;
        let s = sample_gaussian(g, &q, &noise.object[j])?;
        let z = g.slice(s, 0, 0, cfg.object_dim)?;
        let dl = g.slice(s, 0, cfg.object_dim, 1)?;
        let depth = g.sigmoid(dl);
        let canvas: ObjectCanvas = decode_object(g, p, cfg, z)?;
        alpha_regs.push(alpha_entropy_regularizer(g, canvas.alpha)?);
        let (pixels, alpha) = place(g, &canvas, theta)?;
        placed.push(PlacedObject { pixels, alpha, depth });
        q_objects.push(q);
        thetas.push(theta);
    }
    let enc_bg = encode_background(g, p, cfg, x)?;
    let q_bg = DiagGaussian::from_flat(g, enc_bg, cfg.background_dim)?;
    let z_bg = sample_gaussian(g, &q_bg, &noise.background)?;
    let bg = decode_background(g, p, cfg, z_bg)?;
    let xhat = composite_soft(g, bg, &placed, cfg.tau_depth)?;
    let recon = gaussian_log_likelihood(g, x, xhat, sched.sigma)?;
    let kl_bg = kl_gaussian_std(g, &q_bg)?;
    let alpha_reg = sum_vars(g, &alpha_regs)?;

    let (kl_obj, kl_y, priors) = match objective {
        Objective::Stage1 => {
            let kls = q_objects
                .iter()
                .map(|q| kl_gaussian_std(g, q))
                .collect::<Result<Vec<_>>>()?;
            (sum_vars(g, &kls)?, None, Vec::new())
        }
        Objective::Full => {
            let mut summaries = Vec::with_capacity(cfg.slots);
            let mut post_coords = Vec::with_capacity(cfg.slots);
            let mut sample_coords = Vec::with_capacity(cfg.slots);
            for j in 0..cfg.slots {
                summaries.push(g.reshape(q_objects[j].mean, &[1, d_obj])?);
                post_coords.push(expected_coords(g, posteriors[j])?);
                sample_coords.push(expected_coords(g, thetas[j])?);
            }
            let enc_y = encode_scene(g, p, &summaries, &post_coords)?;
            let q_y = DiagGaussian::from_flat(g, enc_y, cfg.scene_dim)?;
            let y = sample_gaussian(g, &q_y, &noise.scene)?;
            let kl_y = kl_gaussian_std(g, &q_y)?;
            let prior_params = object_prior(g, p, cfg, y, &sample_coords)?;
            let mut kls = Vec::with_capacity(cfg.slots);
            for (q, pp) in q_objects.iter().zip(prior_params) {
                let prior = DiagGaussian::from_flat(g, pp, d_obj)?;
                kls.push(kl_gaussian(g, q, &prior)?);
            }
            let prior_logits = position_prior(g, p, cfg, y)?;
            let prior_slots = slot_logits(g, cfg, prior_logits)?;
            let priors = prior_slots
                .into_iter()
                .map(|l| position_probabilities(g, l))
                .collect::<Result<Vec<_>>>()?;
            (sum_vars(g, &kls)?, Some(kl_y), priors)
        }
    };
    Ok(ImageTerms {
        recon,
        kl_obj,
        kl_bg,
        kl_y,
        alpha_reg,
        posteriors,
        priors,
    })
}

/// The ELBO over a batch of images `[3, N, N]` already on `g`. Returns the
/// batch-mean breakdown and the graph node holding `total`.
pub fn elbo_batch<T: Real>(
    g: &mut Graph<T>,
    p: &Bound,
    cfg: &ModelConfig,
    images: &[Var],
    noise: &[ImageNoise<T>],
    sched: Schedule,
    objective: Objective,
) -> Result<(ElboBreakdown, Var)> {
    if images.is_empty() || images.len() != noise.len() {
        return Err(Error::InvalidArgument(format!(
            "{} images with {} noise draws",
            images.len(),
            noise.len()
        )));
    }
    let terms = images
        .iter()
        .zip(noise)
        .map(|(&x, n)| image_terms(g, p, cfg, x, n, sched, objective))
        .collect::<Result<Vec<_>>>()?;
    let inv = 1.0 / images.len() as f64;
    let mean_of = |g: &mut Graph<T>, f: &dyn Fn(&ImageTerms) -> Var| -> Result<Var> {
        let xs: Vec<Var> = terms.iter().map(f).collect();
        let s = sum_vars(g, &xs)?;
        Ok(g.scale(s, inv))
    };
    let recon = mean_of(g, &|t| t.recon)?;
    let kl_obj = mean_of(g, &|t| t.kl_obj)?;
    let kl_bg = mean_of(g, &|t| t.kl_bg)?;
    let alpha_reg = mean_of(g, &|t| t.alpha_reg)?;
    let kl_y = match objective {
        Objective::Stage1 => None,
        Objective::Full => Some(mean_of(g, &|t| t.kl_y.expect("full objective computes kl_y"))?),
    };
    let posteriors: Vec<Var> = terms.iter().flat_map(|t| t.posteriors.iter().copied()).collect();
    let l1 = match objective {
        Objective::Stage1 => aggregated_position_l1(g, &posteriors)?,
        Objective::Full => {
            let priors: Vec<Var> = terms.iter().flat_map(|t| t.priors.iter().copied()).collect();
            aggregated_l1_between(g, &posteriors, &priors)?
        }
    };

    let mut total = recon;
    let penalties = [
        (Some(kl_obj), cfg.beta_obj),
        (Some(kl_bg), cfg.beta_bg),
        (kl_y, cfg.kl_y_weight),
        (Some(l1), cfg.lambda_pos),
        (Some(alpha_reg), cfg.lambda_alpha),
    ];
    for (v, w) in penalties {
        if let Some(v) = v {
            if w != 0.0 {
                let s = g.scale(v, -w);
                total = g.add(total, s)?;
            }
        }
    }
    let mut b = ElboBreakdown {
        recon_loglik: g.scalar(recon),
        kl_y: kl_y.map_or(0.0, |v| g.scalar(v)),
        kl_z_bg: g.scalar(kl_bg),
        kl_obj: g.scalar(kl_obj),
        l1_position: g.scalar(l1),
        alpha_reg: g.scalar(alpha_reg),
        total: 0.0,
    };
    b.total = b.weighted_total(cfg);
    if !b.values().iter().all(|v| v.is_finite()) || !g.scalar(total).is_finite() {
        return Err(Error::NonFinite(format!("ELBO terms {b:?}")));
    }
    Ok((b, total))
}

/// Index of the largest element (first on ties).
pub(crate) fn argmax<T: Real>(xs: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in xs.iter().enumerate() {
        if *v > xs[best] {
            best = i;
        }
    }
    best
}

pub(crate) fn one_hot<T: Real>(n: usize, index: usize) -> Tensor<T> {
    Tensor::from_fn(vec![n, n], |i| if i == index { T::one() } else { T::zero() })
}

/// Stage-2 objective over a batch: the hyperprior networks are fitted to the
/// modes of the (frozen) stage-1 posteriors.
pub fn stage2_batch<T: Real>(
    g: &mut Graph<T>,
    p: &Bound,
    cfg: &ModelConfig,
    images: &[Var],
    noise: &[ImageNoise<T>],
) -> Result<(Stage2Breakdown, Var)> {
    if images.is_empty() || images.len() != noise.len() {
        return Err(Error::InvalidArgument(format!(
            "{} images with {} noise draws",
            images.len(),
            noise.len()
        )));
    }
    let n = cfg.image_size;
    let d_obj = cfg.object_dim + 1;
    let (mut ces, mut nlls, mut kls) = (Vec::new(), Vec::new(), Vec::new());
    for (&x, nz) in images.iter().zip(noise) {
        let logits = encode_positions(g, p, cfg, x)?;
        let slots = slot_logits(g, cfg, logits)?;
        let mut targets = Vec::with_capacity(cfg.slots);
        let mut modes = Vec::with_capacity(cfg.slots);
        let mut coords = Vec::with_capacity(cfg.slots);
        for &l in &slots {
            let t = argmax(g.value(l));
            let theta = g.constant(one_hot(n, t));
            let enc = encode_object(g, p, cfg, x, theta)?;
            let q = DiagGaussian::from_flat(g, enc, d_obj)?;
            let mode = g.tensor(q.mean).reshape(vec![1, d_obj])?;
            modes.push(g.constant(mode));
            let c = expected_coords(g, theta)?;
            coords.push(g.constant(g.tensor(c)));
            targets.push(t);
        }
        let enc_y = encode_scene(g, p, &modes, &coords)?;
        let q_y = DiagGaussian::from_flat(g, enc_y, cfg.scene_dim)?;
        let y = sample_gaussian(g, &q_y, &nz.scene)?;
        kls.push(kl_gaussian_std(g, &q_y)?);
        let prior_logits = position_prior(g, p, cfg, y)?;
        let prior_slots = slot_logits(g, cfg, prior_logits)?;
        for (l, &t) in prior_slots.into_iter().zip(&targets) {
            let flat = g.reshape(l, &[n * n])?;
            let lp = g.log_softmax(flat, 0)?;
            let pick = g.slice(lp, 0, t, 1)?;
            ces.push(g.scale(pick, -1.0));
        }
        let prior_params = object_prior(g, p, cfg, y, &coords)?;
        for (m, pp) in modes.iter().zip(prior_params) {
            let prior = DiagGaussian::from_flat(g, pp, d_obj)?;
            let m = g.reshape(*m, &[d_obj])?;
            nlls.push(gaussian_nll(g, m, &prior)?);
        }
    }
    let inv = 1.0 / images.len() as f64;
    let ce = sum_vars(g, &ces)?;
    let ce = g.scale(ce, inv);
    let nll = sum_vars(g, &nlls)?;
    let nll = g.scale(nll, inv);
    let kl = sum_vars(g, &kls)?;
    let kl = g.scale(kl, inv);
    let wkl = g.scale(kl, cfg.kl_y_weight);
    let loss = g.add(ce, nll)?;
    let loss = g.add(loss, wkl)?;
    let mut b = Stage2Breakdown {
        position_ce: g.scalar(ce),
        object_nll: g.scalar(nll),
        kl_y: g.scalar(kl),
        total: 0.0,
    };
    b.total = b.position_ce + b.object_nll + cfg.kl_y_weight * b.kl_y;
    if !b.values().iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite(format!("stage-2 terms {b:?}")));
    }
    Ok((b, loss))
}
