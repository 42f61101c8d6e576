use rand::Rng;

use super::checkpoint::{Checkpoint, OptimizerState};
use super::config::ModelConfig;
use super::elbo::{elbo_batch, stage2_batch, ElboBreakdown, ImageNoise, Objective, Schedule, Stage2Breakdown};
use super::params::Params;
use crate::error::{Error, Result};
use crate::scenegen::{Dataset, Split};
use crate::stochastic::{derive_seed, gumbel_temperature, likelihood_sigma, NoiseSource};
use crate::tensor::optim::Adam;
use crate::tensor::{Graph, Tensor};

/// Images `[3, N, N]` for training and the fixed validation batch.
pub struct TrainData {
    pub train: Vec<Tensor<f32>>,
    pub validation: Vec<Tensor<f32>>,
}

impl TrainData {
    /// Training split, plus the first `validation_size` evaluation images
    /// (training images when there is no evaluation split).
    pub fn from_dataset(ds: &Dataset, validation_size: usize) -> Result<Self> {
        let load = |indices: &[usize]| -> Result<Vec<Tensor<f32>>> {
            indices
                .iter()
                .map(|&i| {
                    let img = ds.image(i)?;
                    let n = ds.manifest.image_size;
                    Tensor::new(vec![3, n, n], img.iter().map(|v| *v as f32).collect())
                })
                .collect()
        };
        let train_idx = ds.indices(Split::Train);
        let mut eval_idx = ds.indices(Split::Eval);
        if eval_idx.is_empty() {
            eval_idx = train_idx.clone();
        }
        eval_idx.truncate(validation_size);
        Ok(TrainData {
            train: load(&train_idx)?,
            validation: load(&eval_idx)?,
        })
    }
}

/// Per-step record handed to a [`TrainObserver`].
#[derive(Clone, Debug, PartialEq)]
pub struct StepLog {
    pub stage: u8,
    /// Zero-based index of the update this batch produced.
    pub step: u64,
    pub epoch: u64,
    pub sigma: f64,
    pub gumbel_tau: f64,
    /// Stage 1: [`ElboBreakdown::values`]; stage 2: [`Stage2Breakdown::values`].
    pub parts: Vec<f64>,
}

impl StepLog {
    pub fn columns(stage: u8) -> &'static [&'static str] {
        if stage == 1 {
            &ElboBreakdown::FIELDS
        } else {
            &Stage2Breakdown::FIELDS
        }
    }
}

pub trait TrainObserver {
    fn on_step(&mut self, _log: &StepLog) -> Result<()> {
        Ok(())
    }

    /// Validation loss with the parameters after `step` updates.
    fn on_validation(&mut self, _stage: u8, _step: u64, _loss: f64) -> Result<()> {
        Ok(())
    }

    fn on_checkpoint(&mut self, _ckpt: &Checkpoint) -> Result<()> {
        Ok(())
    }
}

impl TrainObserver for () {}

/// Zero-based epoch reached after `step` updates of `batch` images.
pub fn epoch_at(step: u64, batch: usize, train_size: usize) -> u64 {
    step * batch as u64 / train_size.max(1) as u64
}

pub fn schedule_at(epoch: u64) -> Schedule {
    Schedule {
        sigma: likelihood_sigma(epoch + 1),
        gumbel_tau: gumbel_temperature(epoch),
    }
}

fn with_step(stage: u8, step: u64, e: Error) -> Error {
    match e {
        Error::NonFinite(msg) => Error::NonFinite(format!("stage {stage} step {step}: {msg}")),
        other => other,
    }
}

fn draw_noise(cfg: &ModelConfig, noise: &mut NoiseSource, count: usize) -> Vec<ImageNoise<f32>> {
    (0..count).map(|_| ImageNoise::draw(cfg, noise)).collect()
}

/// Batch loss (negative ELBO in stage 1) and its parts. With `grads` the
/// gradients of the loss for the stage's trainable parameters are returned.
fn batch_loss(
    params: &Params<f32>,
    cfg: &ModelConfig,
    stage: u8,
    images: &[&Tensor<f32>],
    noise: &[ImageNoise<f32>],
    sched: Schedule,
    grads: bool,
) -> Result<(f64, Vec<f64>, Vec<Vec<f32>>)> {
    let mut g = Graph::new();
    let p = params.bind(&mut g, |grp| grads && grp.stage() == stage);
    let xs: Vec<_> = images.iter().map(|t| g.constant((*t).clone())).collect();
    let (loss_value, parts, loss) = if stage == 1 {
        let (b, total) = elbo_batch(&mut g, &p, cfg, &xs, noise, sched, Objective::Stage1)?;
        let loss = g.scale(total, -1.0);
        (-b.total, b.values().to_vec(), loss)
    } else {
        let (b, loss) = stage2_batch(&mut g, &p, cfg, &xs, noise)?;
        (b.total, b.values().to_vec(), loss)
    };
    if !loss_value.is_finite() {
        return Err(Error::NonFinite(format!("loss ({loss_value})")));
    }
    if !grads {
        return Ok((loss_value, parts, Vec::new()));
    }
    g.backward(loss)?;
    let mut out = Vec::new();
    for (spec, &v) in params.specs().iter().zip(&p.vars) {
        if spec.group.stage() == stage {
            let grad = g.grad(v).map(<[f32]>::to_vec).unwrap_or_else(|| vec![0.0; spec.numel()]);
            if grad.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of {}", spec.name)));
            }
            out.push(grad);
        }
    }
    Ok((loss_value, parts, out))
}

/// Loss on the fixed validation batch: same noise every call, schedule of
/// the first epoch.
pub fn validation_loss(ckpt: &Checkpoint, data: &TrainData, stage: u8) -> Result<f64> {
    if data.validation.is_empty() {
        return Err(Error::InvalidArgument("empty validation set".into()));
    }
    let mut noise = NoiseSource::new(derive_seed(ckpt.train.seed, &[stage as u64, u64::MAX]));
    let images: Vec<&Tensor<f32>> = data.validation.iter().collect();
    let n = draw_noise(&ckpt.model, &mut noise, images.len());
    let (loss, _, _) = batch_loss(&ckpt.params, &ckpt.model, stage, &images, &n, schedule_at(0), false)?;
    Ok(loss)
}

/// Runs `stage` (1 or 2) from the checkpoint's progress up to the configured
/// step count. Every batch and noise draw derives from `(seed, stage, step)`,
/// so an interrupted run resumed from a checkpoint continues identically.
pub fn train_stage(
    ckpt: &mut Checkpoint,
    data: &TrainData,
    stage: u8,
    observer: &mut dyn TrainObserver,
) -> Result<()> {
    if stage != 1 && stage != 2 {
        return Err(Error::InvalidArgument(format!("no training stage {stage}")));
    }
    if data.train.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    ckpt.model.validate()?;
    ckpt.train.validate()?;
    let n = ckpt.model.image_size;
    if data.train.iter().chain(&data.validation).any(|t| t.shape() != [3, n, n]) {
        return Err(Error::Config(format!("the model expects {n}x{n} RGB images")));
    }
    if stage == 2 && ckpt.progress.stage1_steps == 0 {
        return Err(Error::Config("stage 2 needs stage-1 parameters".into()));
    }
    if stage == 2 && !ckpt.model.hyperprior {
        return Err(Error::Config("stage 2 trains the hyperprior, which is disabled".into()));
    }
    let tc = ckpt.train.clone();
    let (done, target) = if stage == 1 {
        (ckpt.progress.stage1_steps, tc.stage1_steps)
    } else {
        (ckpt.progress.stage2_steps, tc.stage2_steps)
    };
    if done >= target {
        return Ok(());
    }
    let sizes: Vec<usize> = ckpt
        .params
        .specs()
        .iter()
        .filter(|s| s.group.stage() == stage)
        .map(|s| s.numel())
        .collect();
    let mut adam = match ckpt.optimizer.take() {
        Some(o) if o.stage == stage && done > 0 => o.adam,
        _ => Adam::new(tc.adam, sizes),
    };
    let slots: Vec<usize> = (0..ckpt.params.len())
        .filter(|&i| ckpt.params.specs()[i].group.stage() == stage)
        .collect();
    let validate = |ckpt: &Checkpoint, step: u64, obs: &mut dyn TrainObserver| -> Result<()> {
        let loss = validation_loss(ckpt, data, stage).map_err(|e| with_step(stage, step, e))?;
        obs.on_validation(stage, step, loss)
    };
    if done == 0 {
        validate(ckpt, 0, observer)?;
    }
    for step in done..target {
        let epoch = epoch_at(step, tc.batch_size, data.train.len());
        let sched = schedule_at(epoch);
        let mut noise = NoiseSource::new(derive_seed(tc.seed, &[stage as u64, step]));
        let images: Vec<&Tensor<f32>> = (0..tc.batch_size)
            .map(|_| &data.train[noise.rng().random_range(0..data.train.len())])
            .collect();
        let batch_noise = draw_noise(&ckpt.model, &mut noise, images.len());
        let (_, parts, grads) = batch_loss(&ckpt.params, &ckpt.model, stage, &images, &batch_noise, sched, true)
            .map_err(|e| with_step(stage, step, e))?;
        observer.on_step(&StepLog {
            stage,
            step,
            epoch,
            sigma: sched.sigma,
            gumbel_tau: sched.gumbel_tau,
            parts,
        })?;
        adam.begin_step();
        for (k, (&i, grad)) in slots.iter().zip(&grads).enumerate() {
            adam.update(k, ckpt.params.values_mut()[i].data_mut(), grad)?;
        }
        let completed = step + 1;
        if stage == 1 {
            ckpt.progress.stage1_steps = completed;
        } else {
            ckpt.progress.stage2_steps = completed;
        }
        let last = completed == target;
        if last || (tc.validate_every > 0 && completed % tc.validate_every == 0) {
            validate(ckpt, completed, observer)?;
        }
        if !last && tc.checkpoint_every > 0 && completed % tc.checkpoint_every == 0 {
            ckpt.optimizer = Some(OptimizerState { stage, adam: adam.clone() });
            observer.on_checkpoint(ckpt)?;
        }
    }
    ckpt.optimizer = Some(OptimizerState { stage, adam });
    observer.on_checkpoint(ckpt)
}
