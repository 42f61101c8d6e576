use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::elbo::{argmax, one_hot, slot_logits};
use super::nets::{
    decode_background, decode_object, encode_background, encode_object, encode_positions, expected_coords,
    object_prior, position_prior,
};
use super::params::Params;
use crate::compositor::{composite_hard, place, PlacedObject};
use crate::error::{Error, Result};
use crate::metrics::{masks_from_alphas, modal_labels, Prediction};
use crate::stochastic::{derive_seed, DiagGaussian, NoiseSource};
use crate::tensor::{Graph, Real, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectLatent {
    pub z: Vec<f64>,
    pub depth_logit: f64,
    /// `(row, col)` of the one-hot position.
    pub position: [usize; 2],
}

impl ObjectLatent {
    pub fn depth(&self) -> f64 {
        1.0 / (1.0 + (-self.depth_logit).exp())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneLatents {
    /// Present when drawn from the hyperprior.
    pub y: Option<Vec<f64>>,
    pub z_bg: Vec<f64>,
    pub objects: Vec<ObjectLatent>,
}

/// Everything produced when latents are decoded and composited with hard
/// positions and hard depth ordering. Images are planar `[3, S, S]`, alphas
/// `[S * S]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Rendering {
    pub image: Vec<f64>,
    pub background: Vec<f64>,
    pub canvas_pixels: Vec<Vec<f64>>,
    pub canvas_alpha: Vec<Vec<f64>>,
    pub placed_pixels: Vec<Vec<f64>>,
    pub placed_alpha: Vec<Vec<f64>>,
    pub depths: Vec<f64>,
    /// Per pixel: nearest object whose placed alpha exceeds 0.3.
    pub labels: Vec<Option<usize>>,
}

impl Rendering {
    pub fn prediction(&self, size: usize) -> Prediction {
        let (modal, amodal) = masks_from_alphas(&self.placed_alpha, &self.depths, size);
        Prediction {
            modal,
            amodal,
            depths: self.depths.clone(),
            reconstruction: self.image.clone(),
        }
    }
}

fn to_f64<T: Real>(xs: &[T]) -> Vec<f64> {
    xs.iter().map(|v| v.as_f64()).collect()
}

fn tensor_of<T: Real>(shape: Vec<usize>, xs: &[f64]) -> Result<Tensor<T>> {
    Tensor::new(shape, xs.iter().map(|v| T::of(*v)).collect())
}

fn check_latents(cfg: &ModelConfig, l: &SceneLatents) -> Result<()> {
    let bad = l.z_bg.len() != cfg.background_dim
        || l.objects.len() > cfg.slots
        || l.objects.iter().any(|o| {
            o.z.len() != cfg.object_dim || o.position[0] >= cfg.image_size || o.position[1] >= cfg.image_size
        });
    if bad {
        return Err(Error::InvalidArgument(format!(
            "latents do not fit the model (z_bg {}, {} objects)",
            l.z_bg.len(),
            l.objects.len()
        )));
    }
    Ok(())
}

/// Decodes latents and composites them with hard positions and depth order.
/// With `hide_objects` every alpha is forced to zero.
pub fn render_latents<T: Real>(
    params: &Params<T>,
    cfg: &ModelConfig,
    latents: &SceneLatents,
    hide_objects: bool,
) -> Result<Rendering> {
    check_latents(cfg, latents)?;
    let n = cfg.image_size;
    let mut g = Graph::new();
    let p = params.bind(&mut g, |_| false);
    let mut placed = Vec::with_capacity(latents.objects.len());
    let mut canvas_pixels = Vec::new();
    let mut canvas_alpha = Vec::new();
    let mut placed_pixels = Vec::new();
    let mut placed_alpha = Vec::new();
    for o in &latents.objects {
        let z = g.constant(tensor_of(vec![cfg.object_dim], &o.z)?);
        let mut canvas = decode_object(&mut g, &p, cfg, z)?;
        if hide_objects {
            canvas.alpha = g.constant(Tensor::zeros(vec![cfg.canvas_size, cfg.canvas_size]));
        }
        let theta = g.constant(one_hot(n, o.position[0] * n + o.position[1]));
        let (pixels, alpha) = place(&mut g, &canvas, theta)?;
        let depth = g.constant(Tensor::scalar(T::of(o.depth())));
        placed.push(PlacedObject { pixels, alpha, depth });
        canvas_pixels.push(to_f64(g.value(canvas.pixels)));
        canvas_alpha.push(to_f64(g.value(canvas.alpha)));
        placed_pixels.push(to_f64(g.value(pixels)));
        placed_alpha.push(to_f64(g.value(alpha)));
    }
    let z_bg = g.constant(tensor_of(vec![cfg.background_dim], &latents.z_bg)?);
    let bg = decode_background(&mut g, &p, cfg, z_bg)?;
    let image = composite_hard(&mut g, bg, &placed)?;
    g.ensure_finite(image, "rendered image")?;
    let depths: Vec<f64> = placed.iter().map(|o| g.value(o.depth)[0].as_f64()).collect();
    let labels = modal_labels(&placed_alpha, &depths, n);
    Ok(Rendering {
        image: to_f64(g.value(image)),
        background: to_f64(g.value(bg)),
        canvas_pixels,
        canvas_alpha,
        placed_pixels,
        placed_alpha,
        depths,
        labels,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Decomposition {
    pub latents: SceneLatents,
    pub rendering: Rendering,
}

/// Posterior modes for an image `[3, N, N]` (argmax positions, Gaussian
/// means), then their hard rendering.
pub fn decompose<T: Real>(params: &Params<T>, cfg: &ModelConfig, image: &[f64]) -> Result<Decomposition> {
    let latents = posterior_modes(params, cfg, image)?;
    let rendering = render_latents(params, cfg, &latents, false)?;
    Ok(Decomposition { latents, rendering })
}

pub fn posterior_modes<T: Real>(params: &Params<T>, cfg: &ModelConfig, image: &[f64]) -> Result<SceneLatents> {
    let n = cfg.image_size;
    let mut g = Graph::new();
    let p = params.bind(&mut g, |_| false);
    let x = g.constant(tensor_of(vec![3, n, n], image)?);
    let logits = encode_positions(&mut g, &p, cfg, x)?;
    let slots = slot_logits(&mut g, cfg, logits)?;
    let mut objects = Vec::with_capacity(cfg.slots);
    for l in slots {
        let t = argmax(g.value(l));
        let theta = g.constant(one_hot(n, t));
        let enc = encode_object(&mut g, &p, cfg, x, theta)?;
        let mean = to_f64(&g.value(enc)[..cfg.object_dim + 1]);
        objects.push(ObjectLatent {
            z: mean[..cfg.object_dim].to_vec(),
            depth_logit: mean[cfg.object_dim],
            position: [t / n, t % n],
        });
    }
    let enc_bg = encode_background(&mut g, &p, cfg, x)?;
    let z_bg = to_f64(&g.value(enc_bg)[..cfg.background_dim]);
    Ok(SceneLatents { y: None, z_bg, objects })
}

/// User-fixed latents for generation; anything left `None` is sampled.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Overrides {
    pub y: Option<Vec<f64>>,
    /// `(row, col)` per slot.
    pub positions: Option<Vec<[usize; 2]>>,
    pub z: Option<Vec<Vec<f64>>>,
    pub depth_logits: Option<Vec<f64>>,
    pub z_bg: Option<Vec<f64>>,
    pub hide_objects: bool,
}

fn check_override_len(what: &str, got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(Error::InvalidArgument(format!("override {what} has {got} entries, expected {want}")));
    }
    Ok(())
}

/// Ancestral sampling of latents. With `hyperprior` the chain is
/// `y -> positions -> (z, depth)`; without it positions are uniform and
/// `z`, depth logits and `z_bg` standard normal. All noise is drawn up front
/// in a fixed order, so overriding one latent leaves the others unchanged.
pub fn sample_latents<T: Real>(
    params: &Params<T>,
    cfg: &ModelConfig,
    seed: u64,
    hyperprior: bool,
    overrides: &Overrides,
) -> Result<SceneLatents> {
    if hyperprior && !cfg.hyperprior {
        return Err(Error::Config("this model was built without the scene-level hyperprior".into()));
    }
    let (n, j) = (cfg.image_size, cfg.slots);
    let d_obj = cfg.object_dim + 1;
    let mut noise = NoiseSource::new(derive_seed(seed, &[0x5A4D]));
    let y_noise: Vec<f64> = noise.normal(cfg.scene_dim);
    let gumbel: Vec<Vec<f64>> = (0..j).map(|_| noise.gumbel(n * n)).collect();
    let obj_noise: Vec<Vec<f64>> = (0..j).map(|_| noise.normal(d_obj)).collect();
    let bg_noise: Vec<f64> = noise.normal(cfg.background_dim);

    if let Some(p) = &overrides.positions {
        check_override_len("positions", p.len(), j)?;
        if p.iter().any(|[r, c]| *r >= n || *c >= n) {
            return Err(Error::InvalidArgument(format!("override position outside the {n}x{n} image")));
        }
    }
    if let Some(z) = &overrides.z {
        check_override_len("z", z.len(), j)?;
        for zj in z {
            check_override_len("z entry", zj.len(), cfg.object_dim)?;
        }
    }
    if let Some(d) = &overrides.depth_logits {
        check_override_len("depth_logits", d.len(), j)?;
    }
    if let Some(z) = &overrides.z_bg {
        check_override_len("z_bg", z.len(), cfg.background_dim)?;
    }

    let mut y = None;
    let mut positions = Vec::with_capacity(j);
    let mut samples: Vec<Vec<f64>> = obj_noise.clone();
    if hyperprior {
        let yv = match &overrides.y {
            Some(v) => {
                check_override_len("y", v.len(), cfg.scene_dim)?;
                v.clone()
            }
            None => y_noise,
        };
        let mut g = Graph::<T>::new();
        let p = params.bind(&mut g, |_| false);
        let yvar = g.constant(tensor_of(vec![cfg.scene_dim], &yv)?);
        let logits = position_prior(&mut g, &p, cfg, yvar)?;
        let slots = slot_logits(&mut g, cfg, logits)?;
        for (k, l) in slots.iter().enumerate() {
            let perturbed: Vec<f64> = g.value(*l).iter().zip(&gumbel[k]).map(|(a, b)| a.as_f64() + b).collect();
            let t = argmax(&perturbed);
            positions.push([t / n, t % n]);
        }
        if let Some(p) = &overrides.positions {
            positions = p.clone();
        }
        let coords = positions
            .iter()
            .map(|[r, c]| {
                let theta = g.constant(one_hot(n, r * n + c));
                expected_coords(&mut g, theta)
            })
            .collect::<Result<Vec<_>>>()?;
        let prior_params = object_prior(&mut g, &p, cfg, yvar, &coords)?;
        for (k, pp) in prior_params.into_iter().enumerate() {
            let prior = DiagGaussian::from_flat(&mut g, pp, d_obj)?;
            let mean = g.value(prior.mean);
            let log_var = g.value(prior.log_var);
            samples[k] = (0..d_obj)
                .map(|i| mean[i].as_f64() + (0.5 * log_var[i].as_f64()).exp() * obj_noise[k][i])
                .collect();
        }
        y = Some(yv);
    } else {
        for gk in &gumbel {
            let t = argmax(gk);
            positions.push([t / n, t % n]);
        }
        if let Some(p) = &overrides.positions {
            positions = p.clone();
        }
    }
    let objects = (0..j)
        .map(|k| ObjectLatent {
            z: match &overrides.z {
                Some(z) => z[k].clone(),
                None => samples[k][..cfg.object_dim].to_vec(),
            },
            depth_logit: match &overrides.depth_logits {
                Some(d) => d[k],
                None => samples[k][cfg.object_dim],
            },
            position: positions[k],
        })
        .collect();
    Ok(SceneLatents {
        y,
        z_bg: overrides.z_bg.clone().unwrap_or(bg_noise),
        objects,
    })
}

/// Samples latents and renders them.
pub fn generate<T: Real>(
    params: &Params<T>,
    cfg: &ModelConfig,
    seed: u64,
    hyperprior: bool,
    overrides: &Overrides,
) -> Result<(SceneLatents, Rendering)> {
    let latents = sample_latents(params, cfg, seed, hyperprior, overrides)?;
    let rendering = render_latents(params, cfg, &latents, overrides.hide_objects)?;
    Ok((latents, rendering))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InterpolationMode {
    /// Object positions move; appearance, depth and background stay at A.
    Positions,
    /// Object appearance, depth and background change; positions stay at A.
    Appearance,
    Joint,
}

impl std::str::FromStr for InterpolationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "positions" => Ok(InterpolationMode::Positions),
            "appearance" => Ok(InterpolationMode::Appearance),
            "joint" => Ok(InterpolationMode::Joint),
            _ => Err(Error::InvalidArgument(format!(
                "unknown interpolation mode {s:?} (positions, appearance, joint)"
            ))),
        }
    }
}

fn lerp(a: f64, b: f64, t: f64) -> f64 {
    (1.0 - t) * a + t * b
}

fn lerp_vec(a: &[f64], b: &[f64], t: f64) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| lerp(*x, *y, t)).collect()
}

/// Latents `steps` evenly spaced points from `a` to `b` (inclusive), slot by
/// slot. Positions are interpolated in pixel units and rounded.
pub fn interpolate_latents(
    a: &SceneLatents,
    b: &SceneLatents,
    steps: usize,
    mode: InterpolationMode,
) -> Result<Vec<SceneLatents>> {
    if steps < 2 {
        return Err(Error::InvalidArgument(format!("interpolation needs at least 2 steps, got {steps}")));
    }
    if a.objects.len() != b.objects.len() {
        return Err(Error::InvalidArgument("endpoints have different object counts".into()));
    }
    let moves_position = mode != InterpolationMode::Appearance;
    let moves_appearance = mode != InterpolationMode::Positions;
    Ok((0..steps)
        .map(|s| {
            let t = s as f64 / (steps - 1) as f64;
            let objects = a
                .objects
                .iter()
                .zip(&b.objects)
                .map(|(oa, ob)| ObjectLatent {
                    z: if moves_appearance { lerp_vec(&oa.z, &ob.z, t) } else { oa.z.clone() },
                    depth_logit: if moves_appearance {
                        lerp(oa.depth_logit, ob.depth_logit, t)
                    } else {
                        oa.depth_logit
                    },
                    position: if moves_position {
                        [0, 1].map(|k| lerp(oa.position[k] as f64, ob.position[k] as f64, t).round() as usize)
                    } else {
                        oa.position
                    },
                })
                .collect();
            SceneLatents {
                y: None,
                z_bg: if moves_appearance { lerp_vec(&a.z_bg, &b.z_bg, t) } else { a.z_bg.clone() },
                objects,
            }
        })
        .collect())
}

/// Decomposes both images and renders the interpolated latents.
pub fn interpolate<T: Real>(
    params: &Params<T>,
    cfg: &ModelConfig,
    image_a: &[f64],
    image_b: &[f64],
    steps: usize,
    mode: InterpolationMode,
) -> Result<Vec<Rendering>> {
    if steps < 2 {
        return Err(Error::InvalidArgument(format!("interpolation needs at least 2 steps, got {steps}")));
    }
    let a = posterior_modes(params, cfg, image_a)?;
    let b = posterior_modes(params, cfg, image_b)?;
    interpolate_latents(&a, &b, steps, mode)?
        .iter()
        .map(|l| render_latents(params, cfg, l, false))
        .collect()
}
