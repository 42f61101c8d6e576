use serde::{Deserialize, Serialize};

use super::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam with one pair of moment buffers per parameter slot.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub config: AdamConfig,
    /// Number of completed steps.
    pub step: u64,
    pub first: Vec<Vec<T>>,
    pub second: Vec<Vec<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig, sizes: impl IntoIterator<Item = usize>) -> Self {
        let (first, second): (Vec<_>, Vec<_>) = sizes
            .into_iter()
            .map(|n| (vec![T::zero(); n], vec![T::zero(); n]))
            .unzip();
        Adam {
            config,
            step: 0,
            first,
            second,
        }
    }

    /// Starts a new step; every `update` until the next call shares its
    /// bias correction.
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    pub fn update(&mut self, slot: usize, param: &mut [T], grad: &[T]) -> Result<()> {
        let (m, v) = (&mut self.first[slot], &mut self.second[slot]);
        if param.len() != grad.len() || m.len() != param.len() {
            return Err(Error::ShapeMismatch {
                op: "adam",
                left: vec![param.len()],
                right: vec![grad.len()],
            });
        }
        let c = &self.config;
        let t = self.step.max(1) as i32;
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let one = T::one();
        let corr1 = one - T::of(c.beta1.powi(t));
        let corr2 = one - T::of(c.beta2.powi(t));
        let (lr, eps) = (T::of(c.lr), T::of(c.eps));
        for i in 0..param.len() {
            let g = grad[i];
            m[i] = b1 * m[i] + (one - b1) * g;
            v[i] = b2 * v[i] + (one - b2) * g * g;
            let mhat = m[i] / corr1;
            let vhat = v[i] / corr2;
            param[i] = param[i] - lr * mhat / (vhat.sqrt() + eps);
        }
        Ok(())
    }
}

/// One Adam step over `params` with matching `grads`.
pub fn adam_step<T: Real>(params: &mut [Tensor<T>], grads: &[Vec<T>], state: &mut Adam<T>) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.first.len() {
        return Err(Error::ShapeMismatch {
            op: "adam",
            left: vec![params.len()],
            right: vec![grads.len()],
        });
    }
    state.begin_step();
    for (slot, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        state.update(slot, p.data_mut(), g)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = vec![Tensor::<f64>::from_f64(vec![3], &[1.0, -2.0, 0.5]).unwrap()];
        let before = p.clone();
        let mut adam = Adam::new(AdamConfig::default(), [3]);
        adam_step(&mut p, &[vec![0.0; 3]], &mut adam).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut p = vec![Tensor::<f64>::from_f64(vec![3], &[0.0, 0.0, 0.0]).unwrap()];
        let cfg = AdamConfig {
            eps: 0.0,
            ..AdamConfig::default()
        };
        let mut adam = Adam::new(cfg, [3]);
        adam_step(&mut p, &[vec![3.0, -0.01, 1e3]], &mut adam).unwrap();
        for (x, s) in p[0].data().iter().zip([-1.0, 1.0, -1.0]) {
            assert!((x - s * cfg.lr).abs() < 1e-15, "{x}");
        }
    }

    #[test]
    fn converges_on_convex_quadratic() {
        let target = [0.3, -1.2, 2.0];
        let mut p = vec![Tensor::<f64>::zeros(vec![3])];
        let mut adam = Adam::new(
            AdamConfig {
                lr: 0.05,
                ..AdamConfig::default()
            },
            [3],
        );
        for _ in 0..200 {
            let g: Vec<f64> = p[0].data().iter().zip(target).map(|(w, c)| 2.0 * (w - c)).collect();
            adam_step(&mut p, &[g], &mut adam).unwrap();
        }
        for (w, c) in p[0].data().iter().zip(target) {
            assert!((w - c).abs() < 1e-3, "{w} vs {c}");
        }
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mut p = vec![Tensor::<f64>::zeros(vec![3])];
        let mut adam = Adam::new(AdamConfig::default(), [3]);
        assert!(adam_step(&mut p, &[vec![0.0; 2]], &mut adam).is_err());
    }
}
