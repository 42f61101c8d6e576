//! Central finite-difference verification of reverse-mode gradients.
//!
//! The error measure per input tensor is
//! `max_i |analytic_i - numeric_i| / max(max_i |numeric_i|, max_i |analytic_i|)`,
//! i.e. the worst absolute deviation relative to the gradient's own scale.
//! The scale never drops below `floor * max(|loss|, 1)`: a gradient that is
//! zero in exact arithmetic is otherwise judged on rounding noise alone.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, Tensor, Var};
use crate::error::Result;

#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    pub step: f64,
    /// Check at most this many randomly chosen elements per input.
    pub samples_per_input: Option<usize>,
    pub seed: u64,
    pub floor: f64,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck {
            step: 1e-5,
            samples_per_input: None,
            seed: 0,
            floor: 1e-6,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub per_input: Vec<f64>,
    pub max_rel_error: f64,
    pub checked: usize,
}

impl GradCheck {
    pub fn run<F>(&self, f: F, inputs: &[Tensor<f64>]) -> Result<GradCheckReport>
    where
        F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
    {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
        let loss = f(&mut g, &vars)?;
        let floor = self.floor * g.scalar(loss).abs().max(1.0);
        g.backward(loss)?;
        let analytic: Vec<Vec<f64>> = vars
            .iter()
            .zip(inputs)
            .map(|(v, t)| g.grad(*v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.numel()]))
            .collect();

        let eval = |perturbed: &[Tensor<f64>]| -> Result<f64> {
            let mut g = Graph::new();
            let vars: Vec<Var> = perturbed.iter().map(|t| g.constant(t.clone())).collect();
            let loss = f(&mut g, &vars)?;
            Ok(g.scalar(loss))
        };

        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut work = inputs.to_vec();
        let mut per_input = Vec::with_capacity(inputs.len());
        let mut checked = 0;
        for (i, input) in inputs.iter().enumerate() {
            let n = input.numel();
            let picks: Vec<usize> = match self.samples_per_input {
                Some(k) if k < n => sample(&mut rng, n, k).into_vec(),
                _ => (0..n).collect(),
            };
            let mut max_diff = 0.0f64;
            let mut scale = 0.0f64;
            for &e in &picks {
                let x0 = work[i].data()[e];
                work[i].data_mut()[e] = x0 + self.step;
                let up = eval(&work)?;
                work[i].data_mut()[e] = x0 - self.step;
                let down = eval(&work)?;
                work[i].data_mut()[e] = x0;
                let numeric = (up - down) / (2.0 * self.step);
                let a = analytic[i][e];
                max_diff = max_diff.max((a - numeric).abs());
                scale = scale.max(numeric.abs()).max(a.abs());
                checked += 1;
            }
            per_input.push(max_diff / scale.max(floor));
        }
        let max_rel_error = per_input.iter().copied().fold(0.0, f64::max);
        Ok(GradCheckReport {
            per_input,
            max_rel_error,
            checked,
        })
    }
}
