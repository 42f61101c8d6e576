use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::optim::AdamConfig;

/// Architecture and objective settings. Every field has a default; unknown
/// keys are rejected when read from JSON.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Image side `N`.
    pub image_size: usize,
    /// Object canvas side `M`.
    pub canvas_size: usize,
    /// Object slots `J`.
    pub slots: usize,
    pub scene_dim: usize,
    pub object_dim: usize,
    pub background_dim: usize,
    /// Channels per level of the position U-Net.
    pub unet_widths: Vec<usize>,
    /// Channels per stride-2 stage of the object and background encoders.
    pub encoder_widths: Vec<usize>,
    pub encoder_hidden: usize,
    /// Channels per stride-2 stage of the object and background decoders,
    /// coarsest first.
    pub decoder_widths: Vec<usize>,
    /// Channels per stage of the position-prior decoder.
    pub position_prior_widths: Vec<usize>,
    pub prior_hidden: usize,
    pub attention_crop: bool,
    pub hyperprior: bool,
    pub tau_depth: f64,
    pub beta_obj: f64,
    pub beta_bg: f64,
    pub kl_y_weight: f64,
    pub lambda_pos: f64,
    pub lambda_alpha: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_size: 32,
            canvas_size: 16,
            slots: 2,
            scene_dim: 16,
            object_dim: 8,
            background_dim: 4,
            unet_widths: vec![8, 16],
            encoder_widths: vec![8, 16],
            encoder_hidden: 32,
            decoder_widths: vec![16, 8],
            position_prior_widths: vec![16, 8],
            prior_hidden: 32,
            attention_crop: true,
            hyperprior: true,
            tau_depth: 0.1,
            beta_obj: 1.0,
            beta_bg: 1.0,
            kl_y_weight: 0.01,
            lambda_pos: 1.0,
            lambda_alpha: 0.0,
        }
    }
}

fn stages_divide(side: usize, stages: usize, what: &str) -> Result<()> {
    let f = 1usize << stages;
    if side % f != 0 || side / f == 0 {
        return Err(Error::Config(format!(
            "{what}: side {side} must be divisible by 2^{stages} (one halving per stage)"
        )));
    }
    Ok(())
}

impl ModelConfig {
    /// The default architecture scaled for a given image side (`M = N/2`).
    pub fn for_image_size(n: usize) -> Self {
        ModelConfig {
            image_size: n,
            canvas_size: n / 2,
            ..ModelConfig::default()
        }
    }

    /// Smallest configuration used by the gradient checks.
    pub fn tiny() -> Self {
        ModelConfig {
            image_size: 16,
            canvas_size: 8,
            slots: 2,
            scene_dim: 4,
            object_dim: 2,
            background_dim: 2,
            unet_widths: vec![2, 3],
            encoder_widths: vec![2],
            encoder_hidden: 4,
            decoder_widths: vec![3, 2],
            position_prior_widths: vec![2],
            prior_hidden: 4,
            ..ModelConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.image_size;
        let m = self.canvas_size;
        if n == 0 || m == 0 || m > n {
            return Err(Error::Config(format!("canvas side {m} must be in 1..={n}")));
        }
        if self.slots == 0 || self.scene_dim < 2 || self.object_dim == 0 || self.background_dim == 0 {
            return Err(Error::Config(
                "slots, object_dim and background_dim must be >= 1 and scene_dim >= 2".into(),
            ));
        }
        for (name, w) in [
            ("unet_widths", &self.unet_widths),
            ("encoder_widths", &self.encoder_widths),
            ("decoder_widths", &self.decoder_widths),
            ("position_prior_widths", &self.position_prior_widths),
        ] {
            if w.is_empty() || w.contains(&0) {
                return Err(Error::Config(format!("{name} must be a non-empty list of positive widths")));
            }
        }
        if self.encoder_hidden == 0 || self.prior_hidden == 0 {
            return Err(Error::Config("hidden widths must be positive".into()));
        }
        stages_divide(n, self.unet_widths.len(), "position U-Net")?;
        stages_divide(n, self.encoder_widths.len(), "background encoder")?;
        let obj_side = if self.attention_crop { m } else { n };
        stages_divide(obj_side, self.encoder_widths.len(), "object encoder")?;
        stages_divide(m, self.decoder_widths.len(), "object decoder")?;
        stages_divide(n, self.decoder_widths.len(), "background decoder")?;
        stages_divide(n, self.position_prior_widths.len(), "position prior")?;
        if !(self.tau_depth > 0.0) {
            return Err(Error::Config(format!("tau_depth {} must be positive", self.tau_depth)));
        }
        let weights = [
            self.beta_obj,
            self.beta_bg,
            self.kl_y_weight,
            self.lambda_pos,
            self.lambda_alpha,
        ];
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config("objective weights must be finite and non-negative".into()));
        }
        Ok(())
    }

    /// Elements of `y` read by the position prior; the object prior reads the
    /// rest.
    pub fn zeta_dim(&self) -> usize {
        self.scene_dim / 2
    }

    pub fn xi_dim(&self) -> usize {
        self.scene_dim - self.zeta_dim()
    }
}

/// Optimisation settings for both training stages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    pub batch_size: usize,
    pub stage1_steps: u64,
    pub stage2_steps: u64,
    pub adam: AdamConfig,
    /// Save a checkpoint every this many steps (0: only at the end).
    pub checkpoint_every: u64,
    /// Evaluate the fixed validation batch every this many steps (0: only at
    /// the start and the end).
    pub validate_every: u64,
    pub validation_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            batch_size: 32,
            stage1_steps: 2000,
            stage2_steps: 200,
            adam: AdamConfig::default(),
            checkpoint_every: 500,
            validate_every: 100,
            validation_size: 32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.validation_size == 0 {
            return Err(Error::Config("batch_size and validation_size must be positive".into()));
        }
        let a = &self.adam;
        if !(a.lr >= 0.0) || !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.eps >= 0.0) {
            return Err(Error::Config(format!("invalid Adam settings {a:?}")));
        }
        Ok(())
    }
}
