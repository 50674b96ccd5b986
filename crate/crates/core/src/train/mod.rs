//! Training loop, metrics, the hyperparameter search space and the fixed
//! reference configurations.

mod metrics;
mod run;

use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::embed::Variant;
use crate::error::{usage, Result};
use crate::scheme::{Assembly, DecoderSpec, ModelSpec};

pub use metrics::{accuracy, argmax_rows, cross_entropy_loss, mse_loss, nrmse, rmse};
pub use run::{collect_search, evaluate, random_search, search_configs, train_loop, EvalPoint, Prediction, RunRecord, SearchOutcome, TaskData, TrainOutcome};

/// Validation is run every this many steps.
pub const EVAL_EVERY: usize = 50;
pub const DEFAULT_STEPS: usize = 4000;
pub const DECODER_HIDDEN: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_scale: f64,
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub decoder_layers: usize,
    pub decoder_hidden: usize,
    pub batch_norm: bool,
    pub dropout: f64,
    pub steps: usize,
    pub eval_every: usize,
    pub seed: u64,
    pub variant: Variant,
    /// Per-edge-type neighbor cap while sampling; `None` keeps every neighbor.
    #[serde(default)]
    pub fanout: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch_scale: 1.0,
            d_model: 16,
            layers: 2,
            heads: 2,
            decoder_layers: 2,
            decoder_hidden: DECODER_HIDDEN,
            batch_norm: true,
            dropout: 0.0,
            steps: DEFAULT_STEPS,
            eval_every: EVAL_EVERY,
            seed: 0,
            variant: Variant::Base,
            fanout: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(usage!("learning rate {} must be finite and non-negative", self.lr));
        }
        if !(self.batch_scale >= 1.0) || !self.batch_scale.is_finite() {
            return Err(usage!("batch scale {} must be at least 1", self.batch_scale));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(usage!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.steps == 0 || self.eval_every == 0 || self.d_model == 0 || self.decoder_layers == 0 || self.decoder_hidden == 0 {
            return Err(usage!("steps, eval cadence, width, decoder depth and decoder width must be positive"));
        }
        if self.fanout == Some(0) {
            return Err(usage!("fanout cap must be positive"));
        }
        Ok(())
    }

    /// The assembly's spec at this configuration; target-only models ignore `layers`.
    pub fn model_spec(&self, kind: Assembly, outputs: usize) -> ModelSpec {
        let layers = if kind == Assembly::TabularFnn { 0 } else { self.layers };
        let decoder = DecoderSpec { layers: self.decoder_layers, hidden: self.decoder_hidden, batch_norm: self.batch_norm, outputs };
        let mut spec = ModelSpec::assembly(kind, self.d_model, layers, self.heads, self.variant, decoder);
        spec.dropout = self.dropout;
        spec
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FixedConfig {
    Large,
    Medium,
    Small,
}

impl FixedConfig {
    pub const ALL: [FixedConfig; 3] = [FixedConfig::Large, FixedConfig::Medium, FixedConfig::Small];

    pub fn config(self) -> TrainConfig {
        let (d_model, layers, heads, decoder_hidden) = match self {
            FixedConfig::Large => (64, 4, 4, 64),
            FixedConfig::Medium => (32, 3, 4, 64),
            FixedConfig::Small => (16, 2, 2, 32),
        };
        TrainConfig {
            lr: 1e-4,
            d_model,
            layers,
            heads,
            decoder_layers: 2,
            decoder_hidden,
            batch_norm: true,
            dropout: 0.1,
            variant: Variant::Full,
            ..TrainConfig::default()
        }
    }
}

/// The three reference configurations, largest first.
pub fn fixed_configs() -> [(FixedConfig, TrainConfig); 3] {
    FixedConfig::ALL.map(|f| (f, f.config()))
}

/// Distributions the search samples from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub lr_min: f64,
    pub lr_max: f64,
    /// Batch scale is `2^u` with `u` uniform in `[0, scale_log2_max]`.
    pub scale_log2_max: f64,
    pub dims: Vec<usize>,
    pub layers_min: usize,
    pub layers_max: usize,
    pub decoder_layers_min: usize,
    pub decoder_layers_max: usize,
    pub decoder_hidden: usize,
    pub trials: usize,
}

impl Default for SearchSpace {
    fn default() -> Self {
        Self {
            lr_min: 5e-5,
            lr_max: 2e-3,
            scale_log2_max: 8.0,
            dims: alloc::vec![16, 32, 64],
            layers_min: 1,
            layers_max: 5,
            decoder_layers_min: 1,
            decoder_layers_max: 3,
            decoder_hidden: DECODER_HIDDEN,
            trials: 16,
        }
    }
}

impl SearchSpace {
    /// Draws one configuration; fields outside the space come from `base`.
    pub fn sample<R: Rng>(&self, rng: &mut R, base: &TrainConfig) -> TrainConfig {
        let (lo, hi) = (libm::log(self.lr_min), libm::log(self.lr_max));
        let lr = libm::exp(rng.gen_range(lo..=hi)).clamp(self.lr_min, self.lr_max);
        let batch_scale = libm::exp2(rng.gen_range(0.0..=self.scale_log2_max));
        let d_model = self.dims[rng.gen_range(0..self.dims.len())];
        let layers = rng.gen_range(self.layers_min..=self.layers_max);
        let decoder_layers = rng.gen_range(self.decoder_layers_min..=self.decoder_layers_max);
        let batch_norm = rng.gen_bool(0.5);
        TrainConfig {
            lr,
            batch_scale,
            d_model,
            layers,
            heads: if d_model >= 32 { 4 } else { 2 },
            decoder_layers,
            decoder_hidden: self.decoder_hidden,
            batch_norm,
            ..base.clone()
        }
    }

    pub fn contains(&self, c: &TrainConfig) -> bool {
        (self.lr_min..=self.lr_max).contains(&c.lr)
            && (1.0..=libm::exp2(self.scale_log2_max)).contains(&c.batch_scale)
            && self.dims.contains(&c.d_model)
            && (self.layers_min..=self.layers_max).contains(&c.layers)
            && (self.decoder_layers_min..=self.decoder_layers_max).contains(&c.decoder_layers)
    }
}

/// Name of the validation metric for a task.
pub fn metric_name(task: crate::sampler::TaskKind) -> String {
    String::from(match task {
        crate::sampler::TaskKind::Classification => "accuracy",
        crate::sampler::TaskKind::Regression => "nrmse",
    })
}
