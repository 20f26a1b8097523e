use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Reference distribution of the KL regularizer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlMode {
    /// Mean prediction over the `M` noise samples. Vanishes when `M = 1`.
    #[default]
    Literal,
    /// Prediction with the other encoders unperturbed.
    VsClean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateMode {
    /// Tasks take turns updating their own parameters.
    #[default]
    Alternating,
    /// One joint step on the summed losses per outer iteration (no clamp,
    /// no KL term).
    Simultaneous,
}

/// Algorithm knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Noise bound and clamp radius `b`.
    #[serde(rename = "b")]
    pub bound: f64,
    /// Warm-up step size `alpha`.
    #[serde(rename = "alpha")]
    pub warmup_lr: f64,
    /// Inner step size `beta`.
    #[serde(rename = "beta")]
    pub inner_lr: f64,
    /// KL weight `lambda`.
    #[serde(rename = "lambda")]
    pub kl_weight: f64,
    /// Noise samples per step `M`.
    pub samples: usize,
    /// Inner steps per task per outer iteration `L`.
    pub inner_iters: usize,
    pub warmup_iters: usize,
    pub outer_iters: usize,
    pub seed: u64,
    pub kl_mode: KlMode,
    /// When false, no noise is drawn and every step uses `M = 1`.
    pub inject_noise: bool,
    pub clamp: bool,
    pub update: UpdateMode,
    /// Evaluate every this many outer iterations (0 disables).
    pub eval_every: usize,
    pub track_negative_transfer: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            bound: 0.05,
            warmup_lr: 0.1,
            inner_lr: 0.1,
            kl_weight: 0.1,
            samples: 1,
            inner_iters: 1,
            warmup_iters: 200,
            outer_iters: 1000,
            seed: 0,
            kl_mode: KlMode::Literal,
            inject_noise: true,
            clamp: true,
            update: UpdateMode::Alternating,
            eval_every: 1,
            track_negative_transfer: true,
        }
    }
}

fn positive(key: &str, v: f64) -> Result<()> {
    if v > 0.0 && !v.is_nan() {
        Ok(())
    } else {
        Err(Error::config(
            key,
            format!("must satisfy {key} > 0, got {v}"),
        ))
    }
}

impl TrainConfig {
    /// Range checks; error keys are paths under the `train` table.
    pub fn validate(&self) -> Result<()> {
        positive("train.b", self.bound)?;
        positive("train.alpha", self.warmup_lr)?;
        positive("train.beta", self.inner_lr)?;
        if !(self.kl_weight >= 0.0 && self.kl_weight.is_finite()) {
            return Err(Error::config(
                "train.lambda",
                format!("must satisfy lambda >= 0, got {}", self.kl_weight),
            ));
        }
        if self.samples == 0 {
            return Err(Error::config("train.samples", "must satisfy M >= 1"));
        }
        if self.inner_iters == 0 {
            return Err(Error::config("train.inner_iters", "must satisfy L >= 1"));
        }
        if self.update == UpdateMode::Simultaneous && self.kl_weight > 0.0 {
            return Err(Error::config(
                "train.lambda",
                "simultaneous updates have no KL term; set lambda = 0",
            ));
        }
        Ok(())
    }
}
