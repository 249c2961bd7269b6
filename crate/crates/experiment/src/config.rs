//! Training and evaluation settings.

use serde::{Deserialize, Serialize};
use vird_core::model::ModelConfig;
use vird_core::reconstruction::ReconWeights;

use crate::error::{ExperimentError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub alpha1: f64,
    pub alpha2: f64,
    pub beta: f64,
    /// InfoNCE temperature.
    pub tau: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha1: 1.0,
            alpha2: 10.0,
            beta: 5.0,
            tau: 0.05,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSettings {
    /// Positions per axis.
    pub side: usize,
    /// Requested yaw count; lowered to a divisor of the polar width.
    pub n_theta: usize,
}

/// Components switched off. All false is the full model.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Ablation {
    pub cepa: bool,
    pub context_enhancement: bool,
    pub recon_origin: bool,
    pub recon_cross: bool,
    pub regression: bool,
}

impl Ablation {
    /// Sets the flag named as on the command line.
    pub fn disable(&mut self, name: &str) -> Result<()> {
        match name {
            "cepa" => self.cepa = true,
            "ce" => self.context_enhancement = true,
            "recon-origin" => self.recon_origin = true,
            "recon-cross" => self.recon_cross = true,
            "regression" => self.regression = true,
            other => {
                return Err(ExperimentError::Config(format!(
                    "unknown ablation '{other}' (expected cepa, ce, recon-origin, recon-cross or regression)"
                )))
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub loss: LossWeights,
    pub train_grid: GridSettings,
    pub test_grid: GridSettings,
    pub ablate: Ablation,
    /// Global gradient-norm cap; off when absent.
    pub grad_clip: Option<f64>,
    pub weight_decay: f64,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 4,
            lr: 1e-4,
            seed: 0,
            loss: LossWeights::default(),
            train_grid: GridSettings { side: 5, n_theta: 16 },
            test_grid: GridSettings { side: 20, n_theta: 64 },
            ablate: Ablation::default(),
            grad_clip: None,
            weight_decay: 0.0,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ExperimentError::Config(m));
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be > 0, got {}", self.lr));
        }
        let l = &self.loss;
        if [l.alpha1, l.alpha2, l.beta].iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return bad(format!("loss weights must be finite and >= 0, got {l:?}"));
        }
        if !(l.tau > 0.0 && l.tau.is_finite()) {
            return bad(format!("tau must be > 0, got {}", l.tau));
        }
        for (what, g) in [("train_grid", self.train_grid), ("test_grid", self.test_grid)] {
            if g.side == 0 || g.n_theta == 0 {
                return bad(format!("{what} needs at least one position and one yaw"));
            }
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return bad(format!("grad_clip must be > 0, got {c}"));
            }
        }
        if !(self.weight_decay >= 0.0) {
            return bad(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        Ok(())
    }

    /// Model configuration with the architectural ablations applied.
    pub fn model_config(&self) -> ModelConfig {
        let mut m = self.model.clone();
        if self.ablate.cepa {
            m.cepa.enabled = false;
        }
        if self.ablate.context_enhancement {
            m.cepa.context_enhancement = false;
        }
        m
    }

    pub fn recon_weights(&self) -> ReconWeights {
        ReconWeights {
            alpha1: if self.ablate.recon_origin { 0.0 } else { self.loss.alpha1 },
            alpha2: if self.ablate.recon_cross { 0.0 } else { self.loss.alpha2 },
        }
    }

    pub fn regression_weight(&self) -> f64 {
        if self.ablate.regression {
            0.0
        } else {
            self.loss.beta
        }
    }
}
