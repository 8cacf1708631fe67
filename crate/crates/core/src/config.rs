//! Training hyperparameters.

use serde::{Deserialize, Serialize};

use crate::clustering::DbscanParams;
use crate::encoder::LrSchedule;
use crate::error::{Error, Result};
use crate::losses::Variant;
use crate::memory::{check_omega, UpdatePolicy};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Labels come with the dataset.
    Supervised,
    /// Labels come from clustering the embedded training set every epoch.
    Unsupervised,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: Mode,
    pub variant: Variant,
    /// Softmax temperature.
    pub tau: f64,
    /// Weight of the consistency term.
    pub lambda: f64,
    /// Memory momentum shared by both banks.
    pub omega: f64,
    pub policy: UpdatePolicy,
    /// Identities per batch.
    pub p: usize,
    /// Instances per identity.
    pub k: usize,
    pub epochs: usize,
    pub base_lr: f64,
    pub lr_decay_factor: f64,
    /// Epochs between decays; `None` means a third of `epochs`.
    pub lr_decay_every: Option<usize>,
    pub weight_decay: f64,
    pub hidden_dims: Vec<usize>,
    pub feature_dim: usize,
    pub seed: u64,
    /// Evaluate every this many epochs (0: only after the last epoch).
    pub eval_every: usize,
    pub exclude_same_camera: bool,
    pub dbscan: DbscanParams,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Supervised,
            variant: Variant::Dcc,
            tau: 0.05,
            lambda: 0.5,
            omega: 0.0,
            policy: UpdatePolicy::All,
            p: 8,
            k: 16,
            epochs: 60,
            base_lr: 3.5e-4,
            lr_decay_factor: 0.1,
            lr_decay_every: None,
            weight_decay: 5e-4,
            hidden_dims: vec![64],
            feature_dim: 32,
            seed: 0,
            eval_every: 1,
            exclude_same_camera: true,
            dbscan: DbscanParams::default(),
        }
    }
}

fn invalid(key: &str, message: impl Into<String>) -> Error {
    Error::Config {
        key: key.into(),
        message: message.into(),
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::NonPositiveTau(self.tau));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(invalid("lambda", format!("must be non-negative, got {}", self.lambda)));
        }
        check_omega(self.omega)?;
        if self.p == 0 || self.k == 0 {
            return Err(invalid("p/k", "batch dimensions must be positive"));
        }
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            return Err(invalid("base_lr", format!("must be non-negative, got {}", self.base_lr)));
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor.is_finite()) {
            return Err(invalid("lr_decay_factor", "must be positive"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(invalid("weight_decay", "must be non-negative"));
        }
        if self.feature_dim == 0 || self.hidden_dims.contains(&0) {
            return Err(invalid("hidden_dims/feature_dim", "layer widths must be positive"));
        }
        if self.mode == Mode::Unsupervised {
            self.dbscan.validate()?;
        }
        Ok(())
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule {
            base_lr: self.base_lr,
            decay_factor: self.lr_decay_factor,
            decay_every: self.lr_decay_every.unwrap_or(self.epochs / 3),
            total_epochs: self.epochs,
        }
    }

    pub fn batch_size(&self) -> usize {
        self.p * self.k
    }

    pub fn layer_dims(&self, input_dim: usize) -> Vec<usize> {
        let mut dims = vec![input_dim];
        dims.extend_from_slice(&self.hidden_dims);
        dims.push(self.feature_dim);
        dims
    }
}
