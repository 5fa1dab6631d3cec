//! Heterogeneous graph network for joint beamforming, phase and association
//! design, its training loops and the fully connected benchmark.

pub mod batch;
pub mod checkpoint;
pub mod gradcheck;
pub mod loss;
pub mod model;
pub mod params;
pub mod train;

pub use batch::{build_input_features, features_to_cascaded, Batch, Dims};
pub use checkpoint::{read_checkpoint, write_checkpoint};
pub use gradcheck::{grad_check, GradReport};
pub use loss::{combine, loss_ce, loss_wsr, CE_FLOOR};
pub use model::{Arch, Heads, Layout, Model, ModelKind};
pub use params::{Init, Linear, Mlp, ParamStore};
pub use train::{
    calibration_pair, compute_eta, evaluate, init_network, label_set, predict, reference_wsr, pretrain, resume_pretrain, train, train_fixed,
    warm_start, AssocMode, EpochMetrics, Evaluation, LabelSet, Prediction, PretrainOutcome,
};

use crate::channel::ChannelError;
use crate::numerics::{AdamConfig, AdamState, NumericsError};
use crate::sysmodel::SysError;

#[derive(Debug, thiserror::Error)]
pub enum HgnnError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{phase} diverged at epoch {epoch}, batch {batch}: {msg}")]
    Diverged {
        phase: &'static str,
        epoch: usize,
        batch: usize,
        msg: String,
    },
    #[error("degenerate calibration: reference WSR {0:e}")]
    DegenerateEta(f64),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed checkpoint at byte {offset}: {msg}")]
    Format { offset: usize, msg: String },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Sys(#[from] SysError),
    #[error(transparent)]
    Channel(#[from] ChannelError),
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub kind: ModelKind,
    pub epochs: usize,
    pub pretrain_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub adam_eps: f64,
    pub hidden: usize,
    /// Total blocks including encoder and decoder.
    pub steps: usize,
    pub slope: f64,
    /// Fixed penalty; calibrated from pre-training when absent.
    pub eta: Option<f64>,
    pub seed: u64,
    pub p_max_dbm: f64,
    pub pretrain_p_max_dbm: f64,
    /// Checkpoint period in epochs, 0 to disable.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            kind: ModelKind::Gnn,
            epochs: 60,
            pretrain_epochs: 30,
            batch_size: 128,
            lr: 5e-4,
            weight_decay: 2.5e-5,
            adam_eps: 1e-8,
            hidden: 64,
            steps: 4,
            slope: 0.01,
            eta: None,
            seed: 0,
            p_max_dbm: 20.0,
            pretrain_p_max_dbm: 30.0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), HgnnError> {
        let bad = |m: &str| Err(HgnnError::Config(m.into()));
        if self.batch_size == 0 || self.hidden == 0 {
            return bad("batch size and hidden width must be positive");
        }
        if self.steps < 3 {
            return bad("at least 3 blocks (encoder, core, decoder) are needed");
        }
        if !(self.lr > 0.0) || !(self.weight_decay >= 0.0) || !(self.adam_eps > 0.0) {
            return bad("learning rate and epsilon must be positive, weight decay non-negative");
        }
        if self.eta.is_some_and(|e| !(e >= 0.0) || !e.is_finite()) {
            return bad("eta must be finite and non-negative");
        }
        if !self.p_max_dbm.is_finite() || !self.pretrain_p_max_dbm.is_finite() {
            return bad("power levels must be finite");
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
            ..AdamConfig::default()
        }
    }
}

/// A model together with everything needed to apply or resume it.
#[derive(Debug, Clone)]
pub struct Network {
    pub model: Model,
    /// Divisor applied to raw channel features.
    pub input_scale: f64,
    pub eta: f64,
    /// Operating point the model was last trained at.
    pub p_max_dbm: f64,
    pub epochs_done: usize,
    pub adam: Option<AdamState>,
}
