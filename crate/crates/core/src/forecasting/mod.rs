//! Diffusion-based forecasting of malicious behavior.
//!
//! Agent histories are featurized into `(W, 6)` trajectories, a denoiser is
//! trained on honest trajectories, and the reconstruction error after a short
//! noise/denoise round trip becomes an anomaly score. Scores are calibrated
//! against honest data and mapped to graded countermeasures.

pub mod detect;
pub mod features;
pub mod fixture;
pub mod io;
pub mod model;
pub mod schedule;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arbitration::ArbitrationError;
use crate::ledger::LedgerError;
use crate::AgentId;

pub use detect::{
    anomaly_score, anomaly_scores, calibration_scores, denoise_trajectory, forecast_alerts, roc_auc, Action, Alert, Calibration,
    Cutpoints, DetectionMetrics, ZScoreBaseline,
};
pub use features::{featurize, FeatureConfig};
pub use model::{train_denoiser, Denoiser, TrainConfig, TrainOutput};
pub use schedule::{build_schedule, forward_diffuse, NoiseSchedule, ScheduleKind};

/// Channels, in order.
pub const FEATURE_NAMES: [&str; 6] = [
    "task_completion_rate",
    "mean_response_latency_normalized",
    "interaction_frequency_normalized",
    "stake_delta_normalized",
    "report_deviation",
    "coalition_co_occurrence",
];
pub const N_FEATURES: usize = FEATURE_NAMES.len();

#[derive(Debug, Error)]
pub enum ForecastError {
    #[error("invalid schedule: {0}")]
    InvalidRange(String),
    #[error("shape {got:?} does not match {expected:?}")]
    ShapeMismatch { expected: (usize, usize), got: (usize, usize) },
    #[error("step {t} outside 1..={max}")]
    StepOutOfRange { t: usize, max: usize },
    #[error("empty dataset")]
    EmptyDataset,
    #[error("trajectory shape {got:?} differs from {expected:?}")]
    InconsistentShapes { expected: (usize, usize), got: (usize, usize) },
    #[error("loss became non-finite in epoch {epoch}")]
    NonFiniteLoss { epoch: usize },
    #[error("need at least {needed} calibration scores, got {got}")]
    InsufficientCalibrationData { needed: usize, got: usize },
    #[error("detector is not calibrated")]
    NotCalibrated,
    #[error("unknown agent {0}")]
    UnknownAgent(AgentId),
    #[error("no records for {agent} in epochs {from}..={to}")]
    EmptyWindow { agent: AgentId, from: u64, to: u64 },
    #[error("trajectory entry not finite")]
    NonFiniteEntry,
    #[error("window must be at least 1")]
    ZeroWindow,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("trajectory data: {0}")]
    Data(String),
    #[error("score count {scores} does not match label count {labels}")]
    LabelMismatch { scores: usize, labels: usize },
    #[error(transparent)]
    Arbitration(#[from] ArbitrationError),
    #[error(transparent)]
    Ledger(#[from] LedgerError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BehaviorTrajectory {
    pub agent_id: AgentId,
    pub window_start_epoch: u64,
    /// Shape `(W, 6)`, one row per epoch.
    pub x: Array2<f64>,
}

impl BehaviorTrajectory {
    pub fn new(agent_id: impl Into<AgentId>, window_start_epoch: u64, x: Array2<f64>) -> Result<Self, ForecastError> {
        if x.ncols() != N_FEATURES {
            return Err(ForecastError::ShapeMismatch {
                expected: (x.nrows(), N_FEATURES),
                got: x.dim(),
            });
        }
        if x.nrows() == 0 {
            return Err(ForecastError::ZeroWindow);
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(ForecastError::NonFiniteEntry);
        }
        Ok(BehaviorTrajectory {
            agent_id: agent_id.into(),
            window_start_epoch,
            x,
        })
    }

    pub fn window(&self) -> usize {
        self.x.nrows()
    }
}
