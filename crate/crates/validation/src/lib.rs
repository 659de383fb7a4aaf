//! Synthetic surveys with known truth, cross-validation and scoring.

pub mod cv;
pub mod metrics;
pub mod sim;

use fertsae_core::CoreError;
use fertsae_models::ModelError;

pub use cv::{fold_seed, run_cv, write_cv_report, CvModel, CvOptions, CvOutcome, CvPlan, Fold, Scheme};
pub use metrics::{covered, interval_score, point_metrics, predictive_intervals, score, HeldOut, IntervalScoreMode, ScoreReport};
pub use sim::{simulate_survey, EffectScales, Geography, Population, Psu, SimConfig, SimOutput, SimTruth};

#[derive(Debug, thiserror::Error)]
pub enum ValidationError {
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("infeasible design: {0}")]
    Infeasible(String),
}
