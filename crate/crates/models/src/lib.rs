//! Area-level and unit-level fertility models, urban/rural aggregation and
//! posterior summaries.

pub mod area;
pub mod decomposition;
pub mod estimates;
pub mod fit;
pub mod unit;
pub mod urban;

use fertsae_core::CoreError;
use fertsae_gmrf::GmrfError;

pub use area::{fit_fh_asfr, fit_fh_covariate, fit_fh_tfr, logit_delta, AreaModelInput, AreaObservation};
pub use decomposition::{variance_decomposition, Component, VarianceDecomposition};
pub use estimates::{
    aggregate_areas, aggregate_periods, read_draws, read_smoothed, tfr_identity_gap, write_draws,
    write_samples, write_smoothed, DrawTable, EstimateKey, Measure, SmoothedEstimate,
};
pub use fit::{cutoff_indicator, FitOptions, ModelFit, ZETA_PRIOR};
pub use unit::{fit_stratified, fit_unit_model, StratifiedFit, UnitCell, UnitModelInput};
pub use urban::{
    aggregate_ur, exceedance_probability, urban_fraction, write_exceedance, Combined, Exceedance,
    GridLayer, Pixel, UrbanFractionTable,
};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error(transparent)]
    Gmrf(#[from] GmrfError),
    #[error("{0}")]
    Invalid(String),
    #[error("no data: {0}")]
    NoData(String),
}

impl ModelError {
    /// True for sampler failures (divergence, numerical breakdown).
    pub fn is_convergence(&self) -> bool {
        matches!(
            self,
            ModelError::Gmrf(
                GmrfError::Divergent { .. }
                    | GmrfError::Numerical(_)
                    | GmrfError::NonFinite
                    | GmrfError::NotPositiveDefinite
            )
        )
    }
}
