//! Survey microdata, Lexis-grid exposure tabulation and design-based
//! (survey-weighted) fertility estimates with jackknife variances.

pub mod direct;
pub mod exposure;
pub mod io;
pub mod summary;
pub mod survey;

use std::path::PathBuf;

pub use direct::{
    direct_asfr, direct_estimates, direct_estimates_with, direct_tfr, jackknife_from_replicates, jackknife_variance,
    log_transform, read_direct_estimates, write_direct_estimates, DirectEstimate, DirectKey,
    EstimateFlag, Estimator, Jackknife, JackknifeMethod,
};
pub use exposure::{
    aggregate_cells, tabulate, CellKey, ClusterMeta, FertilityCell, FertilityTable, Period,
    PeriodGrouping, TabulationReport, Urbanicity,
};
pub use fertsae_gmrf::{GraphReport, RegionGraph};
pub use summary::{quantile_sorted, summarize, Summary};
pub use survey::{
    cmc_from_year_month, load_dataset, read_adjacency, read_covariates, validate_graph,
    write_adjacency, write_covariates, write_dataset, AgeGroup,
    BirthRecord, CmcDate, Cluster, CovariateTable, DatasetPaths, Level, LoadMode, LoadReport,
    RowIssue, SurveyDataset, WomanRecord, N_AGE_GROUPS,
};

#[derive(Debug, thiserror::Error)]
pub enum CoreError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Schema { path: PathBuf, message: String },
    #[error("{file} line {line}: {reason}")]
    InvalidRow {
        file: String,
        line: u64,
        reason: String,
    },
    #[error("{file} line {line}: unknown {field} `{key}`")]
    DanglingKey {
        file: String,
        line: u64,
        field: &'static str,
        key: String,
    },
    #[error("invalid graph: {0}")]
    Graph(String),
    #[error("no data: {0}")]
    NoData(String),
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Model(#[from] fertsae_gmrf::GmrfError),
}

impl CoreError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CoreError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn schema(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        CoreError::Schema {
            path: path.into(),
            message: message.into(),
        }
    }
}
