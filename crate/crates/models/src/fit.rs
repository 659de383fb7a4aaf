//! Shared fitting options, results and design helpers.

use fertsae_core::{CovariateTable, Level};
use fertsae_gmrf::{
    sample_posterior, Design, FixedEffect, LatentModelSpec, NormalPrior, PosteriorSamples,
    RegionGraph, SamplerSettings, StructureKind, StructureMatrix,
};

use crate::estimates::{DrawTable, SmoothedEstimate};
use crate::ModelError;

/// Prior on the cutoff shift: mean 0.05, variance 0.1.
pub const ZETA_PRIOR: NormalPrior = NormalPrior {
    mean: 0.05,
    sd: 0.316_227_766_016_837_94,
};

#[derive(Debug, Clone, PartialEq)]
pub struct FitOptions {
    pub use_covariates: bool,
    /// Estimate the cutoff shift ζ; when false it is held at 0.
    pub cutoff_adjustment: bool,
    /// Hold every covariate coefficient at 0 (the covariate columns stay in the
    /// design).
    pub fix_beta_zero: bool,
    pub sampler: SamplerSettings,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            use_covariates: false,
            cutoff_adjustment: true,
            fix_beta_zero: false,
            sampler: SamplerSettings::default(),
        }
    }
}

/// A fitted model: its specification, raw draws and reporting-scale draws.
#[derive(Debug, Clone)]
pub struct ModelFit {
    pub model: String,
    pub spec: LatentModelSpec,
    pub samples: PosteriorSamples,
    pub draws: DrawTable,
    /// Design rows for reporting (cutoff columns zeroed).
    pub report_design: Design,
    pub flags: Vec<String>,
}

impl ModelFit {
    pub fn level(&self) -> Level {
        self.draws.level
    }

    pub fn estimates(&self) -> Vec<SmoothedEstimate> {
        self.draws.summaries(&self.model)
    }

    pub fn max_constraint_residual(&self) -> f64 {
        self.samples.max_constraint_residual(&self.spec)
    }
}

pub(crate) fn check_graph(graph: &RegionGraph, n_areas: usize) -> Result<(), ModelError> {
    if graph.len() != n_areas {
        return Err(ModelError::Invalid(format!(
            "graph has {} regions, input has {n_areas} areas",
            graph.len()
        )));
    }
    Ok(())
}

pub(crate) fn spatial_structures(
    graph: &RegionGraph,
) -> Result<(StructureMatrix, StructureMatrix), ModelError> {
    let icar = StructureMatrix::icar(graph, true)?;
    let bym = fertsae_gmrf::build_structure(StructureKind::Bym2, None, Some(graph), true)?;
    Ok((icar, bym))
}

/// Standardised covariate columns (one value per area) and their names.
pub(crate) fn covariate_columns(
    table: &CovariateTable,
    n_areas: usize,
) -> Result<Vec<(String, Vec<f64>)>, ModelError> {
    if table.values.len() != n_areas {
        return Err(ModelError::Invalid(format!(
            "covariate table has {} rows for {n_areas} areas",
            table.values.len()
        )));
    }
    let mut out = Vec::new();
    for (k, name) in table.names.iter().enumerate() {
        let col = table.column(k);
        let n = col.len() as f64;
        let mean = col.iter().sum::<f64>() / n;
        let sd = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        if !(sd > 1e-12) {
            return Err(ModelError::Invalid(format!("covariate `{name}` is constant")));
        }
        out.push((name.clone(), col.iter().map(|v| (v - mean) / sd).collect()));
    }
    Ok(out)
}

/// Appends covariate columns to the design; `area_of_row` maps rows to areas.
pub(crate) fn push_covariates(
    fixed: &mut Vec<FixedEffect>,
    design: &mut Design,
    table: Option<&CovariateTable>,
    n_areas: usize,
    area_of_row: &[usize],
    opts: &FitOptions,
) -> Result<(), ModelError> {
    if !opts.use_covariates {
        return Ok(());
    }
    let table = table.ok_or_else(|| ModelError::Invalid("covariates requested but none supplied".into()))?;
    for (name, col) in covariate_columns(table, n_areas)? {
        let mut fe = FixedEffect::coefficient(format!("beta.{name}"));
        if opts.fix_beta_zero {
            fe = fe.fixed_at(0.0);
        }
        fixed.push(fe);
        design.push_fixed(area_of_row.iter().map(|&i| col[i]).collect());
    }
    Ok(())
}

/// `+1` in year `t_s - 6`, `-1` in year `t_s - 5`, else 0.
pub fn cutoff_indicator(year: i32, survey_year: i32) -> f64 {
    if year == survey_year - 6 {
        1.0
    } else if year == survey_year - 5 {
        -1.0
    } else {
        0.0
    }
}

/// Copy of `design` with the named fixed-effect column zeroed.
pub(crate) fn zero_column(spec_fixed: &[FixedEffect], design: &Design, name: &str) -> Design {
    let mut out = design.clone();
    if let Some(k) = spec_fixed.iter().position(|f| f.name == name) {
        out.fixed[k].iter_mut().for_each(|v| *v = 0.0);
    }
    out
}

pub(crate) fn run(
    spec: &LatentModelSpec,
    settings: &SamplerSettings,
) -> Result<PosteriorSamples, ModelError> {
    Ok(sample_posterior(spec, settings)?)
}
