//! Run configuration: a TOML file with optional sections, overridden by flags.

use std::path::{Path, PathBuf};

use fertsae_core::{AgeGroup, JackknifeMethod, Level, Period, PeriodGrouping, Urbanicity};
use fertsae_gmrf::SamplerSettings;
use serde::Deserialize;

use crate::CliError;

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub estimation: EstimationSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub sampler: SamplerSection,
    #[serde(default)]
    pub simulate: SimulateSection,
    #[serde(default)]
    pub cv: CvSection,
    #[serde(default)]
    pub aggregate: AggregateSection,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// Directory holding women.csv, births.csv, clusters.csv, admin1.adj,
    /// admin2.adj and optional covariates_<level>.csv.
    pub dir: Option<PathBuf>,
    pub survey_year: Option<i32>,
    pub strict: Option<bool>,
    /// Urban fractions (`area_id,period,age_group,r`).
    pub urban_fractions: Option<PathBuf>,
    /// Population grid (`pixel_id,area_id,urban_label,pop_15_19,...`).
    pub grid: Option<PathBuf>,
    /// Covariate proportions (`covariate,area_id,p,variance`).
    pub proportions: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimationSection {
    pub level: Option<String>,
    pub window: Option<String>,
    /// Years per reporting period; 1 gives annual estimates.
    pub period_years: Option<usize>,
    pub urbanicity: Option<String>,
    /// `stratified` (default) or `unstratified`.
    pub jackknife: Option<String>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub use_covariates: Option<bool>,
    pub stratified: Option<bool>,
    pub cutoff_adjustment: Option<bool>,
    /// Age groups left out of the variance decomposition.
    pub decomposition_exclude: Option<Vec<String>>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerSection {
    pub chains: Option<usize>,
    pub burn_in: Option<usize>,
    pub draws: Option<usize>,
    pub thin: Option<usize>,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateSection {
    pub admin1: Option<usize>,
    pub subdivision: Option<usize>,
    pub clusters: Option<usize>,
    pub households_per_cluster: Option<usize>,
    pub women_per_household: Option<f64>,
    pub urban_oversampling: Option<f64>,
    pub tfr_start: Option<f64>,
    pub tfr_end: Option<f64>,
    pub urban_log_effect: Option<f64>,
    pub displacement: Option<f64>,
    pub fertility_scale: Option<f64>,
    pub frailty_shape: Option<f64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CvSection {
    pub schemes: Option<Vec<String>>,
    pub models: Option<Vec<String>>,
    pub levels: Option<Vec<f64>>,
    /// "printed" (α/2 penalty) or "literature" (2/α).
    pub interval_score: Option<String>,
    pub exclude_ages: Option<Vec<String>>,
    pub period_years: Option<usize>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AggregateSection {
    pub urban_draws: Option<PathBuf>,
    pub rural_draws: Option<PathBuf>,
    pub thresholds: Option<Vec<f64>>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
    }
}

/// Flag values that override the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub level: Option<String>,
    pub window: Option<String>,
    pub out: Option<PathBuf>,
    pub data: Option<PathBuf>,
}

/// Fully resolved settings shared by all subcommands.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub file: FileConfig,
    pub seed: u64,
    pub level: Level,
    pub window: Period,
    pub survey_year: i32,
    pub out: PathBuf,
    pub data: Option<PathBuf>,
}

pub fn parse_level(s: &str) -> Result<Level, CliError> {
    Level::parse(s).ok_or_else(|| CliError::Input(format!("unknown level `{s}`")))
}

pub fn parse_age(s: &str) -> Result<AgeGroup, CliError> {
    AgeGroup::parse(s).ok_or_else(|| CliError::Input(format!("unknown age group `{s}`")))
}

impl RunConfig {
    pub fn resolve(file: FileConfig, o: Overrides) -> Result<Self, CliError> {
        let seed = o.seed.or(file.sampler.seed).ok_or_else(|| {
            CliError::Input("a seed is required (--seed or [sampler] seed)".into())
        })?;
        let level = parse_level(o.level.as_deref().or(file.estimation.level.as_deref()).unwrap_or("admin1"))?;
        let survey_year = file.data.survey_year.unwrap_or(2021);
        let window = match o.window.as_deref().or(file.estimation.window.as_deref()) {
            Some(w) => w.parse::<Period>().map_err(|e| CliError::Input(format!("window `{w}`: {e}")))?,
            None => Period::new(survey_year - 9, survey_year - 1).expect("ordered"),
        };
        let data = o.data.or_else(|| file.data.dir.clone());
        if let Some(d) = &data {
            if !d.is_dir() {
                return Err(CliError::Input(format!("data directory {} does not exist", d.display())));
            }
        }
        for p in [&file.data.urban_fractions, &file.data.grid, &file.data.proportions]
            .into_iter()
            .flatten()
        {
            if !p.exists() {
                return Err(CliError::Input(format!("{} does not exist", p.display())));
            }
        }
        Ok(Self {
            seed,
            level,
            window,
            survey_year,
            out: o.out.unwrap_or_else(|| PathBuf::from("out")),
            data,
            file,
        })
    }

    pub fn data_dir(&self) -> Result<&Path, CliError> {
        self.data
            .as_deref()
            .ok_or_else(|| CliError::Input("no input data (--data or [data] dir)".into()))
    }

    pub fn urbanicity(&self) -> Result<Urbanicity, CliError> {
        match self.file.estimation.urbanicity.as_deref().unwrap_or("both") {
            "both" | "all" => Ok(Urbanicity::Both),
            "urban" => Ok(Urbanicity::Urban),
            "rural" => Ok(Urbanicity::Rural),
            s => Err(CliError::Input(format!("unknown urbanicity `{s}`"))),
        }
    }

    pub fn jackknife(&self) -> Result<JackknifeMethod, CliError> {
        match self.file.estimation.jackknife.as_deref() {
            None => Ok(JackknifeMethod::default()),
            Some(s) => JackknifeMethod::parse(s).ok_or_else(|| CliError::Input(format!("unknown jackknife method `{s}`"))),
        }
    }

    fn grouping_of(&self, width: usize) -> Result<PeriodGrouping, CliError> {
        match width {
            0 => Err(CliError::Input("period length must be positive".into())),
            1 => Ok(PeriodGrouping::Annual),
            w if self.window.n_years() % w != 0 => Err(CliError::Input(format!(
                "window {} does not split into {w}-year periods",
                self.window
            ))),
            w => Ok(PeriodGrouping::consecutive(self.window.first, self.window.last, w)),
        }
    }

    pub fn grouping(&self) -> Result<PeriodGrouping, CliError> {
        self.grouping_of(self.file.estimation.period_years.unwrap_or(1))
    }

    pub fn periods(&self) -> Result<Vec<Period>, CliError> {
        Ok(self.grouping()?.periods(self.window))
    }

    pub fn cv_periods(&self) -> Result<Vec<Period>, CliError> {
        Ok(self.grouping_of(self.file.cv.period_years.unwrap_or(3))?.periods(self.window))
    }

    pub fn sampler(&self) -> SamplerSettings {
        let s = &self.file.sampler;
        let d = SamplerSettings::default();
        SamplerSettings {
            chains: s.chains.unwrap_or(d.chains),
            burn_in: s.burn_in.unwrap_or(d.burn_in),
            draws: s.draws.unwrap_or(d.draws),
            thin: s.thin.unwrap_or(d.thin),
            seed: self.seed,
            ..d
        }
    }

    pub fn fit_options(&self) -> fertsae_models::FitOptions {
        let m = &self.file.model;
        fertsae_models::FitOptions {
            use_covariates: m.use_covariates.unwrap_or(false),
            cutoff_adjustment: m.cutoff_adjustment.unwrap_or(true),
            sampler: self.sampler(),
            ..Default::default()
        }
    }
}
