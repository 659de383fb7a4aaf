//! Leave-one-combination-out cross-validation of the fertility models.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use fertsae_core::{
    direct_estimates, tabulate, AgeGroup, FertilityTable, Level, Period, PeriodGrouping,
    SurveyDataset, Urbanicity,
};
use fertsae_gmrf::RegionGraph;
use fertsae_models::{
    aggregate_periods, fit_fh_asfr, fit_fh_tfr, fit_unit_model, AreaModelInput, DrawTable,
    EstimateKey, FitOptions, ModelError, ModelFit, UnitModelInput,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::metrics::{score, HeldOut, IntervalScoreMode, ScoreReport};
use crate::ValidationError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Scheme {
    /// Hold out one (area, age group) across the whole window.
    Asfr,
    /// Hold out one (area, period) across all ages.
    Tfr,
}

impl Scheme {
    pub fn label(self) -> &'static str {
        match self {
            Scheme::Asfr => "asfr",
            Scheme::Tfr => "tfr",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "asfr" => Some(Scheme::Asfr),
            "tfr" => Some(Scheme::Tfr),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Fold {
    pub id: usize,
    pub area: usize,
    /// Held-out age group (ASFR scheme).
    pub age: Option<AgeGroup>,
    /// Held-out period (TFR scheme).
    pub period: Option<Period>,
}

impl Fold {
    /// True when the (area, year, age) cell belongs to this fold.
    pub fn holds(&self, area: usize, year: i32, age: Option<AgeGroup>) -> bool {
        if area != self.area {
            return false;
        }
        match (self.age, self.period) {
            (Some(a), _) => age == Some(a),
            (None, Some(p)) => p.contains(year),
            (None, None) => false,
        }
    }

    /// Keys scored for this fold, one per period for the ASFR scheme.
    pub fn scored_keys(&self, periods: &[Period]) -> Vec<EstimateKey> {
        match (self.age, self.period) {
            (Some(a), _) => periods.iter().map(|&p| EstimateKey::asfr(self.area, p, a)).collect(),
            (None, Some(p)) => vec![EstimateKey::tfr(self.area, p)],
            (None, None) => Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CvPlan {
    pub scheme: Scheme,
    pub level: Level,
    pub n_areas: usize,
    /// Consecutive reporting periods spanning the window.
    pub periods: Vec<Period>,
    /// Age groups never held out or scored.
    pub excluded_ages: Vec<AgeGroup>,
    pub folds: Vec<Fold>,
}

fn check_periods(periods: &[Period]) -> Result<(), ValidationError> {
    if periods.is_empty() {
        return Err(ValidationError::Config("no periods".into()));
    }
    for w in periods.windows(2) {
        if w[1].first != w[0].last + 1 {
            return Err(ValidationError::Config(format!("periods {} and {} are not consecutive", w[0], w[1])));
        }
    }
    Ok(())
}

impl CvPlan {
    pub fn asfr(
        level: Level,
        n_areas: usize,
        periods: Vec<Period>,
        excluded_ages: Vec<AgeGroup>,
    ) -> Result<Self, ValidationError> {
        check_periods(&periods)?;
        let mut folds = Vec::new();
        for area in 0..n_areas {
            for age in AgeGroup::all().filter(|a| !excluded_ages.contains(a)) {
                folds.push(Fold {
                    id: folds.len(),
                    area,
                    age: Some(age),
                    period: None,
                });
            }
        }
        Ok(Self {
            scheme: Scheme::Asfr,
            level,
            n_areas,
            periods,
            excluded_ages,
            folds,
        })
    }

    pub fn tfr(level: Level, n_areas: usize, periods: Vec<Period>) -> Result<Self, ValidationError> {
        check_periods(&periods)?;
        let mut folds = Vec::new();
        for area in 0..n_areas {
            for &p in &periods {
                folds.push(Fold {
                    id: folds.len(),
                    area,
                    age: None,
                    period: Some(p),
                });
            }
        }
        Ok(Self {
            scheme: Scheme::Tfr,
            level,
            n_areas,
            periods,
            excluded_ages: Vec::new(),
            folds,
        })
    }

    pub fn window(&self) -> Period {
        Period {
            first: self.periods[0].first,
            last: self.periods[self.periods.len() - 1].last,
        }
    }

    /// Every (area, year, age) cell the scheme can hold out.
    fn eligible_cells(&self) -> Vec<(usize, i32, AgeGroup)> {
        let mut out = Vec::new();
        for area in 0..self.n_areas {
            for year in self.window().years() {
                for a in AgeGroup::all().filter(|a| !self.excluded_ages.contains(a)) {
                    out.push((area, year, a));
                }
            }
        }
        out
    }

    /// Checks that the folds partition the eligible cells and their scored
    /// keys.
    pub fn audit(&self) -> Result<(), ValidationError> {
        for (area, year, a) in self.eligible_cells() {
            let n = self.folds.iter().filter(|f| f.holds(area, year, Some(a))).count();
            if n != 1 {
                return Err(ValidationError::Config(format!(
                    "cell (area {}, {year}, {a}) is held out by {n} folds",
                    area + 1
                )));
            }
        }
        let mut seen = BTreeSet::new();
        for f in &self.folds {
            for k in f.scored_keys(&self.periods) {
                if !seen.insert(k) {
                    return Err(ValidationError::Config(format!("key {k:?} is scored twice")));
                }
            }
        }
        let expected = match self.scheme {
            Scheme::Asfr => self.n_areas * self.periods.len() * (7 - self.excluded_ages.len()),
            Scheme::Tfr => self.n_areas * self.periods.len(),
        };
        if seen.len() != expected {
            return Err(ValidationError::Config(format!("{} scored keys, expected {expected}", seen.len())));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CvModel {
    /// Unit-level model pooled over urban and rural clusters.
    Unit { covariates: bool },
    Area { covariates: bool },
}

impl CvModel {
    pub fn label(self) -> &'static str {
        match self {
            CvModel::Unit { covariates: false } => "unit",
            CvModel::Unit { covariates: true } => "unit-cov",
            CvModel::Area { covariates: false } => "area",
            CvModel::Area { covariates: true } => "area-cov",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "unit" => CvModel::Unit { covariates: false },
            "unit-cov" => CvModel::Unit { covariates: true },
            "area" => CvModel::Area { covariates: false },
            "area-cov" => CvModel::Area { covariates: true },
            _ => return None,
        })
    }
}

#[derive(Debug, Clone)]
pub struct CvOptions {
    pub fit: FitOptions,
    pub levels: Vec<f64>,
    pub interval_mode: IntervalScoreMode,
    pub survey_year: i32,
    /// Start each fold's sampler at the hyperparameter mode of the full fit.
    pub warm_start: bool,
    pub seed: u64,
}

impl Default for CvOptions {
    fn default() -> Self {
        Self {
            fit: FitOptions::default(),
            levels: vec![0.5, 0.8, 0.9, 0.95],
            interval_mode: IntervalScoreMode::Printed,
            survey_year: 2021,
            warm_start: true,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CvOutcome {
    pub model: CvModel,
    pub scheme: Scheme,
    pub report: ScoreReport,
    pub n_folds: usize,
    /// Folds with no held-out key that has a usable direct estimate.
    pub n_empty: usize,
    pub failures: Vec<(usize, String)>,
    pub held_out: Vec<(EstimateKey, HeldOut)>,
}

impl CvOutcome {
    pub fn n_failed(&self) -> usize {
        self.failures.len()
    }
}

/// Seed of fold `id` under master seed `master`.
pub fn fold_seed(master: u64, id: usize) -> u64 {
    let mut z = master ^ (id as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Training data of the chosen model; each fold removes its cells from it.
enum Training {
    Unit(UnitModelInput),
    /// Yearly log TFR observations.
    AreaTfr(AreaModelInput),
    /// Log ASFR observations per period.
    AreaAsfr(Vec<(Period, AreaModelInput)>),
}

struct Context<'a> {
    plan: &'a CvPlan,
    opts: &'a CvOptions,
    graph: &'a RegionGraph,
    training: Training,
}

impl Context<'_> {
    fn fit_options(&self, seed: u64, init: Option<Vec<f64>>) -> FitOptions {
        let mut o = self.opts.fit.clone();
        o.sampler.seed = seed;
        if self.opts.warm_start {
            o.sampler.init_theta = init;
        }
        o
    }

    /// Period-level draws of the full model or of one fold.
    fn predict(
        &self,
        fold: Option<&Fold>,
        seed: u64,
        init: &[Option<Vec<f64>>],
    ) -> Result<(DrawTable, Vec<Option<Vec<f64>>>), ModelError> {
        let plan = self.plan;
        let window = plan.window();
        let keep = |area: usize, year: i32, age: Option<AgeGroup>| fold.is_none_or(|f| !f.holds(area, year, age));
        let init_at = |k: usize| init.get(k).cloned().flatten();
        let modes = |fit: &ModelFit| Some(fit.samples.diagnostics().mode_theta.clone());
        match &self.training {
            Training::Unit(input) => {
                let train = input.without(|c| !keep(c.area, c.year, Some(c.age)));
                let fit = fit_unit_model(&train, self.graph, &self.fit_options(seed, init_at(0)))?;
                let draws = aggregate_periods(&fit.draws, &plan.periods, None)?;
                Ok((draws, vec![modes(&fit)]))
            }
            Training::AreaTfr(input) => {
                let train = input.without(|k| !keep(k.area, k.period.first, k.age));
                let fit = fit_fh_tfr(&train, self.graph, window, self.opts.survey_year, &self.fit_options(seed, init_at(0)))?;
                let draws = aggregate_periods(&fit.draws, &plan.periods, None)?;
                Ok((draws, vec![modes(&fit)]))
            }
            Training::AreaAsfr(inputs) => {
                let mut out = DrawTable::new(plan.level, fertsae_models::Measure::Fertility);
                let mut m = Vec::new();
                for (k, (p, input)) in inputs.iter().enumerate() {
                    let train = input.without(|key| !keep(key.area, p.first, key.age));
                    let o = self.fit_options(fold_seed(seed, k), init_at(k));
                    let fit = fit_fh_asfr(&train, self.graph, &o)?;
                    for (key, d) in fit.draws.iter() {
                        out.insert(*key, d.to_vec());
                    }
                    m.push(modes(&fit));
                }
                Ok((out, m))
            }
        }
    }
}

fn training(
    table: &FertilityTable,
    dataset: &SurveyDataset,
    plan: &CvPlan,
    model: CvModel,
    opts: &CvOptions,
) -> Result<Training, ValidationError> {
    let n = plan.n_areas;
    let covariates = match model {
        CvModel::Unit { covariates } | CvModel::Area { covariates } => covariates,
    };
    let covs = if covariates {
        Some(dataset.covariates(plan.level).cloned().ok_or_else(|| {
            ValidationError::Config(format!("no {} covariates in the dataset", plan.level.as_str()))
        })?)
    } else {
        None
    };
    let with_covs = |input: AreaModelInput| match &covs {
        Some(c) => input.with_covariates(c.clone()),
        None => input,
    };
    Ok(match (model, plan.scheme) {
        (CvModel::Unit { .. }, _) => {
            let mut input = UnitModelInput::from_table(table, plan.level, Urbanicity::Both, opts.survey_year)?;
            if let Some(c) = &covs {
                input = input.with_covariates(c.clone());
            }
            Training::Unit(input)
        }
        (CvModel::Area { .. }, Scheme::Tfr) => {
            let est = direct_estimates(table, plan.level, Urbanicity::Both, &PeriodGrouping::Annual)?;
            Training::AreaTfr(with_covs(AreaModelInput::tfr(&est, plan.level, n)))
        }
        (CvModel::Area { .. }, Scheme::Asfr) => {
            let est = direct_estimates(table, plan.level, Urbanicity::Both, &PeriodGrouping::Blocks(plan.periods.clone()))?;
            Training::AreaAsfr(
                plan.periods
                    .iter()
                    .map(|&p| {
                        let part: Vec<_> = est.iter().filter(|e| e.key.period == p).cloned().collect();
                        (p, with_covs(AreaModelInput::asfr(&part, plan.level, n)))
                    })
                    .collect(),
            )
        }
    })
}

/// Refits `model` once per fold without the fold's cells and scores the
/// posterior of each held-out key against its log direct estimate.
pub fn run_cv(
    dataset: &SurveyDataset,
    plan: &CvPlan,
    model: CvModel,
    opts: &CvOptions,
) -> Result<CvOutcome, ValidationError> {
    plan.audit()?;
    let graph = dataset
        .graph(plan.level)
        .ok_or_else(|| ValidationError::Config("cross-validation needs a sub-national level".into()))?;
    if graph.len() != plan.n_areas {
        return Err(ValidationError::Config(format!(
            "plan has {} areas but the graph has {}",
            plan.n_areas,
            graph.len()
        )));
    }
    let table = tabulate(dataset, plan.window())?;
    let direct = direct_estimates(&table, plan.level, Urbanicity::Both, &PeriodGrouping::Blocks(plan.periods.clone()))?;
    let observed: HashMap<EstimateKey, (f64, f64)> = direct
        .iter()
        .filter_map(|e| {
            let key = EstimateKey {
                area: e.key.area,
                period: e.key.period,
                age: e.key.age,
            };
            Some((key, (e.log_point?, e.log_variance?)))
        })
        .filter(|(_, (_, v))| *v > 0.0)
        .collect();

    let ctx = Context {
        plan,
        opts,
        graph,
        training: training(&table, dataset, plan, model, opts)?,
    };
    let init = if opts.warm_start {
        ctx.predict(None, opts.seed, &[]).map_err(ValidationError::from)?.1
    } else {
        Vec::new()
    };

    let jobs: Vec<(&Fold, Vec<EstimateKey>)> = plan
        .folds
        .iter()
        .map(|f| {
            let keys = f.scored_keys(&plan.periods).into_iter().filter(|k| observed.contains_key(k)).collect();
            (f, keys)
        })
        .collect();
    let n_empty = jobs.iter().filter(|(_, k)| k.is_empty()).count();
    let results: Vec<(usize, Result<Vec<(EstimateKey, Vec<f64>)>, String>)> = jobs
        .par_iter()
        .filter(|(_, keys)| !keys.is_empty())
        .map(|(fold, keys)| {
            let r = ctx
                .predict(Some(fold), fold_seed(opts.seed, fold.id), &init)
                .map_err(|e| e.to_string())
                .and_then(|(draws, _)| {
                    keys.iter()
                        .map(|k| {
                            draws
                                .log_draws(k)
                                .map(|d| (*k, d))
                                .ok_or_else(|| format!("no prediction for {k:?}"))
                        })
                        .collect()
                });
            (fold.id, r)
        })
        .collect();

    let mut held_out = Vec::new();
    let mut failures = Vec::new();
    for (id, r) in results {
        match r {
            Ok(preds) => {
                for (k, draws) in preds {
                    let (direct, variance) = observed[&k];
                    held_out.push((k, HeldOut { draws, direct, variance }));
                }
            }
            Err(e) => failures.push((id, e)),
        }
    }
    if held_out.is_empty() {
        return Err(ValidationError::Config(format!(
            "no fold produced predictions ({} failed)",
            failures.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(fold_seed(opts.seed, usize::MAX - 1));
    let held: Vec<HeldOut> = held_out.iter().map(|(_, h)| h.clone()).collect();
    let report = score(&held, &opts.levels, opts.interval_mode, &mut rng)?;
    Ok(CvOutcome {
        model,
        scheme: plan.scheme,
        report,
        n_folds: plan.folds.len(),
        n_empty,
        failures,
        held_out,
    })
}

/// Writes `model,scheme,metric,level,value,n_folds,n_failed` rows.
pub fn write_cv_report(path: &Path, outcomes: &[CvOutcome]) -> Result<(), ValidationError> {
    #[derive(Serialize)]
    struct Row<'a> {
        model: &'a str,
        scheme: &'a str,
        metric: &'a str,
        level: Option<f64>,
        value: f64,
        n_folds: usize,
        n_failed: usize,
    }
    let mut rows = Vec::new();
    for o in outcomes {
        let r = &o.report;
        let row = |metric, level, value| Row {
            model: o.model.label(),
            scheme: o.scheme.label(),
            metric,
            level,
            value,
            n_folds: o.n_folds,
            n_failed: o.n_failed(),
        };
        for (m, v) in [
            ("bias", r.bias),
            ("abs_bias", r.abs_bias),
            ("rel_bias", r.rel_bias),
            ("abs_rel_bias", r.abs_rel_bias),
            ("rmse", r.rmse),
        ] {
            rows.push(row(m, None, v));
        }
        for &(l, v) in &r.coverage {
            rows.push(row("coverage", Some(l), v));
        }
        for &(l, v) in &r.interval_score {
            rows.push(row("interval_score", Some(l), v));
        }
    }
    fertsae_core::io::write_rows(path, rows)?;
    Ok(())
}
