use std::collections::HashMap;
use std::path::{Path, PathBuf};

use fertsae_core::io::{read_rows, write_rows};
use fertsae_core::{
    aggregate_cells, direct_estimates_with, load_dataset, tabulate, write_covariates, write_dataset,
    write_direct_estimates, AgeGroup, CovariateTable, DatasetPaths, FertilityTable, Level, LoadMode,
    Period, PeriodGrouping, RegionGraph, SurveyDataset, Urbanicity,
};
use fertsae_models::{
    aggregate_areas, aggregate_periods, aggregate_ur, exceedance_probability, fit_fh_asfr,
    fit_fh_covariate, fit_fh_tfr, fit_stratified, fit_unit_model, read_draws, variance_decomposition,
    write_draws, write_exceedance, write_samples, write_smoothed, AreaModelInput, DrawTable,
    EstimateKey, GridLayer, ModelFit, SmoothedEstimate, UnitModelInput, UrbanFractionTable,
};
use fertsae_validation::{
    run_cv, write_cv_report, CvModel, CvOptions, CvPlan, IntervalScoreMode, Population, Scheme,
    SimConfig,
};
use serde::{Deserialize, Serialize};

use crate::config::{parse_age, RunConfig};
use crate::CliError;

fn create_out(rc: &RunConfig) -> Result<&Path, CliError> {
    std::fs::create_dir_all(&rc.out)
        .map_err(|e| CliError::Input(format!("{}: {e}", rc.out.display())))?;
    Ok(&rc.out)
}

fn load(rc: &RunConfig) -> Result<SurveyDataset, CliError> {
    let dir = rc.data_dir()?;
    let mode = if rc.file.data.strict.unwrap_or(false) {
        LoadMode::Strict
    } else {
        LoadMode::Lenient
    };
    let (ds, report) = load_dataset(&DatasetPaths::in_dir(dir), mode)?;
    eprintln!("{report}");
    Ok(ds)
}

fn graph(ds: &SurveyDataset, level: Level) -> Result<&RegionGraph, CliError> {
    ds.graph(level)
        .ok_or_else(|| CliError::Input("models need --level admin1 or admin2".into()))
}

fn covariates(rc: &RunConfig, ds: &SurveyDataset) -> Result<Option<CovariateTable>, CliError> {
    if !rc.file.model.use_covariates.unwrap_or(false) {
        return Ok(None);
    }
    ds.covariates(rc.level)
        .cloned()
        .map(Some)
        .ok_or_else(|| CliError::Input(format!("no covariates_{}.csv in the data directory", rc.level)))
}

fn report_flags(fit_flags: &[String]) {
    for f in fit_flags {
        eprintln!("warning: {f}");
    }
}

fn with_periods(rc: &RunConfig, yearly: &DrawTable) -> Result<DrawTable, CliError> {
    let mut out = yearly.clone();
    if !matches!(rc.grouping()?, PeriodGrouping::Annual) {
        let agg = aggregate_periods(yearly, &rc.periods()?, None)?;
        for (k, d) in agg.iter() {
            out.insert(*k, d.to_vec());
        }
    }
    Ok(out)
}

/// Survey-weighted woman-years per (area, age group) over the window.
fn exposure_weights(table: &FertilityTable, level: Level) -> Result<HashMap<(usize, usize), f64>, CliError> {
    let agg = aggregate_cells(table, level, Urbanicity::Both, &PeriodGrouping::Blocks(vec![table.window]))?;
    let mut w = HashMap::new();
    for (k, c) in &agg.cells {
        *w.entry((k.unit, k.age.index())).or_insert(0.0) += c.weighted_exposure;
    }
    Ok(w)
}

/// National draws as exposure-weighted averages of area draws.
fn national(table: &FertilityTable, level: Level, draws: &DrawTable) -> Result<DrawTable, CliError> {
    let w = exposure_weights(table, level)?;
    let parent = vec![0; table.n_areas(level)];
    let weight = |i: usize, a: Option<AgeGroup>| match a {
        Some(a) => w.get(&(i, a.index())).copied().unwrap_or(0.0),
        None => (0..7).map(|a| w.get(&(i, a)).copied().unwrap_or(0.0)).sum(),
    };
    Ok(aggregate_areas(draws, &parent, Level::National, &weight)?)
}

#[derive(Serialize)]
struct SegmentRow {
    level: String,
    area_id: usize,
    period: String,
    age_group: String,
    segment: f64,
    tfr: f64,
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    fertsae_core::quantile_sorted(&s, 0.5)
}

/// TFR split into age segments of height `5 · ASFR / 1000` (posterior
/// medians).
fn write_tfr_decomposition(path: &Path, tables: &[&DrawTable]) -> Result<(), CliError> {
    let mut rows = Vec::new();
    for t in tables {
        for (key, tfr) in t.iter().filter(|(k, _)| k.age.is_none()) {
            let tfr = median(tfr);
            for a in AgeGroup::all() {
                let Some(d) = t.get(&EstimateKey::asfr(key.area, key.period, a)) else { continue };
                let seg: Vec<f64> = d.iter().map(|v| 5.0 * v / 1000.0).collect();
                rows.push(SegmentRow {
                    level: t.level.to_string(),
                    area_id: key.area + 1,
                    period: key.period.to_string(),
                    age_group: a.label(),
                    segment: median(&seg),
                    tfr,
                });
            }
        }
    }
    write_rows(path, rows)?;
    Ok(())
}

fn write_decomposition(path: &Path, fit: &ModelFit, exclude: &[AgeGroup]) -> Result<(), CliError> {
    #[derive(Serialize)]
    struct Row {
        component: &'static str,
        variance: f64,
        share: f64,
    }
    let dec = variance_decomposition(fit, exclude);
    write_rows(
        path,
        dec.components.iter().map(|&(c, variance, share)| Row {
            component: c.label(),
            variance,
            share,
        }),
    )?;
    Ok(())
}

fn decomposition_exclude(rc: &RunConfig) -> Result<Vec<AgeGroup>, CliError> {
    match &rc.file.model.decomposition_exclude {
        Some(v) => v.iter().map(|s| parse_age(s)).collect(),
        None => Ok(vec![AgeGroup::new(6).expect("seven groups")]),
    }
}

fn fractions(rc: &RunConfig, n_areas: usize) -> Result<UrbanFractionTable, CliError> {
    if let Some(p) = &rc.file.data.urban_fractions {
        return Ok(UrbanFractionTable::read_csv(p)?);
    }
    if let Some(p) = &rc.file.data.grid {
        let grid = GridLayer::read_csv(p)?;
        return Ok(UrbanFractionTable::from_grid(&grid, n_areas, rc.window)?);
    }
    Err(CliError::Input("urban/rural aggregation needs [data] urban_fractions or grid".into()))
}

fn thresholds(rc: &RunConfig) -> Vec<f64> {
    rc.file.aggregate.thresholds.clone().unwrap_or_else(|| vec![1.0])
}

pub fn simulate(rc: &RunConfig) -> Result<(), CliError> {
    let s = &rc.file.simulate;
    let d = SimConfig::default();
    let cfg = SimConfig {
        admin1: s.admin1.unwrap_or(d.admin1),
        subdivision: s.subdivision.unwrap_or(d.subdivision),
        survey_year: rc.survey_year,
        window: rc.window,
        clusters: s.clusters.unwrap_or(d.clusters),
        households_per_cluster: s.households_per_cluster.unwrap_or(d.households_per_cluster),
        women_per_household: s.women_per_household.unwrap_or(d.women_per_household),
        urban_oversampling: s.urban_oversampling.unwrap_or(d.urban_oversampling),
        tfr_start: s.tfr_start.unwrap_or(d.tfr_start),
        tfr_end: s.tfr_end.unwrap_or(d.tfr_end),
        urban_log_effect: s.urban_log_effect.unwrap_or(d.urban_log_effect),
        displacement: s.displacement.unwrap_or(d.displacement),
        fertility_scale: s.fertility_scale.unwrap_or(d.fertility_scale),
        frailty_shape: s.frailty_shape.or(d.frailty_shape),
        seed: rc.seed,
        ..d
    };
    let pop = Population::build(&cfg)?;
    let sim = pop.sample_survey(rc.seed)?;
    let out = create_out(rc)?;
    write_dataset(&sim.dataset, out)?;
    pop.truth.write_csv(&out.join("sim_truth.csv"))?;
    pop.grid().write_csv(&out.join("grid.csv"))?;
    pop.truth.urban_fractions(rc.level, rc.window)?.write_csv(&out.join("urban_fractions.csv"))?;
    eprintln!(
        "simulated {} women, {} births, {} clusters ({} displaced births)",
        sim.dataset.women().len(),
        sim.dataset.births().len(),
        sim.dataset.clusters().len(),
        sim.displaced
    );
    Ok(())
}

pub fn direct(rc: &RunConfig) -> Result<(), CliError> {
    let ds = load(rc)?;
    let table = tabulate(&ds, rc.window)?;
    let est = direct_estimates_with(&table, rc.level, rc.urbanicity()?, &rc.grouping()?, rc.jackknife()?)?;
    let out = create_out(rc)?;
    write_direct_estimates(&out.join("direct_estimates.csv"), &est)?;

    #[derive(Serialize)]
    struct TrendRow {
        year: i32,
        age_group: String,
        urbanicity: &'static str,
        point: Option<f64>,
        variance: Option<f64>,
        log_point: Option<f64>,
        log_variance: Option<f64>,
    }
    let mut rows = Vec::new();
    for (u, label) in [(Urbanicity::Urban, "urban"), (Urbanicity::Rural, "rural")] {
        let est = direct_estimates_with(&table, Level::National, u, &PeriodGrouping::Annual, rc.jackknife()?)?;
        for year in rc.window.years() {
            for age in AgeGroup::all() {
                // cells no interviewed woman was exposed in stay blank
                let e = est.iter().find(|e| e.key.age == Some(age) && e.key.period == Period::year(year));
                rows.push(TrendRow {
                    year,
                    age_group: age.label(),
                    urbanicity: label,
                    point: e.map(|e| e.point),
                    variance: e.and_then(|e| e.variance),
                    log_point: e.and_then(|e| e.log_point),
                    log_variance: e.and_then(|e| e.log_variance),
                });
            }
        }
    }
    rows.sort_by(|a, b| (a.year, &a.age_group, a.urbanicity).cmp(&(b.year, &b.age_group, b.urbanicity)));
    write_rows(&out.join("national_trend.csv"), rows)?;
    eprintln!("{} direct estimates", est.len());
    Ok(())
}

pub fn fit_area_asfr(rc: &RunConfig) -> Result<(), CliError> {
    let ds = load(rc)?;
    let g = graph(&ds, rc.level)?;
    let table = tabulate(&ds, rc.window)?;
    let est = direct_estimates_with(&table, rc.level, rc.urbanicity()?, &rc.grouping()?, rc.jackknife()?)?;
    let covs = covariates(rc, &ds)?;
    let opts = rc.fit_options();
    let out = create_out(rc)?;
    let periods = rc.periods()?;
    let mut smoothed = Vec::new();
    let mut tables = Vec::new();
    for p in &periods {
        let part: Vec<_> = est.iter().filter(|e| e.key.period == *p).cloned().collect();
        let mut input = AreaModelInput::asfr(&part, rc.level, ds.n_areas(rc.level));
        for (k, why) in &input.excluded {
            eprintln!("excluded area {} {:?}: {why}", k.area + 1, k.age.map(AgeGroup::label));
        }
        if let Some(c) = &covs {
            input = input.with_covariates(c.clone());
        }
        let fit = fit_fh_asfr(&input, g, &opts)?;
        report_flags(&fit.flags);
        let name = if periods.len() == 1 {
            "samples.csv".to_string()
        } else {
            format!("samples_{p}.csv")
        };
        write_samples(&out.join(name), &fit.samples)?;
        smoothed.extend(fit.draws.summaries(&fit.model));
        tables.push(fit.draws);
    }
    write_smoothed(out, &smoothed)?;
    write_tfr_decomposition(&out.join("tfr_decomposition.csv"), &tables.iter().collect::<Vec<_>>())?;
    Ok(())
}

pub fn fit_area_tfr(rc: &RunConfig) -> Result<(), CliError> {
    let ds = load(rc)?;
    let g = graph(&ds, rc.level)?;
    let table = tabulate(&ds, rc.window)?;
    let est = direct_estimates_with(&table, rc.level, rc.urbanicity()?, &PeriodGrouping::Annual, rc.jackknife()?)?;
    let mut input = AreaModelInput::tfr(&est, rc.level, ds.n_areas(rc.level));
    if let Some(c) = covariates(rc, &ds)? {
        input = input.with_covariates(c);
    }
    let fit = fit_fh_tfr(&input, g, rc.window, rc.survey_year, &rc.fit_options())?;
    report_flags(&fit.flags);
    let draws = with_periods(rc, &fit.draws)?;
    let out = create_out(rc)?;
    write_smoothed(out, &draws.summaries(&fit.model))?;
    write_samples(&out.join("samples.csv"), &fit.samples)?;
    Ok(())
}

fn write_fit(dir: &Path, rc: &RunConfig, fit: &ModelFit, table: &FertilityTable) -> Result<DrawTable, CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Input(format!("{}: {e}", dir.display())))?;
    let draws = with_periods(rc, &fit.draws)?;
    let nat = with_periods(rc, &national(table, rc.level, &fit.draws)?)?;
    let mut smoothed: Vec<SmoothedEstimate> = draws.summaries(&fit.model);
    smoothed.extend(nat.summaries(&fit.model));
    write_smoothed(dir, &smoothed)?;
    write_samples(&dir.join("samples.csv"), &fit.samples)?;
    write_draws(&dir.join("draws.csv"), &fit.draws)?;
    write_decomposition(&dir.join("variance_decomposition.csv"), fit, &decomposition_exclude(rc)?)?;
    write_tfr_decomposition(&dir.join("tfr_decomposition.csv"), &[&draws, &nat])?;
    Ok(draws)
}

pub fn fit_unit(rc: &RunConfig) -> Result<(), CliError> {
    let ds = load(rc)?;
    let g = graph(&ds, rc.level)?;
    let table = tabulate(&ds, rc.window)?;
    let covs = covariates(rc, &ds)?;
    let opts = rc.fit_options();
    let out = create_out(rc)?.to_path_buf();
    if !rc.file.model.stratified.unwrap_or(false) {
        let mut input = UnitModelInput::from_table(&table, rc.level, rc.urbanicity()?, rc.survey_year)?;
        if let Some(c) = covs {
            input = input.with_covariates(c);
        }
        let fit = fit_unit_model(&input, g, &opts)?;
        report_flags(&fit.flags);
        write_fit(&out, rc, &fit, &table)?;
        return Ok(());
    }
    let fr = fractions(rc, ds.n_areas(rc.level))?;
    let strat = fit_stratified(&table, rc.level, rc.survey_year, covs.as_ref(), g, &opts)?;
    report_flags(&strat.flags);
    for (fit, name) in [(&strat.urban, "urban"), (&strat.rural, "rural")] {
        if let Some(f) = fit {
            report_flags(&f.flags);
            write_fit(&out.join(name), rc, f, &table)?;
        }
    }
    let combined = aggregate_ur(
        strat.urban.as_ref().map(|f| &f.draws),
        strat.rural.as_ref().map(|f| &f.draws),
        &fr,
        rc.seed,
    )?;
    report_flags(&combined.flags);
    write_combined(&out, rc, &combined.draws, Some(&table), strat.urban.as_ref().map(|f| &f.draws), strat.rural.as_ref().map(|f| &f.draws))
}

fn write_combined(
    out: &Path,
    rc: &RunConfig,
    combined: &DrawTable,
    table: Option<&FertilityTable>,
    urban: Option<&DrawTable>,
    rural: Option<&DrawTable>,
) -> Result<(), CliError> {
    let draws = with_periods(rc, combined)?;
    let mut smoothed = draws.summaries("combined");
    let mut tables = vec![draws];
    if let Some(t) = table {
        let nat = with_periods(rc, &national(t, rc.level, combined)?)?;
        smoothed.extend(nat.summaries("combined"));
        tables.push(nat);
    }
    write_smoothed(out, &smoothed)?;
    write_draws(&out.join("draws.csv"), combined)?;
    write_tfr_decomposition(&out.join("tfr_decomposition.csv"), &tables.iter().collect::<Vec<_>>())?;
    let mut exc = Vec::new();
    if let (Some(u), Some(r)) = (urban, rural) {
        let (u, r) = (with_periods(rc, u)?, with_periods(rc, r)?);
        for t in thresholds(rc) {
            exc.extend(exceedance_probability(&u, &r, t));
        }
    }
    write_exceedance(&out.join("exceedance.csv"), &exc)?;
    Ok(())
}

pub fn aggregate(rc: &RunConfig) -> Result<(), CliError> {
    let a = &rc.file.aggregate;
    let path = |p: &Option<PathBuf>, which: &str| -> Result<Option<DrawTable>, CliError> {
        match p {
            Some(p) => Ok(Some(read_draws(p)?)),
            None => {
                eprintln!("warning: no {which} draws given");
                Ok(None)
            }
        }
    };
    let urban = path(&a.urban_draws, "urban")?;
    let rural = path(&a.rural_draws, "rural")?;
    let n_areas = urban
        .iter()
        .chain(&rural)
        .flat_map(|t| t.keys().iter().map(|k| k.area + 1))
        .max()
        .ok_or_else(|| CliError::Input("aggregate-ur needs [aggregate] urban_draws and/or rural_draws".into()))?;
    let fr = fractions(rc, n_areas)?;
    let combined = aggregate_ur(urban.as_ref(), rural.as_ref(), &fr, rc.seed)?;
    report_flags(&combined.flags);
    let out = create_out(rc)?;
    write_combined(out, rc, &combined.draws, None, urban.as_ref(), rural.as_ref())
}

#[derive(Deserialize)]
struct ProportionRow {
    covariate: String,
    area_id: usize,
    p: f64,
    variance: f64,
}

pub fn fit_covariates(rc: &RunConfig) -> Result<(), CliError> {
    let path = rc
        .file
        .data
        .proportions
        .as_ref()
        .ok_or_else(|| CliError::Input("fit-covariates needs [data] proportions".into()))?;
    let rows: Vec<ProportionRow> = read_rows(path)?;
    let dir = rc.data_dir()?;
    let adj = dir.join(match rc.level {
        Level::Admin1 => "admin1.adj",
        Level::Admin2 => "admin2.adj",
        Level::National => return Err(CliError::Input("covariates need a sub-national level".into())),
    });
    let g = fertsae_core::read_adjacency(&adj)?;
    let mut names: Vec<String> = rows.iter().map(|r| r.covariate.clone()).collect();
    names.dedup();
    names.sort();
    names.dedup();
    let period = Period::year(rc.survey_year);
    let mut values = vec![vec![f64::NAN; names.len()]; g.len()];
    let mut smoothed = Vec::new();
    let opts = rc.fit_options();
    for (j, name) in names.iter().enumerate() {
        let mut props = Vec::new();
        for r in rows.iter().filter(|r| &r.covariate == name) {
            if r.area_id == 0 || r.area_id > g.len() {
                return Err(CliError::Input(format!("{}: area_id {} out of range", path.display(), r.area_id)));
            }
            props.push((r.area_id - 1, r.p, r.variance));
        }
        let input = AreaModelInput::proportions(&props, rc.level, g.len(), period);
        let fit = fit_fh_covariate(&input, &g, &opts)?;
        report_flags(&fit.flags);
        for (k, d) in fit.draws.iter() {
            values[k.area][j] = median(d);
        }
        smoothed.extend(fit.draws.summaries(&format!("covariate-{name}")));
    }
    let out = create_out(rc)?;
    write_smoothed(out, &smoothed)?;
    write_covariates(
        &CovariateTable {
            level: rc.level,
            names,
            values,
        },
        &out.join(format!("covariates_{}.csv", rc.level)),
    )?;
    Ok(())
}

pub fn cv(rc: &RunConfig) -> Result<(), CliError> {
    let ds = load(rc)?;
    let c = &rc.file.cv;
    let n = ds.n_areas(rc.level);
    let periods = rc.cv_periods()?;
    let exclude: Vec<AgeGroup> = match &c.exclude_ages {
        Some(v) => v.iter().map(|s| parse_age(s)).collect::<Result<_, _>>()?,
        None => vec![AgeGroup::new(6).expect("seven groups")],
    };
    let schemes: Vec<Scheme> = match &c.schemes {
        Some(v) => v
            .iter()
            .map(|s| Scheme::parse(s).ok_or_else(|| CliError::Input(format!("unknown scheme `{s}`"))))
            .collect::<Result<_, _>>()?,
        None => vec![Scheme::Asfr, Scheme::Tfr],
    };
    let has_covs = ds.covariates(rc.level).is_some();
    let models: Vec<CvModel> = match &c.models {
        Some(v) => v
            .iter()
            .map(|s| CvModel::parse(s).ok_or_else(|| CliError::Input(format!("unknown model `{s}`"))))
            .collect::<Result<_, _>>()?,
        None => ["unit", "unit-cov", "area", "area-cov"]
            .iter()
            .filter(|m| has_covs || !m.ends_with("-cov"))
            .map(|m| CvModel::parse(m).expect("known"))
            .collect(),
    };
    let interval_mode = match c.interval_score.as_deref().unwrap_or("printed") {
        "printed" => IntervalScoreMode::Printed,
        "literature" => IntervalScoreMode::Literature,
        s => return Err(CliError::Input(format!("unknown interval score mode `{s}`"))),
    };
    let opts = CvOptions {
        fit: rc.fit_options(),
        levels: c.levels.clone().unwrap_or_else(|| CvOptions::default().levels),
        interval_mode,
        survey_year: rc.survey_year,
        seed: rc.seed,
        ..CvOptions::default()
    };
    let mut outcomes = Vec::new();
    for &scheme in &schemes {
        let plan = match scheme {
            Scheme::Asfr => CvPlan::asfr(rc.level, n, periods.clone(), exclude.clone())?,
            Scheme::Tfr => CvPlan::tfr(rc.level, n, periods.clone())?,
        };
        for &m in &models {
            let o = run_cv(&ds, &plan, m, &opts)?;
            eprintln!(
                "{} {}: {} folds, {} failed, {} keys scored",
                m.label(),
                scheme.label(),
                o.n_folds,
                o.n_failed(),
                o.report.n
            );
            for (id, why) in &o.failures {
                eprintln!("  fold {id} failed: {why}");
            }
            outcomes.push(o);
        }
    }
    let out = create_out(rc)?;
    write_cv_report(&out.join("cv_report.csv"), &outcomes)?;
    Ok(())
}
