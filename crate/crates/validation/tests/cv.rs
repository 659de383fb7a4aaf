use std::collections::BTreeSet;

use fertsae_core::{tabulate, AgeGroup, Level, Period, PeriodGrouping, Urbanicity};
use fertsae_gmrf::SamplerSettings;
use fertsae_models::{fit_unit_model, FitOptions, UnitModelInput};
use fertsae_validation::{
    run_cv, simulate_survey, write_cv_report, CvModel, CvOptions, CvPlan, Population, Scheme, SimConfig,
};

fn quick(seed: u64) -> CvOptions {
    CvOptions {
        fit: FitOptions {
            sampler: SamplerSettings {
                chains: 1,
                burn_in: 150,
                draws: 150,
                ..SamplerSettings::default()
            },
            ..FitOptions::default()
        },
        seed,
        ..CvOptions::default()
    }
}

fn periods() -> Vec<Period> {
    PeriodGrouping::consecutive(2012, 2020, 3).periods(Period::new(2012, 2020).unwrap())
}

#[test]
fn area_cv_is_reproducible_and_complete() {
    let cfg = SimConfig {
        admin1: 4,
        clusters: 120,
        ..SimConfig::default()
    };
    let (out, _) = simulate_survey(&cfg).unwrap();
    let plan = CvPlan::tfr(Level::Admin1, 4, periods()).unwrap();
    let a = run_cv(&out.dataset, &plan, CvModel::Area { covariates: false }, &quick(3)).unwrap();
    let b = run_cv(&out.dataset, &plan, CvModel::Area { covariates: false }, &quick(3)).unwrap();
    assert_eq!(a.n_folds, 12);
    assert_eq!(a.n_failed(), 0);
    assert_eq!(a.report, b.report);
    assert_eq!(a.held_out.len(), 12);
    let keys: BTreeSet<_> = a.held_out.iter().map(|(k, _)| (k.area, k.period)).collect();
    assert_eq!(keys.len(), 12);
    assert!(a.report.coverage.iter().all(|c| (0.0..=1.0).contains(&c.1)));
    assert!(a.report.abs_bias + 1e-9 >= a.report.bias.abs());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cv_report.csv");
    write_cv_report(&path, &[a]).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.starts_with("model,scheme,metric,level,value,n_folds,n_failed"));
    assert_eq!(text.lines().count(), 1 + 5 + 2 * 4);
}

#[test]
fn asfr_scheme_scores_one_key_per_period() {
    let cfg = SimConfig {
        admin1: 4,
        clusters: 120,
        ..SimConfig::default()
    };
    let (out, _) = simulate_survey(&cfg).unwrap();
    let excluded = vec![AgeGroup::new(6).unwrap()];
    let plan = CvPlan::asfr(Level::Admin1, 4, periods(), excluded).unwrap();
    assert_eq!(plan.folds.len(), 4 * 6);
    assert_eq!(Scheme::parse(plan.scheme.label()), Some(Scheme::Asfr));
    let o = run_cv(&out.dataset, &plan, CvModel::Area { covariates: false }, &quick(5)).unwrap();
    assert_eq!(o.n_failed(), 0);
    assert!(o.held_out.len() <= 4 * 6 * 3 && o.held_out.len() >= 60, "{}", o.held_out.len());
    assert!(o.held_out.iter().all(|(k, _)| k.age.is_some_and(|a| a.index() < 6)));
}

/// Mean RMSE of the unit model's admin-1 log ASFR (ages 15-44) against truth.
fn recovery_rmse(clusters: usize, replicates: u64) -> f64 {
    let cfg = SimConfig {
        admin1: 4,
        clusters,
        window: Period::new(2016, 2020).unwrap(),
        psus_per_admin2: (200, 300),
        seed: 31,
        ..SimConfig::default()
    };
    let pop = Population::build(&cfg).unwrap();
    let mut total = 0.0;
    for r in 0..replicates {
        let ds = pop.sample_survey(50 + r).unwrap().dataset;
        let table = tabulate(&ds, cfg.window).unwrap();
        let input = UnitModelInput::from_table(&table, Level::Admin1, Urbanicity::Both, cfg.survey_year).unwrap();
        let opts = FitOptions {
            sampler: SamplerSettings {
                chains: 1,
                burn_in: 150,
                draws: 200,
                seed: r,
                ..SamplerSettings::default()
            },
            ..FitOptions::default()
        };
        let fit = fit_unit_model(&input, ds.graph(Level::Admin1).unwrap(), &opts).unwrap();
        let (mut sse, mut n) = (0.0, 0.0);
        for (key, d) in fit.draws.iter() {
            let Some(age) = key.age.filter(|a| a.index() < 6) else { continue };
            let mut s = d.to_vec();
            s.sort_by(f64::total_cmp);
            let med = s[s.len() / 2];
            let truth = pop.truth.asfr(Level::Admin1, key.area, Urbanicity::Both, key.period, age).unwrap();
            sse += (med.ln() - truth.ln()).powi(2);
            n += 1.0;
        }
        total += (sse / n).sqrt();
    }
    total / replicates as f64
}

#[test]
fn unit_model_recovers_truth_better_with_more_clusters() {
    let rmse: Vec<f64> = [50, 200, 800].iter().map(|&c| recovery_rmse(c, 20)).collect();
    assert!(rmse[0] > rmse[1] && rmse[1] > rmse[2], "{rmse:?}");
}
