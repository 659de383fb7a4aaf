use fertsae_core::{AgeGroup, Level, Period, Urbanicity, N_AGE_GROUPS};
use fertsae_gmrf::{RegionGraph, SamplerSettings};
use fertsae_models::{
    fit_unit_model, tfr_identity_gap, variance_decomposition, Component, EstimateKey, FitOptions,
    UnitCell, UnitModelInput,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal, Poisson};

const YEARS: Period = Period {
    first: 2016,
    last: 2020,
};

fn opts(seed: u64) -> FitOptions {
    FitOptions {
        sampler: SamplerSettings {
            chains: 2,
            burn_in: 300,
            draws: 300,
            seed,
            ..SamplerSettings::default()
        },
        ..FitOptions::default()
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

struct Truth {
    space: Vec<f64>,
}

impl Truth {
    fn log_rate(&self, area: usize, year: i32, age: usize) -> f64 {
        let profile = [-2.5, -1.6, -1.5, -1.7, -2.1, -2.9, -4.3];
        profile[age] + self.space[area] - 0.03 * (year - YEARS.first) as f64
    }
}

/// `cells_per_row` cells per (area, year, age); `d = None` gives Poisson data.
fn simulate(
    n_areas: usize,
    cells_per_row: usize,
    space_sd: f64,
    d: Option<f64>,
    exposure: (f64, f64),
    seed: u64,
) -> (UnitModelInput, Truth) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, space_sd).unwrap();
    let mut space: Vec<f64> = (0..n_areas).map(|_| normal.sample(&mut rng)).collect();
    let mean = space.iter().sum::<f64>() / n_areas as f64;
    space.iter_mut().for_each(|s| *s -= mean);
    let truth = Truth { space };
    let mut cells = Vec::new();
    for area in 0..n_areas {
        for year in YEARS.years() {
            for age in 0..N_AGE_GROUPS {
                for c in 0..cells_per_row {
                    let exposure = rng.random_range(exposure.0..exposure.1);
                    let mu = exposure * truth.log_rate(area, year, age).exp();
                    let lambda = match d {
                        Some(d) => Gamma::new(d, mu / d).unwrap().sample(&mut rng),
                        None => mu,
                    };
                    let births = if lambda > 0.0 {
                        Poisson::new(lambda).unwrap().sample(&mut rng) as u64
                    } else {
                        0
                    };
                    cells.push(UnitCell {
                        cluster: area * cells_per_row + c,
                        area,
                        year,
                        age: AgeGroup::new(age).unwrap(),
                        births,
                        exposure,
                    });
                }
            }
        }
    }
    let input = UnitModelInput {
        level: Level::Admin1,
        n_areas,
        urbanicity: Urbanicity::Both,
        years: YEARS,
        survey_year: 2021,
        cells,
        dropped: 0,
        covariates: None,
    };
    (input, truth)
}

#[test]
fn unit_fit_reports_positive_rates_with_exact_tfr_identity() {
    let (input, truth) = simulate(4, 3, 0.3, Some(10.0), (2.0, 10.0), 1);
    let graph = RegionGraph::path(4);
    let fit = fit_unit_model(&input, &graph, &opts(7)).unwrap();
    assert_eq!(fit.draws.len(), 4 * 5 * (N_AGE_GROUPS + 1));
    assert!(fit.draws.iter().all(|(_, d)| d.iter().all(|v| *v > 0.0 && v.is_finite())));
    assert!(tfr_identity_gap(&fit.draws) <= 1e-12);
    assert!(fit.max_constraint_residual() <= 1e-8);

    let mut err = 0.0;
    let mut n = 0.0;
    for area in 0..4 {
        for year in YEARS.years() {
            for a in AgeGroup::all() {
                let key = EstimateKey::asfr(area, Period::year(year), a);
                let m = median(fit.draws.log_draws(&key).unwrap());
                err += (m - truth.log_rate(area, year, a.index())).powi(2);
                n += 1.0;
            }
        }
    }
    assert!((err / n).sqrt() < 0.25, "rmse {}", (err / n).sqrt());

    let again = fit_unit_model(&input, &graph, &opts(7)).unwrap();
    assert_eq!(fit.samples.draws(), again.samples.draws());
}

#[test]
fn poisson_data_push_overdispersion_to_large_values() {
    // 4 areas × 5 years × 7 ages × 15 = 2,100 cells
    let (input, _) = simulate(4, 15, 0.2, None, (20.0, 60.0), 2);
    let fit = fit_unit_model(&input, &RegionGraph::path(4), &opts(3)).unwrap();
    let d = median(fit.samples.column_by_name("d").unwrap());
    assert!(d > 50.0, "median d = {d}");
}

#[test]
fn overdispersion_is_recovered_over_replicates() {
    let mut meds = Vec::new();
    for rep in 0..3 {
        let (input, _) = simulate(4, 15, 0.2, Some(5.0), (2.0, 10.0), 10 + rep);
        let fit = fit_unit_model(&input, &RegionGraph::path(4), &opts(4 + rep)).unwrap();
        meds.push(median(fit.samples.column_by_name("d").unwrap()));
    }
    let mean = meds.iter().sum::<f64>() / meds.len() as f64;
    assert!((3.0..=8.0).contains(&mean), "{meds:?}");
}

#[test]
fn splitting_cells_leaves_rates_unchanged() {
    let (input, _) = simulate(3, 2, 0.3, None, (2.0, 10.0), 5);
    // binomial thinning of Poisson counts gives independent Poisson halves
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    let mut split = input.clone();
    split.cells = input
        .cells
        .iter()
        .flat_map(|c| {
            let first = (0..c.births).filter(|_| rng.random_bool(0.5)).count() as u64;
            let half = |births| UnitCell {
                births,
                exposure: c.exposure / 2.0,
                ..*c
            };
            [half(first), half(c.births - first)]
        })
        .collect();
    let graph = RegionGraph::path(3);
    let mut o = opts(8);
    o.sampler.draws = 800;
    let a = fit_unit_model(&input, &graph, &o).unwrap();
    let b = fit_unit_model(&split, &graph, &o).unwrap();
    let mut total = 0.0;
    let mut n = 0.0;
    for (k, d) in a.draws.iter().filter(|(k, _)| k.age.is_some()) {
        let ma = median(d.iter().map(|v| v.ln()).collect());
        let mb = median(b.draws.get(k).unwrap().iter().map(|v| v.ln()).collect());
        assert!((ma - mb).abs() < 0.15, "{k:?}: {ma} vs {mb}");
        total += (ma - mb).abs();
        n += 1.0;
    }
    assert!(total / n < 0.04, "mean gap {}", total / n);
}

#[test]
fn strong_spatial_signal_dominates_the_decomposition() {
    let (input, _) = simulate(6, 3, 1.0, Some(20.0), (2.0, 10.0), 6);
    let fit = fit_unit_model(&input, &RegionGraph::path(6), &opts(9)).unwrap();
    let dec = variance_decomposition(&fit, &[AgeGroup::new(6).unwrap()]);
    let sum: f64 = dec.components.iter().map(|c| c.2).sum();
    assert!((sum - 1.0).abs() < 1e-9);
    assert!(dec.components.iter().all(|c| c.1 >= 0.0));
    let space = dec.share(Component::Space).unwrap();
    for c in [Component::Time, Component::SpaceTime, Component::SpaceAge, Component::TimeAge] {
        assert!(space > dec.share(c).unwrap(), "{dec:?}");
    }
}

#[test]
fn unit_model_input_checks() {
    let (input, _) = simulate(3, 1, 0.2, None, (2.0, 10.0), 7);
    let graph = RegionGraph::path(3);
    assert!(fit_unit_model(&input, &RegionGraph::path(4), &opts(1)).is_err());
    let mut short = input.clone();
    short.years = Period::new(2019, 2020).unwrap();
    short.cells.retain(|c| c.year >= 2019);
    assert!(fit_unit_model(&short, &graph, &opts(1)).is_err());
    let empty = input.without(|_| true);
    assert!(fit_unit_model(&empty, &graph, &opts(1)).is_err());

    // an area with no clusters is still predicted, and flagged
    let sparse = input.without(|c| c.area == 1);
    let fit = fit_unit_model(&sparse, &graph, &opts(2)).unwrap();
    assert!(fit.flags.iter().any(|f| f.contains("area 2")));
    let key = EstimateKey::tfr(1, Period::year(2018));
    assert!(fit.draws.get(&key).unwrap().iter().all(|v| v.is_finite()));
}
