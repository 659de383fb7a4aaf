use fertsae_core::{write_dataset, AgeGroup, Level, Period, Urbanicity};
use fertsae_models::UrbanFractionTable;
use fertsae_validation::{simulate_survey, Population, SimConfig};

fn small() -> SimConfig {
    SimConfig {
        admin1: 4,
        clusters: 96,
        ..SimConfig::default()
    }
}

fn files(cfg: &SimConfig, dir: &std::path::Path) -> Vec<Vec<u8>> {
    let (out, _) = simulate_survey(cfg).unwrap();
    let paths = write_dataset(&out.dataset, dir).unwrap();
    [&paths.women, &paths.births, &paths.clusters]
        .iter()
        .map(|p| std::fs::read(p).unwrap())
        .collect()
}

#[test]
fn same_seed_gives_identical_files() {
    let dir = tempfile::tempdir().unwrap();
    let a = files(&small(), &dir.path().join("a"));
    let b = files(&small(), &dir.path().join("b"));
    assert_eq!(a, b);
    let c = files(&SimConfig { seed: 2, ..small() }, &dir.path().join("c"));
    assert_ne!(a, c);
}

#[test]
fn zero_fertility_gives_no_births() {
    let cfg = SimConfig {
        fertility_scale: 0.0,
        ..small()
    };
    for seed in 0..3 {
        let pop = Population::build(&cfg).unwrap();
        let out = pop.sample_survey(seed).unwrap();
        assert!(!out.dataset.women().is_empty());
        assert!(out.dataset.births().is_empty());
    }
}

#[test]
fn infeasible_designs_are_errors() {
    // 8 strata cannot each get a cluster
    assert!(simulate_survey(&SimConfig { clusters: 7, ..small() }).is_err());
    assert!(simulate_survey(&SimConfig { households_per_psu: (10, 20), ..small() }).is_err());
    assert!(simulate_survey(&SimConfig { window: Period::year(2021), ..small() }).is_err());
}

#[test]
fn weights_recover_the_household_total() {
    let pop = Population::build(&small()).unwrap();
    let frame: f64 = pop.frame.iter().map(|p| p.households as f64).sum();
    let ds = pop.sample_survey(4).unwrap().dataset;
    let mut weight = vec![None; ds.clusters().len()];
    for (i, w) in ds.women().iter().enumerate() {
        weight[ds.cluster_of(i)] = Some(w.weight);
    }
    // a cluster with no women carries no weight, so allow a small shortfall
    let est: f64 = weight.iter().flatten().map(|w| w * pop.config.households_per_cluster as f64).sum();
    assert!(est <= frame * (1.0 + 1e-9));
    assert!(est > 0.98 * frame, "{est} vs {frame}");
}

#[test]
fn full_displacement_empties_the_cutoff_year() {
    let cfg = SimConfig {
        displacement: 1.0,
        ..small()
    };
    let out = simulate_survey(&cfg).unwrap().0;
    assert!(out.displaced > 0);
    let cutoff = cfg.survey_year - 5;
    assert!(out.dataset.births().iter().all(|b| b.birth.year() != cutoff));
}

#[test]
fn oversampling_raises_the_urban_cluster_share() {
    let share = |f: f64| {
        let out = simulate_survey(&SimConfig { urban_oversampling: f, ..small() }).unwrap().0;
        let c = out.dataset.clusters();
        c.iter().filter(|c| c.urban).count() as f64 / c.len() as f64
    };
    assert!(share(3.0) > share(1.0) + 0.1);
}

#[test]
fn truth_follows_the_tfr_trend() {
    let pop = Population::build(&SimConfig::default()).unwrap();
    let t = &pop.truth;
    let first = t.tfr(Level::National, 0, Urbanicity::Both, Period::year(2012)).unwrap();
    let last = t.tfr(Level::National, 0, Urbanicity::Both, Period::year(2020)).unwrap();
    assert!((first - 4.7).abs() < 0.2, "{first}");
    assert!((last - 4.3).abs() < 0.2, "{last}");
    let urban = t.tfr(Level::National, 0, Urbanicity::Urban, Period::year(2020)).unwrap();
    let rural = t.tfr(Level::National, 0, Urbanicity::Rural, Period::year(2020)).unwrap();
    assert!(urban < last && last < rural);
}

#[test]
fn grid_fractions_match_truth_populations() {
    let pop = Population::build(&small()).unwrap();
    let window = pop.truth.window;
    let n = pop.geography.n_admin2();
    let from_grid = UrbanFractionTable::from_grid(&pop.grid(), n, window).unwrap();
    let truth = pop.truth.urban_fractions(Level::Admin2, window).unwrap();
    for area in 0..n {
        for age in AgeGroup::all() {
            let (a, b) = (from_grid.get(area, window, age).unwrap(), truth.get(area, window, age).unwrap());
            assert!((0.0..=1.0).contains(&a));
            assert!((a - b).abs() < 1e-9, "area {area}: {a} vs {b}");
        }
    }
}

#[test]
fn truth_csv_has_one_row_per_cell() {
    let pop = Population::build(&small()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("sim_truth.csv");
    pop.truth.write_csv(&path).unwrap();
    let rows = csv::Reader::from_path(&path).unwrap().records().count();
    assert_eq!(rows, pop.geography.n_admin2() * 2 * 9 * 7);
}
