use std::collections::HashMap;

use fertsae_core::{AgeGroup, Level, Period, N_AGE_GROUPS};
use fertsae_models::{
    aggregate_periods, aggregate_ur, exceedance_probability, read_smoothed, tfr_identity_gap,
    urban_fraction, write_smoothed, DrawTable, EstimateKey, GridLayer, Measure, Pixel,
    UrbanFractionTable,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

const P: Period = Period {
    first: 2019,
    last: 2019,
};

fn table_from(values: &[Vec<f64>], n_areas: usize) -> DrawTable {
    let mut t = DrawTable::new(Level::Admin1, Measure::Fertility);
    let mut k = 0;
    for area in 0..n_areas {
        for a in AgeGroup::all() {
            t.insert(EstimateKey::asfr(area, P, a), values[k].clone());
            k += 1;
        }
    }
    t.add_tfr();
    t
}

fn draws(n_keys: usize, s: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(1.0f64..400.0, s), n_keys)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn combined_rates_lie_between_the_strata(
        u in draws(2 * N_AGE_GROUPS, 12),
        r in draws(2 * N_AGE_GROUPS, 12),
        frac in prop::collection::vec(0.0f64..=1.0, 2 * N_AGE_GROUPS),
    ) {
        let (tu, tr) = (table_from(&u, 2), table_from(&r, 2));
        let mut fr = UrbanFractionTable::new();
        for area in 0..2 {
            for a in AgeGroup::all() {
                fr.insert(area, P, a, frac[area * N_AGE_GROUPS + a.index()]).unwrap();
            }
        }
        let c = aggregate_ur(Some(&tu), Some(&tr), &fr, 3).unwrap();
        prop_assert!(c.flags.is_empty());
        for (key, d) in c.draws.iter().filter(|(k, _)| k.age.is_some()) {
            let (du, dr) = (tu.get(key).unwrap(), tr.get(key).unwrap());
            for s in 0..d.len() {
                let lo = du[s].min(dr[s]);
                let hi = du[s].max(dr[s]);
                prop_assert!(d[s] >= lo - 1e-9 * hi && d[s] <= hi + 1e-9 * hi);
            }
        }
        prop_assert!(tfr_identity_gap(&c.draws) <= 1e-12);
        // with age-specific r the TFR sits inside the age-wise envelope
        for (key, d) in c.draws.iter().filter(|(k, _)| k.age.is_none()) {
            for s in 0..d.len() {
                let (mut lo, mut hi) = (0.0, 0.0);
                for a in AgeGroup::all() {
                    let k = EstimateKey::asfr(key.area, key.period, a);
                    let (x, y) = (tu.get(&k).unwrap()[s], tr.get(&k).unwrap()[s]);
                    lo += 5.0 * x.min(y) / 1000.0;
                    hi += 5.0 * x.max(y) / 1000.0;
                }
                prop_assert!(d[s] >= lo - 1e-12 && d[s] <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn more_urban_weight_lowers_the_rate_when_urban_is_lower(
        base in draws(N_AGE_GROUPS, 8),
        gap in draws(N_AGE_GROUPS, 8),
        r1 in 0.0f64..=1.0,
        r2 in 0.0f64..=1.0,
    ) {
        let rural: Vec<Vec<f64>> = base.iter().zip(&gap).map(|(b, g)| b.iter().zip(g).map(|(x, y)| x + y).collect()).collect();
        let (tu, tr) = (table_from(&base, 1), table_from(&rural, 1));
        let (lo, hi) = (r1.min(r2), r1.max(r2));
        let with = |r: f64| {
            let mut fr = UrbanFractionTable::new();
            for a in AgeGroup::all() {
                fr.insert(0, P, a, r).unwrap();
            }
            aggregate_ur(Some(&tu), Some(&tr), &fr, 1).unwrap().draws
        };
        let (a, b) = (with(lo), with(hi));
        for (key, d) in a.iter() {
            for (x, y) in d.iter().zip(b.get(key).unwrap()) {
                prop_assert!(y <= &(x + 1e-9 * x.abs()));
            }
        }
    }

    #[test]
    fn fraction_matches_a_pixel_loop(
        seed in 0u64..1000,
        labels in prop::collection::vec(any::<bool>(), 100),
        pops in prop::collection::vec(prop::collection::vec(0.0f64..50.0, N_AGE_GROUPS), 100),
    ) {
        let n_areas = 4;
        let pixels: Vec<Pixel> = (0..100)
            .map(|g| {
                let mut population = [0.0; N_AGE_GROUPS];
                population.copy_from_slice(&pops[g]);
                population[0] += 1.0;
                Pixel {
                    pixel_id: format!("p{g}"),
                    area: (g * 7 + seed as usize) % n_areas,
                    urban: labels[g],
                    population,
                }
            })
            .collect();
        let grid = GridLayer::new(pixels.clone()).unwrap();
        // brute force: accumulate per pixel into (area, age) buckets
        let mut num: HashMap<(usize, usize), f64> = HashMap::new();
        let mut den: HashMap<(usize, usize), f64> = HashMap::new();
        for p in &pixels {
            for a in 0..N_AGE_GROUPS {
                *den.entry((p.area, a)).or_default() += p.population[a];
                if p.urban {
                    *num.entry((p.area, a)).or_default() += p.population[a];
                }
            }
        }
        for (&(area, a), &d) in &den {
            let r = urban_fraction(&grid, area, AgeGroup::new(a).unwrap()).unwrap();
            let expected = num.get(&(area, a)).copied().unwrap_or(0.0) / d;
            prop_assert!((r - expected).abs() <= 1e-12);
            prop_assert!((0.0..=1.0).contains(&r));
        }
    }

    #[test]
    fn period_averages_are_convex(
        values in prop::collection::vec(prop::collection::vec(1.0f64..8.0, 5), 3),
        w in prop::collection::vec(0.01f64..1.0, 3),
    ) {
        let mut t = DrawTable::new(Level::Admin1, Measure::Fertility);
        for (k, v) in values.iter().enumerate() {
            t.insert(EstimateKey::tfr(0, Period::year(2018 + k as i32)), v.clone());
        }
        let period = Period::new(2018, 2020).unwrap();
        let weight = |_: usize, y: i32| w[(y - 2018) as usize];
        let agg = aggregate_periods(&t, &[period], Some(&weight)).unwrap();
        let d = agg.get(&EstimateKey::tfr(0, period)).unwrap();
        for s in 0..5 {
            let col: Vec<f64> = values.iter().map(|v| v[s]).collect();
            let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(d[s] >= lo - 1e-12 && d[s] <= hi + 1e-12);
        }
    }
}

#[test]
fn degenerate_period_weights_select_one_year() {
    let mut t = DrawTable::new(Level::Admin1, Measure::Fertility);
    for (k, v) in [4.5, 4.2, 3.9].iter().enumerate() {
        t.insert(EstimateKey::tfr(0, Period::year(2018 + k as i32)), vec![*v, v + 0.1]);
    }
    let period = Period::new(2018, 2020).unwrap();
    let first = |_: usize, y: i32| if y == 2018 { 1.0 } else { 0.0 };
    let agg = aggregate_periods(&t, &[period], Some(&first)).unwrap();
    assert_eq!(agg.get(&EstimateKey::tfr(0, period)).unwrap(), &[4.5, 4.6]);
    let negative = |_: usize, _: i32| -1.0;
    assert!(aggregate_periods(&t, &[period], Some(&negative)).is_err());
}

#[test]
fn unequal_draw_counts_are_resampled_and_flagged() {
    let u = table_from(&vec![vec![100.0; 10]; N_AGE_GROUPS], 1);
    let r = table_from(&vec![vec![200.0; 7]; N_AGE_GROUPS], 1);
    let mut fr = UrbanFractionTable::new();
    for a in AgeGroup::all() {
        fr.insert(0, Period::new(2015, 2020).unwrap(), a, 0.5).unwrap();
    }
    let c = aggregate_ur(Some(&u), Some(&r), &fr, 1).unwrap();
    assert_eq!(c.flags.len(), 1);
    assert_eq!(c.draws.n_draws(), 10);
    assert!(c.draws.iter().filter(|(k, _)| k.age.is_some()).all(|(_, d)| d.iter().all(|v| *v == 150.0)));
}

#[test]
fn exceedance_tracks_the_normal_tail() {
    // rural - urban TFR ~ N(2.5, 0.5²), so P(gap > 2) = Φ(1)
    let s = 20_000;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let noise = Normal::new(0.0, 0.5).unwrap();
    let mut urban = DrawTable::new(Level::Admin1, Measure::Fertility);
    let mut rural = DrawTable::new(Level::Admin1, Measure::Fertility);
    let key = EstimateKey::tfr(0, P);
    let base: Vec<f64> = (0..s).map(|_| 3.0 + noise.sample(&mut rng) * 0.1).collect();
    urban.insert(key, base.clone());
    rural.insert(key, base.iter().map(|b| b + 2.5 + noise.sample(&mut rng)).collect());
    let p = exceedance_probability(&urban, &rural, 2.0)[0].probability;
    let phi1 = 0.841_344_746_068_542_9;
    let se = (phi1 * (1.0 - phi1) / s as f64).sqrt();
    assert!((p - phi1).abs() < 4.0 * se, "{p}");
}

#[test]
fn fraction_and_grid_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let grid = GridLayer::new(vec![
        Pixel { pixel_id: "a".into(), area: 0, urban: true, population: [1.5; N_AGE_GROUPS] },
        Pixel { pixel_id: "b".into(), area: 1, urban: false, population: [2.0; N_AGE_GROUPS] },
    ])
    .unwrap();
    let gpath = dir.path().join("grid.csv");
    grid.write_csv(&gpath).unwrap();
    assert_eq!(GridLayer::read_csv(&gpath).unwrap(), grid);
    let header = std::fs::read_to_string(&gpath).unwrap();
    assert!(header.starts_with("pixel_id,area_id,urban_label,pop_15_19,"));

    let fr = UrbanFractionTable::from_grid(&grid, 2, Period::new(2016, 2018).unwrap()).unwrap();
    assert_eq!(fr.get(0, Period::year(2017), AgeGroup::new(1).unwrap()), Some(1.0));
    assert_eq!(fr.get(1, Period::year(2019), AgeGroup::new(1).unwrap()), None);
    let fpath = dir.path().join("urban_fractions.csv");
    fr.write_csv(&fpath).unwrap();
    assert_eq!(UrbanFractionTable::read_csv(&fpath).unwrap(), fr);

    let t = table_from(&vec![vec![120.0, 130.0, 125.0]; N_AGE_GROUPS], 1);
    let est = t.summaries("unit");
    write_smoothed(dir.path(), &est).unwrap();
    let back = read_smoothed(&dir.path().join("smoothed_estimates.csv")).unwrap();
    assert_eq!(back.len(), est.len());
    for (e, (model, level, key, s)) in est.iter().zip(&back) {
        assert_eq!(model, "unit");
        assert_eq!(*level, e.level);
        assert_eq!(*key, e.key);
        assert_eq!(s.median, e.natural.median);
    }
}

#[test]
fn area_aggregation_weights_children_by_population() {
    let t = table_from(
        &(0..3 * N_AGE_GROUPS)
            .map(|k| vec![100.0 + k as f64, 50.0 + 2.0 * k as f64])
            .collect::<Vec<_>>(),
        3,
    );
    let parent = [0usize, 0, 1];
    let w = |i: usize, _: Option<AgeGroup>| [1.0, 3.0, 2.0][i];
    let agg = fertsae_models::aggregate_areas(&t, &parent, Level::National, &w).unwrap();
    assert_eq!(agg.len(), 2 * (N_AGE_GROUPS + 1));
    for a in AgeGroup::all() {
        let k = |i| EstimateKey::asfr(i, P, a);
        let got = agg.get(&k(0)).unwrap();
        for s in 0..2 {
            let expected = (t.get(&k(0)).unwrap()[s] + 3.0 * t.get(&k(1)).unwrap()[s]) / 4.0;
            assert!((got[s] - expected).abs() < 1e-12);
        }
        assert_eq!(agg.get(&k(1)).unwrap(), t.get(&k(2)).unwrap());
    }
    assert!(tfr_identity_gap(&agg) <= 1e-12);
    let zero = |_: usize, _: Option<AgeGroup>| 0.0;
    assert!(fertsae_models::aggregate_areas(&t, &parent, Level::National, &zero).is_err());
}

#[test]
fn draw_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let t = table_from(&vec![vec![120.5, 130.25, 125.0]; 2 * N_AGE_GROUPS], 2);
    let path = dir.path().join("draws.csv");
    fertsae_models::write_draws(&path, &t).unwrap();
    let back = fertsae_models::read_draws(&path).unwrap();
    assert_eq!(back.len(), t.len());
    for (k, d) in t.iter() {
        assert_eq!(back.get(k).unwrap(), d);
    }
}
