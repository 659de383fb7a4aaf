mod common;

use std::collections::BTreeMap;

use fertsae_core::{
    aggregate_cells, tabulate, Level, Period, PeriodGrouping, SurveyDataset, Urbanicity,
};
use proptest::prelude::*;

/// Month-by-month enumeration: (cluster, year, age) -> (months, births).
fn oracle(d: &SurveyDataset, window: Period) -> BTreeMap<(usize, i32, usize), (u64, u64)> {
    let ws = (window.first - 1900) as i64 * 12 + 1;
    let we = (window.last - 1900) as i64 * 12 + 12;
    let mut out: BTreeMap<(usize, i32, usize), (u64, u64)> = BTreeMap::new();
    for (i, w) in d.women().iter().enumerate() {
        let c = d.cluster_of(i);
        let dob = w.dob.value() as i64;
        for m in ws..=we {
            let age = m - dob;
            if m < w.interview.value() as i64 && (180..600).contains(&age) {
                let year = 1900 + ((m - 1) / 12) as i32;
                out.entry((c, year, ((age - 180) / 60) as usize)).or_default().0 += 1;
            }
        }
        for b in d.births_of(i) {
            let m = b.birth.value() as i64;
            let age = m - dob;
            if (ws..=we).contains(&m) && (180..600).contains(&age) {
                let year = 1900 + ((m - 1) / 12) as i32;
                out.entry((c, year, ((age - 180) / 60) as usize)).or_default().1 += 1;
            }
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn tabulation_matches_month_oracle(seed in any::<u64>(), n in 1usize..200, first in 2010i32..2020) {
        let d = common::random_dataset(seed, n, 7);
        let window = Period::new(first, 2020).unwrap();
        let table = tabulate(&d, window).unwrap();
        let expected = oracle(&d, window);
        let mut got: BTreeMap<(usize, i32, usize), (u64, u64)> = BTreeMap::new();
        for (k, c) in &table.cells {
            let months = c.exposure * 12.0;
            prop_assert!((months - months.round()).abs() < 1e-9);
            let e = got.entry((k.unit, k.period.first, k.age.index())).or_default();
            e.0 += months.round() as u64;
            e.1 += c.births;
        }
        got.retain(|_, v| *v != (0, 0));
        prop_assert_eq!(got, expected);
    }

    #[test]
    fn weighted_fields_scale_and_vanish_together(seed in any::<u64>()) {
        let d = common::random_dataset(seed, 80, 5);
        let table = tabulate(&d, Period::new(2015, 2020).unwrap()).unwrap();
        for c in table.cells.values() {
            prop_assert_eq!(c.births == 0, c.weighted_births == 0.0);
            prop_assert_eq!(c.exposure == 0.0, c.weighted_exposure == 0.0);
        }
    }

    #[test]
    fn aggregation_conserves_totals(seed in any::<u64>()) {
        let d = common::random_dataset(seed, 150, 9);
        let table = tabulate(&d, Period::new(2012, 2020).unwrap()).unwrap();
        let total = table.total();
        let grouping = PeriodGrouping::consecutive(2012, 2020, 3);
        for level in [Level::National, Level::Admin1, Level::Admin2] {
            let agg = aggregate_cells(&table, level, Urbanicity::Both, &grouping).unwrap();
            let t = agg.total();
            prop_assert_eq!(t.births, total.births);
            prop_assert!((t.exposure - total.exposure).abs() < 1e-9);
            prop_assert!((t.weighted_exposure - total.weighted_exposure).abs() < 1e-9);
        }
        let u = aggregate_cells(&table, Level::Admin1, Urbanicity::Urban, &grouping).unwrap().total();
        let r = aggregate_cells(&table, Level::Admin1, Urbanicity::Rural, &grouping).unwrap().total();
        prop_assert_eq!(u.births + r.births, total.births);
        prop_assert!((u.exposure + r.exposure - total.exposure).abs() < 1e-9);
    }
}

#[test]
fn a_woman_is_in_one_age_group_per_month() {
    let d = common::random_dataset(3, 60, 5);
    for (i, w) in d.women().iter().enumerate() {
        let c = d.clusters()[d.cluster_of(i)].clone();
        let one = SurveyDataset::new(
            vec![w.clone()],
            d.births_of(i).to_vec(),
            vec![c],
            d.admin1_graph().clone(),
            d.admin2_graph().clone(),
        )
        .unwrap();
        let table = tabulate(&one, Period::new(2010, 2020).unwrap()).unwrap();
        let mut per_year: BTreeMap<i32, f64> = BTreeMap::new();
        for (k, c) in &table.cells {
            *per_year.entry(k.period.first).or_default() += c.exposure;
        }
        assert!(per_year.values().all(|&e| e <= 1.0 + 1e-12));
    }
}

#[test]
fn merged_cells_add() {
    let d = common::random_dataset(11, 120, 6);
    let table = tabulate(&d, Period::new(2018, 2020).unwrap()).unwrap();
    let agg = aggregate_cells(&table, Level::Admin2, Urbanicity::Both, &PeriodGrouping::Annual).unwrap();
    for (k, cell) in &agg.cells {
        let mut births = 0;
        let mut exposure = 0.0;
        for (ck, c) in &table.cells {
            if table.clusters[ck.unit].admin2 == k.unit && ck.period == k.period && ck.age == k.age {
                births += c.births;
                exposure += c.exposure;
            }
        }
        assert_eq!(births, cell.births);
        assert!((exposure - cell.exposure).abs() < 1e-9);
    }
}

#[test]
fn urban_filter_drops_rural_cells() {
    let d = common::random_dataset(5, 120, 8);
    let table = tabulate(&d, Period::new(2016, 2020).unwrap()).unwrap();
    let agg = aggregate_cells(&table, Level::Admin1, Urbanicity::Urban, &PeriodGrouping::Annual).unwrap();
    let urban_only = table.retain_clusters(|_, c| c.urban);
    let a = agg.total();
    let b = urban_only.total();
    assert_eq!(a.births, b.births);
    assert!((a.exposure - b.exposure).abs() < 1e-9);
    assert!(agg.cells.keys().all(|k| k.urban == Some(true)));
}

#[test]
fn window_errors() {
    let d = common::random_dataset(1, 10, 2);
    assert!(tabulate(&d, Period { first: 2020, last: 2019 }).is_err());
    assert!(tabulate(&d, Period::year(2022)).is_err());
    let g = PeriodGrouping::Blocks(vec![Period::new(2019, 2020).unwrap()]);
    let table = tabulate(&d, Period::new(2015, 2020).unwrap()).unwrap();
    assert!(aggregate_cells(&table, Level::National, Urbanicity::Both, &g).is_err());
}

#[test]
fn cells_csv_round_trip() {
    let d = common::random_dataset(9, 60, 4);
    let table = tabulate(&d, Period::new(2014, 2020).unwrap()).unwrap();
    let grouping = PeriodGrouping::consecutive(2014, 2020, 3);
    let agg = aggregate_cells(&table, Level::Admin1, Urbanicity::Both, &grouping).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("cells.csv");
    agg.write_csv(&p).unwrap();
    let back = fertsae_core::FertilityTable::read_aggregated_csv(&p, Level::Admin1, 2, 4).unwrap();
    assert_eq!(back.cells.len(), agg.cells.len());
    for (k, c) in &agg.cells {
        let b = back.cells[k];
        assert_eq!(b.births, c.births);
        assert!((b.exposure - c.exposure).abs() < 1e-12);
    }
    table.write_csv(&dir.path().join("cluster_cells.csv")).unwrap();
    let text = std::fs::read_to_string(dir.path().join("cluster_cells.csv")).unwrap();
    assert!(text.starts_with("area_id,urban,cluster_id,year,age_group,births,exposure,w_births,w_exposure"));
}
