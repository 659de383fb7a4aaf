mod common;

use fertsae_core::{
    direct_asfr, direct_estimates, jackknife_variance, JackknifeMethod, read_direct_estimates, tabulate,
    write_direct_estimates, AgeGroup, DirectKey, EstimateFlag, Level, Period, PeriodGrouping,
    SurveyDataset, Urbanicity, WomanRecord,
};
use proptest::prelude::*;

fn reweighted(d: &SurveyDataset, factor: f64) -> SurveyDataset {
    let women: Vec<WomanRecord> = d
        .women()
        .iter()
        .map(|w| WomanRecord { weight: w.weight * factor, ..w.clone() })
        .collect();
    SurveyDataset::new(
        women,
        d.births().to_vec(),
        d.clusters().to_vec(),
        d.admin1_graph().clone(),
        d.admin2_graph().clone(),
    )
    .unwrap()
}

/// Estimate rebuilt from the women, with cluster `c` weighted by `factor(c)`.
fn reweighted_estimate(
    d: &SurveyDataset,
    window: Period,
    age: Option<usize>,
    factor: &dyn Fn(usize) -> f64,
) -> Option<f64> {
    let ws = (window.first - 1900) as i64 * 12 + 1;
    let we = (window.last - 1900) as i64 * 12 + 12;
    let mut wy = [0.0; 7];
    let mut wm = [0.0; 7];
    for (i, w) in d.women().iter().enumerate() {
        let f = factor(d.cluster_of(i));
        let dob = w.dob.value() as i64;
        for m in ws..=we {
            let a = m - dob;
            if m < w.interview.value() as i64 && (180..600).contains(&a) {
                wm[((a - 180) / 60) as usize] += f * w.weight;
            }
        }
        for b in d.births_of(i) {
            let m = b.birth.value() as i64;
            let a = m - dob;
            if (ws..=we).contains(&m) && (180..600).contains(&a) {
                wy[((a - 180) / 60) as usize] += f * w.weight;
            }
        }
    }
    match age {
        Some(a) => (wm[a] > 0.0).then(|| 12000.0 * wy[a] / wm[a]),
        None => Some((0..7).map(|a| if wm[a] > 0.0 { 12.0 * wy[a] / wm[a] } else { 0.0 }).sum::<f64>() * 5.0),
    }
}

fn jk(reps: &[f64]) -> f64 {
    let n = reps.len() as f64;
    let mean = reps.iter().sum::<f64>() / n;
    (n - 1.0) / n * reps.iter().map(|r| (r - mean).powi(2)).sum::<f64>()
}

fn has_women(d: &SurveyDataset, c: usize) -> bool {
    (0..d.women().len()).any(|i| d.cluster_of(i) == c)
}

/// Stratified replicate loop: drop one cluster, inflate the rest of its
/// stratum by n/(n-1), sum the per-stratum jackknife terms.
fn brute_force_stratified(d: &SurveyDataset, window: Period, age: Option<usize>) -> f64 {
    let clusters: Vec<usize> = (0..d.clusters().len()).filter(|&c| has_women(d, c)).collect();
    let mut strata: Vec<&str> = clusters.iter().map(|&c| d.clusters()[c].stratum_id.as_str()).collect();
    strata.sort();
    strata.dedup();
    let mut total = 0.0;
    for s in strata {
        let members: Vec<usize> = clusters.iter().copied().filter(|&c| d.clusters()[c].stratum_id == s).collect();
        let n = members.len() as f64;
        assert!(n > 1.0, "fixture needs two clusters per stratum");
        let reps: Vec<f64> = members
            .iter()
            .map(|&drop| {
                let f = |c: usize| {
                    if c == drop {
                        0.0
                    } else if members.contains(&c) {
                        n / (n - 1.0)
                    } else {
                        1.0
                    }
                };
                reweighted_estimate(d, window, age, &f).unwrap()
            })
            .collect();
        total += jk(&reps);
    }
    total
}

/// Replicate loop that rebuilds each estimate from the women of the other
/// clusters.
fn brute_force_jackknife(d: &SurveyDataset, window: Period, age: Option<usize>) -> f64 {
    let estimate = |skip: Option<usize>| -> Option<f64> {
        reweighted_estimate(d, window, age, &|c| if Some(c) == skip { 0.0 } else { 1.0 })
    };
    let mut reps = Vec::new();
    for c in 0..d.clusters().len() {
        let has = d
            .women()
            .iter()
            .enumerate()
            .any(|(i, _)| d.cluster_of(i) == c);
        if has {
            reps.push(estimate(Some(c)).unwrap());
        }
    }
    jk(&reps)
}

#[test]
fn jackknife_matches_brute_force_replicates() {
    for seed in 0..5 {
        let d = common::random_dataset(100 + seed, 400, 20);
        let window = Period::new(2016, 2020).unwrap();
        let table = tabulate(&d, window).unwrap();
        for age in [Some(1), Some(3), None] {
            let key = DirectKey {
                level: Level::National,
                area: 0,
                period: window,
                age: age.map(|a| AgeGroup::new(a).unwrap()),
            };
            let pooled = jackknife_variance(&table, &key, Urbanicity::Both, JackknifeMethod::Unstratified).unwrap();
            let oracle = brute_force_jackknife(&d, window, age);
            let v = pooled.variance.unwrap();
            assert!((v - oracle).abs() <= 1e-9 * oracle.max(1e-12), "{age:?}: {v} vs {oracle}");
        }
    }
}

#[test]
fn stratified_jackknife_matches_brute_force_replicates() {
    for seed in 0..5 {
        let d = common::random_dataset(200 + seed, 400, 24);
        let window = Period::new(2016, 2020).unwrap();
        let table = tabulate(&d, window).unwrap();
        for age in [Some(1), Some(3), None] {
            let key = DirectKey {
                level: Level::National,
                area: 0,
                period: window,
                age: age.map(|a| AgeGroup::new(a).unwrap()),
            };
            let v = jackknife_variance(&table, &key, Urbanicity::Both, JackknifeMethod::Stratified)
                .unwrap()
                .variance
                .unwrap();
            let oracle = brute_force_stratified(&d, window, age);
            assert!((v - oracle).abs() <= 1e-9 * oracle.max(1e-12), "{age:?}: {v} vs {oracle}");
        }
    }
}

#[test]
fn one_stratum_makes_the_methods_agree() {
    let d = common::random_dataset(7, 300, 15);
    let clusters = d.clusters().iter().map(|c| fertsae_core::Cluster { stratum_id: "all".into(), admin1: 0, admin2: 0, urban: false, ..c.clone() }).collect();
    let d = SurveyDataset::new(d.women().to_vec(), d.births().to_vec(), clusters, d.admin1_graph().clone(), d.admin2_graph().clone()).unwrap();
    let window = Period::new(2016, 2020).unwrap();
    let table = tabulate(&d, window).unwrap();
    let key = DirectKey { level: Level::National, area: 0, period: window, age: None };
    let a = jackknife_variance(&table, &key, Urbanicity::Both, JackknifeMethod::Stratified).unwrap().variance.unwrap();
    let b = jackknife_variance(&table, &key, Urbanicity::Both, JackknifeMethod::Unstratified).unwrap().variance.unwrap();
    assert!((a - b).abs() <= 1e-10 * b);
}

#[test]
fn weighted_ratio_examples() {
    use fertsae_core::{BirthRecord, CmcDate, Cluster, RegionGraph};
    // two women fully exposed for 2020 at ages 25-29, weights 1 and 3
    let cl = Cluster {
        cluster_id: "c".into(),
        admin1: 0,
        admin2: 0,
        urban: false,
        stratum_id: "s".into(),
    };
    let mk = |id: &str, weight: f64| WomanRecord {
        woman_id: id.into(),
        cluster_id: "c".into(),
        dob: CmcDate::from_year_month(1993, 1).unwrap(),
        interview: CmcDate::from_year_month(2021, 3).unwrap(),
        weight,
    };
    let d = SurveyDataset::new(
        vec![mk("a", 1.0), mk("b", 3.0)],
        vec![BirthRecord { woman_id: "a".into(), birth: CmcDate::from_year_month(2020, 6).unwrap() }],
        vec![cl],
        RegionGraph::path(1),
        RegionGraph::path(1),
    )
    .unwrap();
    let table = tabulate(&d, Period::year(2020)).unwrap();
    let key = DirectKey {
        level: Level::National,
        area: 0,
        period: Period::year(2020),
        age: AgeGroup::new(2),
    };
    let e = direct_asfr(&table, &key, Urbanicity::Both).unwrap();
    assert!((e.point - 250.0).abs() < 1e-12);
    let jk = jackknife_variance(&table, &key, Urbanicity::Both, JackknifeMethod::Stratified).unwrap();
    assert_eq!(jk.variance, None);

    let empty = DirectKey { age: AgeGroup::new(0), ..key };
    assert!(direct_asfr(&table, &empty, Urbanicity::Both).is_err());
    let d2 = SurveyDataset::new(
        d.women().to_vec(),
        vec![],
        d.clusters().to_vec(),
        RegionGraph::path(1),
        RegionGraph::path(1),
    )
    .unwrap();
    let t2 = tabulate(&d2, Period::year(2020)).unwrap();
    let z = direct_asfr(&t2, &key, Urbanicity::Both).unwrap();
    assert_eq!(z.point, 0.0);
    assert!(z.has_flag(EstimateFlag::Sparse));
}

#[test]
fn estimates_csv_round_trip() {
    let d = common::random_dataset(8, 300, 12);
    let table = tabulate(&d, Period::new(2012, 2020).unwrap()).unwrap();
    let g = PeriodGrouping::consecutive(2012, 2020, 3);
    let est = direct_estimates(&table, Level::Admin1, Urbanicity::Both, &g).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("direct_estimates.csv");
    write_direct_estimates(&p, &est).unwrap();
    let back = read_direct_estimates(&p).unwrap();
    assert_eq!(back.len(), est.len());
    for (a, b) in est.iter().zip(&back) {
        assert_eq!(a.key, b.key);
        assert_eq!(a.flags, b.flags);
        assert!((a.point - b.point).abs() <= 1e-12 * a.point.abs().max(1.0));
    }
    let header = std::fs::read_to_string(&p).unwrap();
    assert!(header.starts_with("level,area_id,period,age_group,point,variance,log_point,log_variance,flags"));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn weight_scale_invariance(seed in any::<u64>(), factor in 0.01f64..100.0) {
        let d = common::random_dataset(seed, 150, 10);
        let window = Period::new(2015, 2020).unwrap();
        let g = PeriodGrouping::Blocks(vec![window]);
        let a = direct_estimates(&tabulate(&d, window).unwrap(), Level::Admin1, Urbanicity::Both, &g).unwrap();
        let b = direct_estimates(&tabulate(&reweighted(&d, factor), window).unwrap(), Level::Admin1, Urbanicity::Both, &g).unwrap();
        prop_assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x.point - y.point).abs() <= 1e-9 * x.point.abs().max(1e-9));
            if let (Some(u), Some(v)) = (x.variance, y.variance) {
                prop_assert!((u - v).abs() <= 1e-8 * u.abs().max(1e-9));
            }
        }
    }

    #[test]
    fn tfr_is_five_times_asfr_sum(seed in any::<u64>()) {
        let d = common::random_dataset(seed, 200, 10);
        let window = Period::new(2014, 2020).unwrap();
        let est = direct_estimates(&tabulate(&d, window).unwrap(), Level::Admin2, Urbanicity::Both, &PeriodGrouping::Annual).unwrap();
        for tfr in est.iter().filter(|e| e.key.age.is_none()) {
            let sum: f64 = est
                .iter()
                .filter(|e| e.key.age.is_some() && (e.key.area, e.key.period) == (tfr.key.area, tfr.key.period))
                .map(|e| e.point)
                .sum();
            prop_assert!((tfr.point - 5.0 * sum / 1000.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn estimates_are_non_negative_with_log_fields_iff_positive(seed in any::<u64>()) {
        let d = common::random_dataset(seed, 120, 8);
        let window = Period::new(2016, 2020).unwrap();
        let est = direct_estimates(&tabulate(&d, window).unwrap(), Level::Admin2, Urbanicity::Both, &PeriodGrouping::Annual).unwrap();
        for e in &est {
            prop_assert!(e.point >= 0.0);
            prop_assert!(e.variance.is_none_or(|v| v >= 0.0));
            if e.log_point.is_some() {
                prop_assert!(e.point > 0.0);
            }
            if e.point > 0.0 && e.variance.is_some() {
                prop_assert!(e.log_point.is_some());
            }
        }
    }
}
