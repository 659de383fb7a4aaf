use fertsae_validation::{
    covered, interval_score, point_metrics, predictive_intervals, score, HeldOut, IntervalScoreMode,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

const LEVELS: [f64; 4] = [0.5, 0.8, 0.9, 0.95];

fn held_out(seed: u64, n: usize) -> Vec<HeldOut> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let std = Normal::new(0.0, 1.0).unwrap();
    (0..n)
        .map(|_| {
            let m = std.sample(&mut rng);
            let s = 0.05 + 0.3 * rand::Rng::random::<f64>(&mut rng);
            let v = 0.01 + 0.2 * rand::Rng::random::<f64>(&mut rng);
            let theta = m + s * std.sample(&mut rng);
            HeldOut {
                draws: (0..400).map(|_| m + s * std.sample(&mut rng)).collect(),
                direct: theta + v.sqrt() * std.sample(&mut rng),
                variance: v,
            }
        })
        .collect()
}

#[test]
fn calibrated_predictions_reach_nominal_coverage() {
    let held = held_out(1, 1000);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let report = score(&held, &LEVELS, IntervalScoreMode::Printed, &mut rng).unwrap();
    let cov90 = report.coverage.iter().find(|c| c.0 == 0.9).unwrap().1;
    assert!((0.87..=0.93).contains(&cov90), "{cov90}");
    for &(level, share) in &report.coverage {
        assert!((share - level).abs() < 0.05, "{level}: {share}");
    }
}

#[test]
fn overconfident_predictions_undercover() {
    let mut held = held_out(3, 500);
    for h in &mut held {
        let m = h.draws.iter().sum::<f64>() / h.draws.len() as f64;
        h.draws.iter_mut().for_each(|d| *d = m + 0.1 * (*d - m));
        h.variance *= 0.01;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let report = score(&held, &LEVELS, IntervalScoreMode::Printed, &mut rng).unwrap();
    assert!(report.coverage.iter().all(|&(level, share)| share < level - 0.2));
}

#[test]
fn identity_predictions_score_zero() {
    let x = [0.1, -2.0, 3.5, 1.25];
    assert_eq!(point_metrics(&x, &x).unwrap(), (0.0, 0.0, 0.0, 0.0, 0.0));
    assert!(point_metrics(&x, &x[..2]).is_err());
    assert!(point_metrics(&[], &[]).is_err());
}

#[test]
fn far_direct_estimates_are_not_covered() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let h = HeldOut {
        draws: vec![0.0; 200],
        direct: 10.0,
        variance: 1e-4,
    };
    assert!(!covered(&h, 0.95, &mut rng).unwrap());
}

proptest! {
    #[test]
    fn bias_family_bounds(pairs in proptest::collection::vec((-3.0f64..3.0, 0.1f64..3.0), 1..40)) {
        let pred: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let direct: Vec<f64> = pairs.iter().map(|p| p.1).collect();
        let (bias, abs_bias, rel, abs_rel, rmse) = point_metrics(&pred, &direct).unwrap();
        prop_assert!(abs_bias + 1e-9 >= bias.abs());
        prop_assert!(abs_rel + 1e-9 >= rel.abs());
        prop_assert!(rmse * rmse + 1e-12 >= (bias / 100.0).powi(2));
        prop_assert!(rmse >= 0.0);
    }

    #[test]
    fn interval_score_is_width_exactly_when_covered(
        l in -5.0f64..5.0,
        w in 0.0f64..4.0,
        obs in -10.0f64..10.0,
        alpha in 0.01f64..0.5,
    ) {
        let u = l + w;
        for mode in [IntervalScoreMode::Printed, IntervalScoreMode::Literature] {
            let s = interval_score(l, u, obs, alpha, mode).unwrap();
            if l <= obs && obs <= u {
                prop_assert!((s - w).abs() < 1e-12);
            } else {
                prop_assert!(s > w);
            }
        }
        prop_assert!(interval_score(u + 1.0, u, obs, alpha, IntervalScoreMode::Printed).is_err());
    }

    #[test]
    fn intervals_nest_and_coverage_rises_with_level(seed in any::<u64>()) {
        let held = held_out(seed, 30);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let iv = predictive_intervals(&held[0].draws, held[0].variance, &LEVELS, &mut rng).unwrap();
        for pair in iv.windows(2) {
            prop_assert!(pair[1].0 <= pair[0].0 && pair[0].1 <= pair[1].1);
        }
        let report = score(&held, &LEVELS, IntervalScoreMode::Printed, &mut rng).unwrap();
        for pair in report.coverage.windows(2) {
            prop_assert!(pair[0].1 <= pair[1].1);
        }
        prop_assert!(report.coverage.iter().all(|c| (0.0..=1.0).contains(&c.1)));
    }
}
