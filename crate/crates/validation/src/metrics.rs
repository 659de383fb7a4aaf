//! Scores of held-out predictions against log direct estimates.

use fertsae_core::quantile_sorted;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::ValidationError;

/// Penalty coefficient of the interval score outside the interval.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum IntervalScoreMode {
    /// `α/2` per unit of miss.
    #[default]
    Printed,
    /// `2/α` per unit of miss, as in the scoring-rule literature.
    Literature,
}

pub fn interval_score(
    lower: f64,
    upper: f64,
    observed: f64,
    alpha: f64,
    mode: IntervalScoreMode,
) -> Result<f64, ValidationError> {
    if !(lower <= upper) {
        return Err(ValidationError::Config(format!("interval [{lower}, {upper}] is reversed")));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(ValidationError::Config(format!("alpha {alpha} outside (0, 1)")));
    }
    let c = match mode {
        IntervalScoreMode::Printed => alpha / 2.0,
        IntervalScoreMode::Literature => 2.0 / alpha,
    };
    let mut s = upper - lower;
    if lower > observed {
        s += c * (lower - observed);
    }
    if upper < observed {
        s -= c * (upper - observed);
    }
    Ok(s)
}

/// Posterior draws of a held-out log rate with the matching direct estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct HeldOut {
    pub draws: Vec<f64>,
    pub direct: f64,
    pub variance: f64,
}

/// Equal-tailed predictive intervals at each level from `draw + ε`,
/// `ε ~ N(0, variance)` drawn once per posterior draw.
pub fn predictive_intervals<R: Rng + ?Sized>(
    draws: &[f64],
    variance: f64,
    levels: &[f64],
    rng: &mut R,
) -> Result<Vec<(f64, f64)>, ValidationError> {
    if draws.is_empty() {
        return Err(ValidationError::Config("no posterior draws".into()));
    }
    if !(variance >= 0.0 && variance.is_finite()) {
        return Err(ValidationError::Config("missing or invalid design variance".into()));
    }
    let sd = variance.sqrt();
    let mut noisy: Vec<f64> = draws
        .iter()
        .map(|d| d + sd * rng.sample::<f64, _>(StandardNormal))
        .collect();
    noisy.sort_by(f64::total_cmp);
    Ok(levels
        .iter()
        .map(|&l| {
            let a = 1.0 - l;
            (quantile_sorted(&noisy, a / 2.0), quantile_sorted(&noisy, 1.0 - a / 2.0))
        })
        .collect())
}

/// True when the direct estimate lies in the predictive interval at `level`.
pub fn covered<R: Rng + ?Sized>(held: &HeldOut, level: f64, rng: &mut R) -> Result<bool, ValidationError> {
    let (l, u) = predictive_intervals(&held.draws, held.variance, &[level], rng)?[0];
    Ok(l <= held.direct && held.direct <= u)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreReport {
    pub n: usize,
    /// `100 · mean(η̂ − η̂ᵂ)`.
    pub bias: f64,
    /// `100 · mean|η̂ − η̂ᵂ|`.
    pub abs_bias: f64,
    /// `100 · mean((η̂ − η̂ᵂ)/η̂ᵂ)`.
    pub rel_bias: f64,
    /// `100 · mean(|η̂ − η̂ᵂ| / |η̂ᵂ|)`.
    pub abs_rel_bias: f64,
    /// `sqrt(mean (η̂ − η̂ᵂ)²)` on the log scale.
    pub rmse: f64,
    /// (level, share covered).
    pub coverage: Vec<(f64, f64)>,
    /// (level, mean interval score).
    pub interval_score: Vec<(f64, f64)>,
}

/// Point metrics from posterior medians `pred` and direct log estimates
/// `direct`.
pub fn point_metrics(pred: &[f64], direct: &[f64]) -> Result<(f64, f64, f64, f64, f64), ValidationError> {
    if pred.len() != direct.len() || pred.is_empty() {
        return Err(ValidationError::Config("need equal, non-empty prediction and direct sets".into()));
    }
    let n = pred.len() as f64;
    let (mut b, mut ab, mut rb, mut arb, mut se) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (p, w) in pred.iter().zip(direct) {
        let e = p - w;
        b += e;
        ab += e.abs();
        rb += e / w;
        arb += e.abs() / w.abs();
        se += e * e;
    }
    Ok((100.0 * b / n, 100.0 * ab / n, 100.0 * rb / n, 100.0 * arb / n, (se / n).sqrt()))
}

fn median(draws: &[f64]) -> f64 {
    let mut v = draws.to_vec();
    v.sort_by(f64::total_cmp);
    quantile_sorted(&v, 0.5)
}

pub fn score<R: Rng + ?Sized>(
    held: &[HeldOut],
    levels: &[f64],
    mode: IntervalScoreMode,
    rng: &mut R,
) -> Result<ScoreReport, ValidationError> {
    if levels.iter().any(|l| !(*l > 0.0 && *l < 1.0)) {
        return Err(ValidationError::Config("coverage levels must lie in (0, 1)".into()));
    }
    let pred: Vec<f64> = held.iter().map(|h| median(&h.draws)).collect();
    let direct: Vec<f64> = held.iter().map(|h| h.direct).collect();
    let (bias, abs_bias, rel_bias, abs_rel_bias, rmse) = point_metrics(&pred, &direct)?;
    let mut hits = vec![0usize; levels.len()];
    let mut is = vec![0.0; levels.len()];
    for h in held {
        let intervals = predictive_intervals(&h.draws, h.variance, levels, rng)?;
        for (k, &(l, u)) in intervals.iter().enumerate() {
            if l <= h.direct && h.direct <= u {
                hits[k] += 1;
            }
            is[k] += interval_score(l, u, h.direct, 1.0 - levels[k], mode)?;
        }
    }
    let n = held.len() as f64;
    Ok(ScoreReport {
        n: held.len(),
        bias,
        abs_bias,
        rel_bias,
        abs_rel_bias,
        rmse,
        coverage: levels.iter().zip(&hits).map(|(&l, &h)| (l, h as f64 / n)).collect(),
        interval_score: levels.iter().zip(&is).map(|(&l, &s)| (l, s / n)).collect(),
    })
}
