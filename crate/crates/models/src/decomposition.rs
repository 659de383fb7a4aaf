//! Empirical variance shares of fitted effect blocks.

use fertsae_core::{summarize, AgeGroup, N_AGE_GROUPS};

use crate::fit::ModelFit;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Component {
    Space,
    Age,
    Time,
    SpaceTime,
    SpaceAge,
    TimeAge,
}

impl Component {
    pub fn label(self) -> &'static str {
        match self {
            Component::Space => "S",
            Component::Age => "A",
            Component::Time => "T",
            Component::SpaceTime => "SxT",
            Component::SpaceAge => "SxA",
            Component::TimeAge => "TxA",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VarianceDecomposition {
    /// `(component, variance, share)`, for the components present in the fit.
    pub components: Vec<(Component, f64, f64)>,
}

impl VarianceDecomposition {
    pub fn share(&self, c: Component) -> Option<f64> {
        self.components.iter().find(|x| x.0 == c).map(|x| x.2)
    }

    pub fn variance(&self, c: Component) -> Option<f64> {
        self.components.iter().find(|x| x.0 == c).map(|x| x.1)
    }
}

/// Divide-by-n variance.
pub fn population_variance(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n
}

/// Shares from raw component variances; all-zero input gives zero shares.
pub fn shares(variances: Vec<(Component, f64)>) -> VarianceDecomposition {
    let total: f64 = variances.iter().map(|v| v.1).sum();
    VarianceDecomposition {
        components: variances
            .into_iter()
            .map(|(c, v)| (c, v, if total > 0.0 { v / total } else { 0.0 }))
            .collect(),
    }
}

fn medians(draws: &[Vec<f64>]) -> Vec<f64> {
    let n = draws.first().map_or(0, Vec::len);
    (0..n)
        .map(|j| {
            let col: Vec<f64> = draws.iter().map(|d| d[j]).collect();
            summarize(&col).map_or(0.0, |s| s.median)
        })
        .collect()
}

fn sum_blocks(fit: &ModelFit, names: &[&str]) -> Option<Vec<Vec<f64>>> {
    let mut total: Option<Vec<Vec<f64>>> = None;
    for name in names {
        let Some(d) = fit.samples.block_draws(&fit.spec, name) else { continue };
        total = Some(match total {
            None => d,
            Some(mut t) => {
                for (a, b) in t.iter_mut().zip(&d) {
                    a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
                }
                t
            }
        });
    }
    total
}

/// Variance of posterior-median effects per component of a fitted model.
/// Ages in `exclude` are dropped from the age, space×age and time×age
/// components before the variances are computed.
pub fn variance_decomposition(fit: &ModelFit, exclude: &[AgeGroup]) -> VarianceDecomposition {
    let keep_age = |a: usize| !exclude.iter().any(|e| e.index() == a);
    let mut out = Vec::new();

    if let Some(s) = sum_blocks(fit, &["space"]) {
        out.push((Component::Space, population_variance(&medians(&s))));
    }
    if let Some(a) = sum_blocks(fit, &["age_rw1", "age_iid"]) {
        let m: Vec<f64> = medians(&a)
            .into_iter()
            .enumerate()
            .filter(|(k, _)| keep_age(*k))
            .map(|(_, v)| v)
            .collect();
        out.push((Component::Age, population_variance(&m)));
    }
    if let Some(mut t) = sum_blocks(fit, &["time_rw2", "time_iid"]) {
        if let Some(beta) = fit.samples.column_by_name("trend") {
            let nt = t.first().map_or(0, Vec::len);
            let centre = (nt as f64 - 1.0) / 2.0;
            for (row, b) in t.iter_mut().zip(&beta) {
                for (k, x) in row.iter_mut().enumerate() {
                    *x += b * (k as f64 - centre);
                }
            }
        }
        out.push((Component::Time, population_variance(&medians(&t))));
    }
    if let Some(st) = sum_blocks(fit, &["space_time"]) {
        out.push((Component::SpaceTime, population_variance(&medians(&st))));
    }
    if let Some(sa) = sum_blocks(fit, &["space_age"]) {
        let m: Vec<f64> = medians(&sa)
            .into_iter()
            .enumerate()
            .filter(|(k, _)| keep_age(k % N_AGE_GROUPS))
            .map(|(_, v)| v)
            .collect();
        out.push((Component::SpaceAge, population_variance(&m)));
    }
    if let Some(ta) = sum_blocks(fit, &["age_time"]) {
        let nt = ta.first().map_or(0, Vec::len) / N_AGE_GROUPS;
        let m: Vec<f64> = medians(&ta)
            .into_iter()
            .enumerate()
            .filter(|(k, _)| nt > 0 && keep_age(k / nt))
            .map(|(_, v)| v)
            .collect();
        out.push((Component::TimeAge, population_variance(&m)));
    }
    shares(out)
}
