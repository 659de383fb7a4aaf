//! Posterior summaries of scalar draws.

/// Quantile summary of a set of draws.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub mean: f64,
    pub median: f64,
    pub q025: f64,
    pub q05: f64,
    pub q95: f64,
    pub q975: f64,
}

impl Summary {
    /// Equal-tailed interval at level `1 - alpha` for alpha 0.1 or 0.05.
    pub fn interval(&self, alpha: f64) -> Option<(f64, f64)> {
        if (alpha - 0.1).abs() < 1e-12 {
            Some((self.q05, self.q95))
        } else if (alpha - 0.05).abs() < 1e-12 {
            Some((self.q025, self.q975))
        } else {
            None
        }
    }
}

/// Type-7 sample quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * q.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Summarizes draws; `None` when empty or any draw is not finite.
pub fn summarize(draws: &[f64]) -> Option<Summary> {
    if draws.is_empty() || draws.iter().any(|d| !d.is_finite()) {
        return None;
    }
    let mut s = draws.to_vec();
    s.sort_by(f64::total_cmp);
    Some(Summary {
        mean: s.iter().sum::<f64>() / s.len() as f64,
        median: quantile_sorted(&s, 0.5),
        q025: quantile_sorted(&s, 0.025),
        q05: quantile_sorted(&s, 0.05),
        q95: quantile_sorted(&s, 0.95),
        q975: quantile_sorted(&s, 0.975),
    })
}
