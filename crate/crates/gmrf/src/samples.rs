//! Posterior draw storage, summaries and predictor extraction.

use crate::model::{Design, LatentModelSpec, Layout};
use crate::GmrfError;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Diagnostics {
    /// Joint-move acceptance rate per chain after burn-in.
    pub acceptance: Vec<f64>,
    /// Latent refresh acceptance rate per chain after burn-in.
    pub refresh_acceptance: Vec<f64>,
    pub max_constraint_residual: f64,
    /// Hyperparameter starting point found by the mode search (working scale).
    pub mode_theta: Vec<f64>,
    pub hyper_names: Vec<String>,
}

/// `S × P` matrix of draws: the latent vector followed by the hyperparameters
/// on their natural scale.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorSamples {
    names: Vec<String>,
    draws: Vec<Vec<f64>>,
    latent_dim: usize,
    n_chains: usize,
    diagnostics: Diagnostics,
}

impl PosteriorSamples {
    pub fn new(
        names: Vec<String>,
        draws: Vec<Vec<f64>>,
        latent_dim: usize,
        n_chains: usize,
        diagnostics: Diagnostics,
    ) -> Self {
        debug_assert!(draws.iter().all(|d| d.len() == names.len()));
        Self {
            names,
            draws,
            latent_dim,
            n_chains: n_chains.max(1),
            diagnostics,
        }
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn draws(&self) -> &[Vec<f64>] {
        &self.draws
    }

    pub fn n_draws(&self) -> usize {
        self.draws.len()
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn n_chains(&self) -> usize {
        self.n_chains
    }

    pub fn diagnostics(&self) -> &Diagnostics {
        &self.diagnostics
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        self.draws.iter().map(|d| d[j]).collect()
    }

    pub fn column_by_name(&self, name: &str) -> Option<Vec<f64>> {
        self.index_of(name).map(|j| self.column(j))
    }

    /// Linear predictor for every row of `design` and every draw (`S × rows`).
    pub fn linear_predictor(
        &self,
        spec: &LatentModelSpec,
        design: &Design,
    ) -> Result<Vec<Vec<f64>>, GmrfError> {
        let layout = Layout::new(spec);
        if layout.p != self.latent_dim {
            return Err(GmrfError::InvalidModel(
                "samples were drawn from a different model layout".into(),
            ));
        }
        let (rows, offset) = layout.rows(spec, design)?;
        Ok(self
            .draws
            .iter()
            .map(|x| {
                rows.iter()
                    .zip(&offset)
                    .map(|(row, off)| off + row.iter().map(|&(i, v)| v * x[i]).sum::<f64>())
                    .collect()
            })
            .collect())
    }

    /// Predictor-facing values of a named block (`S × levels`); for BYM2 this is
    /// the total effect.
    pub fn block_draws(&self, spec: &LatentModelSpec, name: &str) -> Option<Vec<Vec<f64>>> {
        let layout = Layout::new(spec);
        let b = spec.blocks.iter().position(|b| b.name == name)?;
        let o = layout.block_offset[b];
        let n = spec.blocks[b].levels();
        Some(self.draws.iter().map(|x| x[o..o + n].to_vec()).collect())
    }

    /// Largest absolute constraint residual over all draws.
    pub fn max_constraint_residual(&self, spec: &LatentModelSpec) -> f64 {
        let layout = Layout::new(spec);
        let mut worst = 0.0f64;
        for (b, block) in spec.blocks.iter().enumerate() {
            let shift = if block.is_bym2() { block.levels() } else { 0 };
            let o = layout.block_offset[b] + shift;
            for a in block.structure.constraints() {
                for x in &self.draws {
                    let r: f64 = a.iter().zip(&x[o..o + a.len()]).map(|(u, v)| u * v).sum();
                    worst = worst.max(r.abs());
                }
            }
        }
        worst
    }

    /// Effective sample size of column `j`, pooling chains (Geyer's initial
    /// positive sequence on the averaged autocorrelations).
    pub fn ess(&self, j: usize) -> f64 {
        let per_chain = self.draws.len() / self.n_chains;
        if per_chain < 4 {
            return self.draws.len() as f64;
        }
        let chains: Vec<Vec<f64>> = (0..self.n_chains)
            .map(|c| {
                self.draws[c * per_chain..(c + 1) * per_chain]
                    .iter()
                    .map(|d| d[j])
                    .collect()
            })
            .collect();
        effective_sample_size(&chains)
    }
}

pub fn effective_sample_size(chains: &[Vec<f64>]) -> f64 {
    let m = chains.len();
    let n = chains.iter().map(Vec::len).min().unwrap_or(0);
    if m == 0 || n < 4 {
        return (m * n) as f64;
    }
    let means: Vec<f64> = chains.iter().map(|c| c[..n].iter().sum::<f64>() / n as f64).collect();
    let grand = means.iter().sum::<f64>() / m as f64;
    let within: f64 = chains
        .iter()
        .zip(&means)
        .map(|(c, mu)| c[..n].iter().map(|v| (v - mu).powi(2)).sum::<f64>() / (n - 1) as f64)
        .sum::<f64>()
        / m as f64;
    let between = if m > 1 {
        n as f64 * means.iter().map(|mu| (mu - grand).powi(2)).sum::<f64>() / (m - 1) as f64
    } else {
        0.0
    };
    let var_plus = (n - 1) as f64 / n as f64 * within + between / n as f64;
    if !(var_plus > 0.0) {
        return (m * n) as f64;
    }
    let autocov = |lag: usize| -> f64 {
        chains
            .iter()
            .zip(&means)
            .map(|(c, mu)| {
                (0..n - lag).map(|t| (c[t] - mu) * (c[t + lag] - mu)).sum::<f64>() / n as f64
            })
            .sum::<f64>()
            / m as f64
    };
    let rho = |lag: usize| 1.0 - (within - autocov(lag)) / var_plus;
    let mut sum = 0.0;
    let mut prev_pair = f64::INFINITY;
    let mut t = 0;
    while t + 1 < n {
        let pair = rho(t) + rho(t + 1);
        if pair < 0.0 {
            break;
        }
        let pair = pair.min(prev_pair);
        sum += pair;
        prev_pair = pair;
        t += 2;
    }
    let tau = (2.0 * sum - 1.0).max(1.0 / ((m * n) as f64).ln().max(1.0));
    (m * n) as f64 / tau
}

/// Empirical quantile with linear interpolation between order statistics.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 0 {
        return f64::NAN;
    }
    let pos = q.clamp(0.0, 1.0) * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let w = pos - lo as f64;
    sorted[lo] * (1.0 - w) + sorted[hi] * w
}
