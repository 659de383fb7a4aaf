//! Penalised-complexity and auxiliary hyperpriors.

use crate::structure::StructureMatrix;
use crate::GmrfError;

/// Exponential prior on a standard deviation `σ` with `P(σ > U) = α`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PcPriorSigma {
    pub upper: f64,
    pub alpha: f64,
    rate: f64,
}

impl PcPriorSigma {
    pub fn new(upper: f64, alpha: f64) -> Result<Self, GmrfError> {
        if !(upper > 0.0 && upper.is_finite()) || !(alpha > 0.0 && alpha < 1.0) {
            return Err(GmrfError::InvalidPrior(format!(
                "PC prior on sigma needs U > 0 and 0 < alpha < 1, got U={upper}, alpha={alpha}"
            )));
        }
        Ok(Self {
            upper,
            alpha,
            rate: -alpha.ln() / upper,
        })
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    pub fn log_density(&self, sigma: f64) -> f64 {
        if sigma < 0.0 {
            return f64::NEG_INFINITY;
        }
        self.rate.ln() - self.rate * sigma
    }

    /// Log density of `log σ`.
    pub fn log_density_log_sigma(&self, log_sigma: f64) -> f64 {
        let sigma = log_sigma.exp();
        self.log_density(sigma) + log_sigma
    }

    pub fn tail_probability(&self, sigma: f64) -> f64 {
        (-self.rate * sigma.max(0.0)).exp()
    }

    pub fn mean(&self) -> f64 {
        1.0 / self.rate
    }
}

impl Default for PcPriorSigma {
    /// `P(σ > 1) = 0.01`.
    fn default() -> Self {
        Self::new(1.0, 0.01).expect("valid defaults")
    }
}

/// PC prior for the BYM2 mixing parameter `φ`, built from the eigenvalues of the
/// scaled ICAR generalized inverse and tabulated on a logit grid.
#[derive(Debug, Clone)]
pub struct PcPriorPhi {
    pub upper: f64,
    pub alpha: f64,
    rate: f64,
    eigen: Vec<f64>,
}

impl PcPriorPhi {
    /// `P(φ < U) = α`.
    pub fn new(structure: &StructureMatrix, upper: f64, alpha: f64) -> Result<Self, GmrfError> {
        if !structure.is_scaled() {
            return Err(GmrfError::Unscaled);
        }
        if !(upper > 0.0 && upper < 1.0) || !(alpha > 0.0 && alpha < 1.0) {
            return Err(GmrfError::InvalidPrior(format!(
                "PC prior on phi needs 0 < U < 1 and 0 < alpha < 1, got U={upper}, alpha={alpha}"
            )));
        }
        let eigen = structure.generalized_inverse_eigenvalues()?;
        Self::from_eigenvalues(eigen, upper, alpha)
    }

    pub fn from_eigenvalues(eigen: Vec<f64>, upper: f64, alpha: f64) -> Result<Self, GmrfError> {
        let mut prior = Self {
            upper,
            alpha,
            rate: 0.0,
            eigen,
        };
        let d_upper = prior.distance(upper);
        if !(d_upper > 0.0) {
            return Err(GmrfError::InvalidPrior(
                "degenerate structure: zero distance from base model".into(),
            ));
        }
        // P(φ < U) = P(d < d(U)) = 1 - exp(-rate d(U))
        prior.rate = -(1.0 - alpha).ln() / d_upper;
        Ok(prior)
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    /// Kullback-Leibler divergence of the BYM2 covariance at `φ` from the IID
    /// base model.
    pub fn kld(&self, phi: f64) -> f64 {
        self.kld_split(phi, 1.0 - phi)
    }

    /// KLD with `φ` and `1 - φ` supplied separately to keep precision near 1.
    fn kld_split(&self, phi: f64, one_minus: f64) -> f64 {
        let trace_term: f64 = self.eigen.iter().map(|g| g - 1.0).sum::<f64>();
        let log_det: f64 = self.eigen.iter().map(|g| (one_minus + phi * g).ln()).sum();
        0.5 * (phi * trace_term - log_det)
    }

    fn kld_derivative(&self, phi: f64, one_minus: f64) -> f64 {
        let s: f64 = self
            .eigen
            .iter()
            .map(|g| (g - 1.0) - (g - 1.0) / (one_minus + phi * g))
            .sum();
        0.5 * s
    }

    /// Distance `d(φ) = sqrt(2 KLD(φ))`.
    pub fn distance(&self, phi: f64) -> f64 {
        (2.0 * self.kld(phi)).max(0.0).sqrt()
    }

    /// Distance at `φ = logistic(z)`, accurate for `φ` close to 1.
    pub fn distance_logit(&self, z: f64) -> f64 {
        (2.0 * self.kld_split(logistic(z), logistic(-z))).max(0.0).sqrt()
    }

    fn log_density_split(&self, phi: f64, one_minus: f64) -> f64 {
        let d = (2.0 * self.kld_split(phi, one_minus)).max(0.0).sqrt();
        let jac = if d > 1e-6 {
            self.kld_derivative(phi, one_minus) / d
        } else {
            // d ≈ φ sqrt(Σ (γ-1)^2 / 2) near the base model
            (0.5 * self.eigen.iter().map(|g| (g - 1.0).powi(2)).sum::<f64>()).sqrt()
        };
        self.rate.ln() - self.rate * d + jac.abs().ln()
    }

    /// Log density of `φ` on (0, 1).
    pub fn log_density(&self, phi: f64) -> f64 {
        if !(phi > 0.0 && phi < 1.0) {
            return f64::NEG_INFINITY;
        }
        self.log_density_split(phi, 1.0 - phi)
    }

    /// Log density of `logit φ`.
    pub fn log_density_logit(&self, z: f64) -> f64 {
        let (phi, one_minus) = (logistic(z), logistic(-z));
        if phi == 0.0 || one_minus == 0.0 {
            return f64::NEG_INFINITY;
        }
        self.log_density_split(phi, one_minus) + phi.ln() + one_minus.ln()
    }
}

/// Normal prior on a scalar, parameterised by mean and standard deviation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormalPrior {
    pub mean: f64,
    pub sd: f64,
}

impl NormalPrior {
    pub fn log_density(&self, x: f64) -> f64 {
        let z = (x - self.mean) / self.sd;
        -0.5 * z * z - self.sd.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
    }
}

/// Log-normal prior on a positive scalar, held as a normal prior on its log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogNormalPrior {
    pub median: f64,
    pub log_sd: f64,
}

impl LogNormalPrior {
    pub fn log_density_log(&self, log_x: f64) -> f64 {
        NormalPrior {
            mean: self.median.ln(),
            sd: self.log_sd,
        }
        .log_density(log_x)
    }
}

impl Default for LogNormalPrior {
    /// Overdispersion default: median 10, log-sd 2.
    fn default() -> Self {
        Self {
            median: 10.0,
            log_sd: 2.0,
        }
    }
}

pub fn logistic(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::RegionGraph;

    #[test]
    fn sigma_rate_matches_tail_statement() {
        let p = PcPriorSigma::new(1.0, 0.01).unwrap();
        assert!((p.rate() - 4.605170185988091).abs() < 1e-12);
        assert!((p.tail_probability(1.0) - 0.01).abs() < 1e-15);
    }

    #[test]
    fn invalid_sigma_parameters_rejected() {
        assert!(PcPriorSigma::new(0.0, 0.5).is_err());
        assert!(PcPriorSigma::new(1.0, 1.0).is_err());
        assert!(PcPriorSigma::new(1.0, 0.0).is_err());
    }

    #[test]
    fn phi_prior_rejects_unscaled() {
        let s = StructureMatrix::icar(&RegionGraph::path(5), false).unwrap();
        assert!(matches!(
            PcPriorPhi::new(&s, 0.5, 2.0 / 3.0),
            Err(GmrfError::Unscaled)
        ));
    }

    #[test]
    fn phi_distance_is_monotone() {
        let s = StructureMatrix::icar(&RegionGraph::lattice(3, 4), true).unwrap();
        let p = PcPriorPhi::new(&s, 0.5, 2.0 / 3.0).unwrap();
        let mut last = -1.0;
        for k in 1..1000 {
            let d = p.distance(k as f64 / 1000.0);
            assert!(d > last);
            last = d;
        }
    }
}
