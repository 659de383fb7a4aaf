//! Negative-binomial likelihood with mean `μ` and overdispersion `d`, so that
//! `var = μ (1 + μ / d)`.

use statrs::function::gamma::ln_gamma;

use crate::GmrfError;

pub fn nb_loglik(y: u64, mu: f64, d: f64) -> Result<f64, GmrfError> {
    if !(mu > 0.0 && mu.is_finite()) || !(d > 0.0 && d.is_finite()) {
        return Err(GmrfError::InvalidPrior(format!(
            "negative binomial needs mu > 0 and d > 0, got mu={mu}, d={d}"
        )));
    }
    Ok(nb_logpmf(y as f64, mu, d))
}

/// Unchecked log pmf; `y` is a non-negative integer held as `f64`.
pub fn nb_logpmf(y: f64, mu: f64, d: f64) -> f64 {
    // d log(d/(d+μ)) + y log(μ/(d+μ)), written to stay accurate for large d
    let log_d_mu = (d + mu).ln();
    ln_gamma(y + d) - ln_gamma(d) - ln_gamma(y + 1.0) + d * (d.ln() - log_d_mu)
        + if y > 0.0 { y * (mu.ln() - log_d_mu) } else { 0.0 }
}

/// `ln Γ(d + y) − ln Γ(d)`.
pub fn ln_gamma_ratio(d: f64, y: f64) -> f64 {
    ln_gamma(d + y) - ln_gamma(d)
}

pub fn nb_variance(mu: f64, d: f64) -> f64 {
    mu * (1.0 + mu / d)
}

pub fn poisson_logpmf(y: u64, mu: f64) -> f64 {
    let y = y as f64;
    y * mu.ln() - mu - ln_gamma(y + 1.0)
}

/// Log-likelihood and its first two derivatives in the log-rate `η`, where
/// `μ = exposure · exp(η)`. Returns `(value, gradient, negative hessian)`.
#[inline]
pub fn nb_eta_terms(y: f64, exposure: f64, eta: f64, d: f64) -> (f64, f64, f64) {
    let mu = exposure * eta.exp();
    let value = nb_logpmf(y, mu, d);
    let frac = mu / (d + mu);
    let grad = y - (y + d) * frac;
    let neg_hess = (y + d) * frac * d / (d + mu);
    (value, grad, neg_hess)
}
