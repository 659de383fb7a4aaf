//! One-block Metropolis-Hastings sampler for latent Gaussian models.
//!
//! Each iteration proposes new hyperparameters `θ'` by an adaptive random walk
//! and then the whole latent vector from a Gaussian approximation
//! `q(x | θ', y)` centred at the conditional mode, restricted to the linear
//! constraint subspace. The pair is accepted jointly. With a Gaussian
//! likelihood `q` is the exact full conditional, so the acceptance ratio
//! reduces to the ratio of marginal posteriors of `θ`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::linalg::{self, Cholesky, Dense};
use crate::model::{Compiled, HyperValues, LatentModelSpec};
use crate::samples::{Diagnostics, PosteriorSamples};
use crate::GmrfError;

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerSettings {
    pub chains: usize,
    pub burn_in: usize,
    /// Kept draws per chain.
    pub draws: usize,
    pub thin: usize,
    pub seed: u64,
    /// Starting hyperparameters on the working scale; skips the mode search.
    pub init_theta: Option<Vec<f64>>,
    /// Extra latent-only refresh moves per iteration.
    pub latent_refresh: usize,
    /// Chains whose post-burn-in acceptance falls below this are divergent.
    pub min_acceptance: f64,
    pub mode_sweeps: usize,
    pub max_newton: usize,
}

impl Default for SamplerSettings {
    fn default() -> Self {
        Self {
            chains: 2,
            burn_in: 500,
            draws: 500,
            thin: 1,
            seed: 1,
            init_theta: None,
            latent_refresh: 1,
            min_acceptance: 0.01,
            mode_sweeps: 3,
            max_newton: 50,
        }
    }
}

const NEWTON_TOL: f64 = 1e-9;

/// Gaussian approximation to `x | θ, y` on the constraint subspace.
pub(crate) struct Laplace {
    pub mean: Vec<f64>,
    q: Dense,
    chol: Cholesky,
    /// `Q̃^{-1} A'`
    v: Dense,
    /// Factor of `A Q̃^{-1} A'`.
    s: Option<Cholesky>,
    log_norm: f64,
}

impl Laplace {
    pub fn fit(
        c: &Compiled,
        h: &HyperValues,
        warm: Option<&[f64]>,
        max_iter: usize,
    ) -> Result<Self, GmrfError> {
        let prior = c.precision(h);
        let mut x = match warm {
            Some(w) => w.to_vec(),
            None => vec![0.0; c.p],
        };
        let mut current_obj = f64::NEG_INFINITY;
        let mut last: Option<(Dense, Cholesky, Dense, Option<Cholesky>)> = None;
        for _ in 0..max_iter.max(1) {
            let eta = c.eta(&x);
            let (g, w) = c.lik_terms(&eta, h);
            let mut q = prior.clone();
            let mut b = c.prior_shift.clone();
            for &r in &c.data_rows {
                let wr = w[r];
                let br = g[r] + wr * (eta[r] - c.row_offset[r]);
                let row = &c.rows[r];
                for &(i, ai) in row {
                    b[i] += ai * br;
                    if wr != 0.0 {
                        for &(j, aj) in row {
                            q[(i, j)] += wr * ai * aj;
                        }
                    }
                }
            }
            let chol = Cholesky::factor(&q)?;
            let (v, s) = constraint_solve(c, &chol)?;
            let mut x_new = b;
            chol.solve_in_place(&mut x_new);
            krige(c, &v, s.as_ref(), &mut x_new);

            if c.gaussian {
                x = x_new;
                last = Some((q, chol, v, s));
                break;
            }
            if current_obj == f64::NEG_INFINITY {
                current_obj = objective(c, &prior, h, &x);
            }
            let mut step = 1.0;
            let mut candidate = x_new.clone();
            let mut obj = objective(c, &prior, h, &candidate);
            while !(obj >= current_obj - 1e-10 * current_obj.abs().max(1.0)) && step > 1e-3 {
                step *= 0.5;
                for ((ci, xi), ni) in candidate.iter_mut().zip(&x).zip(&x_new) {
                    *ci = xi + step * (ni - xi);
                }
                obj = objective(c, &prior, h, &candidate);
            }
            if !obj.is_finite() {
                return Err(GmrfError::Numerical("non-finite Newton objective".into()));
            }
            let delta = candidate
                .iter()
                .zip(&x)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            x = candidate;
            current_obj = obj;
            last = Some((q, chol, v, s));
            if delta < NEWTON_TOL {
                break;
            }
        }
        let (q, chol, v, s) = last.expect("at least one Newton iteration");
        let log_norm = 0.5 * chol.log_det() + s.as_ref().map_or(0.0, |s| 0.5 * s.log_det());
        if x.iter().any(|v| !v.is_finite()) {
            return Err(GmrfError::Numerical("non-finite conditional mode".into()));
        }
        Ok(Self {
            mean: x,
            q,
            chol,
            v,
            s,
            log_norm,
        })
    }

    pub fn draw<R: Rng>(&self, c: &Compiled, rng: &mut R) -> Vec<f64> {
        let mut z: Vec<f64> = (0..c.p).map(|_| rng.sample(StandardNormal)).collect();
        self.chol.solve_lt_in_place(&mut z);
        for (zi, mi) in z.iter_mut().zip(&self.mean) {
            *zi += mi;
        }
        krige(c, &self.v, self.s.as_ref(), &mut z);
        if c.constraint_residual(&z) > 1e-10 {
            krige(c, &self.v, self.s.as_ref(), &mut z);
        }
        z
    }

    /// Log density on the constraint subspace, up to a constant shared by all
    /// hyperparameter values.
    pub fn log_density(&self, x: &[f64]) -> f64 {
        let diff: Vec<f64> = x.iter().zip(&self.mean).map(|(a, b)| a - b).collect();
        self.log_norm - 0.5 * linalg::quad_form(&self.q, &diff)
    }
}

fn constraint_solve(c: &Compiled, chol: &Cholesky) -> Result<(Dense, Option<Cholesky>), GmrfError> {
    let k = c.constraints.len();
    let mut v = linalg::zeros(c.p, k);
    if k == 0 {
        return Ok((v, None));
    }
    for (col, a) in c.constraints.iter().enumerate() {
        for (i, &ai) in a.iter().enumerate() {
            v[(i, col)] = ai;
        }
    }
    chol.solve_mat_in_place(&mut v);
    let mut s = &c.constraint_matrix * &v;
    for r in 0..k {
        for col in r + 1..k {
            let avg = 0.5 * (s[(r, col)] + s[(col, r)]);
            s[(r, col)] = avg;
            s[(col, r)] = avg;
        }
    }
    Ok((v, Some(Cholesky::factor(&s)?)))
}

/// Conditioning by kriging: `x <- x - Q̃^{-1} A' (A Q̃^{-1} A')^{-1} A x`.
fn krige(c: &Compiled, v: &Dense, s: Option<&Cholesky>, x: &mut [f64]) {
    let Some(s) = s else { return };
    let mut r: Vec<f64> = c.constraints.iter().map(|a| linalg::dot(a, x)).collect();
    s.solve_in_place(&mut r);
    for (col, &lambda) in r.iter().enumerate() {
        let vc = v.col(col);
        for (i, xi) in x.iter_mut().enumerate() {
            *xi -= vc[i] * lambda;
        }
    }
}

fn objective(c: &Compiled, prior: &Dense, h: &HyperValues, x: &[f64]) -> f64 {
    let eta = c.eta(x);
    -0.5 * linalg::quad_form(prior, x) + linalg::dot(&c.prior_shift, x) + c.log_lik_kernel(&eta, h)
}

fn log_target(c: &Compiled, theta: &[f64], h: &HyperValues, x: &[f64]) -> f64 {
    let eta = c.eta(x);
    c.log_hyperprior(theta) + c.log_prior_latent(h, x) + c.log_lik(&eta, h)
}

/// Laplace approximation to the log marginal posterior of `θ`; exact up to a
/// constant for a Gaussian likelihood.
fn log_marginal(c: &Compiled, theta: &[f64], warm: Option<&[f64]>, max_newton: usize) -> Option<(f64, Laplace)> {
    if !c.in_bounds(theta) {
        return None;
    }
    let h = c.hyper_values(theta);
    let lap = Laplace::fit(c, &h, warm, max_newton).ok()?;
    let value = log_target(c, theta, &h, &lap.mean) - lap.log_density(&lap.mean);
    value.is_finite().then_some((value, lap))
}

/// Conditional mode of the latent vector at fixed hyperparameters given on the
/// working scale (log σ, logit φ, log d, in [`LatentModelSpec::hyper_names`]
/// order).
pub fn laplace_mode(spec: &LatentModelSpec, theta: &[f64]) -> Result<Vec<f64>, GmrfError> {
    let c = Compiled::new(spec)?;
    if theta.len() != c.n_hyper() {
        return Err(GmrfError::InvalidModel(format!(
            "expected {} hyperparameters, got {}",
            c.n_hyper(),
            theta.len()
        )));
    }
    let h = c.hyper_values(theta);
    Ok(Laplace::fit(&c, &h, None, 200)?.mean)
}

/// Coordinate-wise Newton search on the log marginal; returns the mode and
/// per-coordinate curvature-based scales.
fn mode_search(c: &Compiled, start: Vec<f64>, sweeps: usize, max_newton: usize) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>), GmrfError> {
    let (mut best, lap) = log_marginal(c, &start, None, max_newton).ok_or(GmrfError::NonFinite)?;
    let mut warm = lap.mean;
    let mut theta = start;
    let d = theta.len();
    let mut scales = vec![0.5; d];
    let h = 0.1;
    for _ in 0..sweeps {
        for k in 0..d {
            let probe = |delta: f64| {
                let mut t = theta.clone();
                t[k] += delta;
                log_marginal(c, &t, Some(&warm), max_newton).map(|(v, _)| v)
            };
            let (Some(fp), Some(fm)) = (probe(h), probe(-h)) else {
                continue;
            };
            let grad = (fp - fm) / (2.0 * h);
            let curv = (fp - 2.0 * best + fm) / (h * h);
            let mut step = if curv < 0.0 {
                (-grad / curv).clamp(-1.5, 1.5)
            } else {
                grad.signum()
            };
            if curv < 0.0 {
                scales[k] = (1.0 / (-curv).sqrt()).clamp(0.02, 2.0);
            }
            for _ in 0..4 {
                let mut t = theta.clone();
                t[k] += step;
                if let Some((v, lap)) = log_marginal(c, &t, Some(&warm), max_newton) {
                    if v > best {
                        best = v;
                        theta = t;
                        warm = lap.mean;
                        break;
                    }
                }
                step *= 0.5;
            }
        }
    }
    Ok((theta, scales, warm))
}

struct ChainState {
    theta: Vec<f64>,
    hyper: HyperValues,
    x: Vec<f64>,
    log_target: f64,
    lap: Laplace,
    log_q: f64,
}

struct ChainOutput {
    draws: Vec<Vec<f64>>,
    acceptance: f64,
    refresh_acceptance: f64,
    max_residual: f64,
}

pub(crate) fn chain_seed(seed: u64, chain: usize) -> u64 {
    // splitmix64 finaliser over (seed, chain)
    let mut z = seed ^ (chain as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn hyper_record(c: &Compiled, h: &HyperValues) -> Vec<f64> {
    let mut out = Vec::new();
    for (b, block) in c.spec.blocks.iter().enumerate() {
        out.push(h.sigma[b]);
        if block.is_bym2() {
            out.push(h.phi[b]);
        }
    }
    if let Some(d) = h.d {
        out.push(d);
    }
    out
}

pub(crate) fn hyper_record_names(spec: &LatentModelSpec) -> Vec<String> {
    let mut out = Vec::new();
    for block in &spec.blocks {
        out.push(format!("sigma.{}", block.name));
        if block.is_bym2() {
            out.push(format!("phi.{}", block.name));
        }
    }
    if !spec.is_gaussian() {
        out.push("d".to_string());
    }
    out
}

fn run_chain(
    c: &Compiled,
    settings: &SamplerSettings,
    chain: usize,
    mode: &[f64],
    scales: &[f64],
    warm: &[f64],
) -> Result<ChainOutput, GmrfError> {
    let mut rng = ChaCha8Rng::seed_from_u64(chain_seed(settings.seed, chain));
    let d = mode.len();

    // start near the mode; fall back to the mode itself if the jitter lands badly
    let mut start = mode.to_vec();
    if chain > 0 {
        for (t, s) in start.iter_mut().zip(scales) {
            let z: f64 = rng.sample(StandardNormal);
            *t += 0.5 * s * z;
        }
    }
    let init = |theta: &[f64], rng: &mut ChaCha8Rng| -> Option<ChainState> {
        if !c.in_bounds(theta) {
            return None;
        }
        let hyper = c.hyper_values(theta);
        let lap = Laplace::fit(c, &hyper, Some(warm), settings.max_newton).ok()?;
        let x = lap.draw(c, rng);
        let lt = log_target(c, theta, &hyper, &x);
        let log_q = lap.log_density(&x);
        (lt.is_finite() && log_q.is_finite()).then(|| ChainState {
            theta: theta.to_vec(),
            hyper,
            x,
            log_target: lt,
            lap,
            log_q,
        })
    };
    let mut state = match init(&start, &mut rng) {
        Some(s) => s,
        None => init(mode, &mut rng).ok_or(GmrfError::NonFinite)?,
    };

    // adaptive random-walk proposal on θ
    let target_rate = if d == 1 { 0.44 } else { 0.234 };
    let mut log_scale = 0.0f64;
    let base = 2.38 / (d.max(1) as f64).sqrt();
    let mut prop_chol: Vec<Vec<f64>> = diag_factor(scales, base);
    let mut mean = vec![0.0; d];
    let mut cov = vec![vec![0.0; d]; d];
    let mut n_adapt = 0usize;

    let total = settings.burn_in + settings.draws * settings.thin.max(1);
    let mut draws = Vec::with_capacity(settings.draws);
    let (mut acc, mut tried) = (0usize, 0usize);
    let (mut racc, mut rtried) = (0usize, 0usize);
    let mut max_residual = 0.0f64;

    for iter in 0..total {
        let burning = iter < settings.burn_in;

        // joint (θ, x) move
        let z: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let factor = log_scale.exp();
        let proposal: Vec<f64> = (0..d)
            .map(|i| {
                state.theta[i]
                    + factor * (0..=i).map(|j| prop_chol[i][j] * z[j]).sum::<f64>()
            })
            .collect();
        let mut accepted = false;
        if c.in_bounds(&proposal) {
            let hyper = c.hyper_values(&proposal);
            if let Ok(lap) = Laplace::fit(c, &hyper, Some(&state.lap.mean), settings.max_newton) {
                let x = lap.draw(c, &mut rng);
                let lt = log_target(c, &proposal, &hyper, &x);
                let log_q = lap.log_density(&x);
                let log_alpha = (lt - log_q) - (state.log_target - state.log_q);
                let u: f64 = rng.random();
                if log_alpha.is_finite() && u.ln() < log_alpha {
                    state = ChainState {
                        theta: proposal,
                        hyper,
                        x,
                        log_target: lt,
                        lap,
                        log_q,
                    };
                    accepted = true;
                }
            }
        }
        if !burning {
            tried += 1;
            acc += accepted as usize;
        }

        // latent-only refresh from the cached approximation
        for _ in 0..settings.latent_refresh {
            let x = state.lap.draw(c, &mut rng);
            let lt = log_target(c, &state.theta, &state.hyper, &x);
            let log_q = state.lap.log_density(&x);
            let log_alpha = (lt - log_q) - (state.log_target - state.log_q);
            let u: f64 = rng.random();
            let ok = log_alpha.is_finite() && u.ln() < log_alpha;
            if ok {
                state.x = x;
                state.log_target = lt;
                state.log_q = log_q;
            }
            if !burning {
                rtried += 1;
                racc += ok as usize;
            }
        }

        if burning && d > 0 {
            let a = if accepted { 1.0 } else { 0.0 };
            log_scale += (a - target_rate) / ((iter + 1) as f64).powf(0.6);
            log_scale = log_scale.clamp(-6.0, 3.0);
            n_adapt += 1;
            let w = 1.0 / n_adapt as f64;
            let delta: Vec<f64> = (0..d).map(|i| state.theta[i] - mean[i]).collect();
            for i in 0..d {
                mean[i] += w * delta[i];
            }
            for i in 0..d {
                for j in 0..d {
                    cov[i][j] += w * ((1.0 - w) * delta[i] * delta[j] - cov[i][j]);
                }
            }
            if n_adapt >= (100).max(10 * d) && n_adapt % 25 == 0 {
                if let Some(f) = cov_factor(&cov, base) {
                    prop_chol = f;
                }
            }
        } else if !burning {
            let kept = iter - settings.burn_in;
            if kept % settings.thin.max(1) == 0 {
                max_residual = max_residual.max(c.constraint_residual(&state.x));
                let mut row = state.x.clone();
                row.extend(hyper_record(c, &state.hyper));
                draws.push(row);
            }
        }
    }

    let acceptance = if tried > 0 { acc as f64 / tried as f64 } else { 1.0 };
    let refresh_acceptance = if rtried > 0 { racc as f64 / rtried as f64 } else { 1.0 };
    if tried >= 50 && acceptance < settings.min_acceptance {
        return Err(GmrfError::Divergent {
            chain,
            rate: acceptance,
            window: tried,
        });
    }
    Ok(ChainOutput {
        draws,
        acceptance,
        refresh_acceptance,
        max_residual,
    })
}

fn diag_factor(scales: &[f64], base: f64) -> Vec<Vec<f64>> {
    let d = scales.len();
    (0..d)
        .map(|i| {
            let mut row = vec![0.0; d];
            row[i] = base * scales[i];
            row
        })
        .collect()
}

fn cov_factor(cov: &[Vec<f64>], base: f64) -> Option<Vec<Vec<f64>>> {
    let d = cov.len();
    let m = Dense::from_fn(d, d, |i, j| {
        base * base * (cov[i][j] + if i == j { 1e-6 } else { 0.0 })
    });
    let chol = Cholesky::factor(&m).ok()?;
    let l = chol.l();
    Some(
        (0..d)
            .map(|i| (0..d).map(|j| if j <= i { l[(i, j)] } else { 0.0 }).collect())
            .collect(),
    )
}

/// Draws from the posterior of `spec`. Chains run in parallel with seeds
/// derived from `settings.seed`; results are identical for any thread count.
pub fn sample_posterior(
    spec: &LatentModelSpec,
    settings: &SamplerSettings,
) -> Result<PosteriorSamples, GmrfError> {
    if settings.chains == 0 || settings.draws == 0 {
        return Err(GmrfError::InvalidModel(
            "need at least one chain and one draw".into(),
        ));
    }
    let c = Compiled::new(spec)?;
    let start = match &settings.init_theta {
        Some(t) if t.len() == c.n_hyper() => t.clone(),
        Some(t) => {
            return Err(GmrfError::InvalidModel(format!(
                "init_theta has {} entries, model has {} hyperparameters",
                t.len(),
                c.n_hyper()
            )))
        }
        None => c.default_theta(),
    };
    let sweeps = if settings.init_theta.is_some() {
        settings.mode_sweeps.min(1)
    } else {
        settings.mode_sweeps
    };
    let (mode, scales, warm) = mode_search(&c, start, sweeps, settings.max_newton)?;

    let outputs: Vec<Result<ChainOutput, GmrfError>> = (0..settings.chains)
        .into_par_iter()
        .map(|chain| run_chain(&c, settings, chain, &mode, &scales, &warm))
        .collect();
    let mut draws = Vec::new();
    let mut acceptance = Vec::new();
    let mut refresh = Vec::new();
    let mut max_residual = 0.0f64;
    for out in outputs {
        let out = out?;
        acceptance.push(out.acceptance);
        refresh.push(out.refresh_acceptance);
        max_residual = max_residual.max(out.max_residual);
        draws.extend(out.draws);
    }
    let mut names = c.latent_names();
    names.extend(hyper_record_names(spec));
    let diagnostics = Diagnostics {
        acceptance,
        refresh_acceptance: refresh,
        max_constraint_residual: max_residual,
        mode_theta: mode,
        hyper_names: spec.hyper_names(),
    };
    Ok(PosteriorSamples::new(
        names,
        draws,
        c.p,
        settings.chains,
        diagnostics,
    ))
}
