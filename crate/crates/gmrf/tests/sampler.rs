use fertsae_gmrf::nb::nb_loglik;
use fertsae_gmrf::{
    build_structure, laplace_mode, sample_posterior, Design, EffectBlock, FixedEffect,
    LatentModelSpec, Likelihood, LogNormalPrior, NormalPrior, Observations, PcPriorSigma,
    PosteriorSamples, RegionGraph, SamplerSettings, StructureKind, StructureMatrix,
};
use nalgebra::{DMatrix, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Poisson};

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn var(v: &[f64]) -> f64 {
    let m = mean(v);
    v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64
}

/// Monte-Carlo standard error of the mean of column `j`.
fn mcse(s: &PosteriorSamples, j: usize) -> f64 {
    (var(&s.column(j)) / s.ess(j)).sqrt()
}

#[test]
fn conjugate_normal_posterior() {
    let mut design = Design::with_rows(1);
    design.push_fixed(vec![1.0]);
    let spec = LatentModelSpec {
        fixed: vec![FixedEffect::new("x", NormalPrior { mean: 0.0, sd: 1.0 })],
        blocks: vec![],
        design,
        data: Observations::gaussian(vec![0], vec![1.0], vec![1.0]),
    };
    let s = sample_posterior(
        &spec,
        &SamplerSettings {
            burn_in: 100,
            draws: 2000,
            seed: 11,
            ..Default::default()
        },
    )
    .unwrap();
    let x = s.column(0);
    let se_mean = mcse(&s, 0);
    assert!((mean(&x) - 0.5).abs() < 3.0 * se_mean);
    // variance of a sample variance for normal data: 2σ⁴/(n-1)
    let se_var = (2.0 * 0.25 / s.ess(0)).sqrt();
    assert!((var(&x) - 0.5).abs() < 3.0 * se_var, "{}", var(&x));
}

/// y_i ~ N(u_i, V_i), u_i ~ N(0, σ²) iid, σ ~ PC(1, 0.01).
fn two_area_spec() -> LatentModelSpec {
    let mut design = Design::with_rows(2);
    design.push_block(vec![0, 1]);
    LatentModelSpec {
        fixed: vec![],
        blocks: vec![EffectBlock::new("u", StructureMatrix::iid(2))],
        design,
        data: Observations::gaussian(vec![0, 1], vec![0.6, -0.4], vec![0.1, 0.3]),
    }
}

/// Grid quadrature over log σ; given σ the areas are conjugate normal, so
/// y_i ~ N(0, σ² + V_i) and E[u_i | y, σ] = y_i σ² / (σ² + V_i).
fn two_area_grid_means() -> [f64; 2] {
    let prior = PcPriorSigma::default();
    let y = [0.6, -0.4];
    let v = [0.1, 0.3];
    let (lo, hi, n) = (-20.0, 6.0, 26_001);
    let h = (hi - lo) / (n - 1) as f64;
    let mut z = 0.0;
    let mut m = [0.0; 2];
    for a in 0..n {
        let ls = lo + h * a as f64;
        let s2 = (2.0 * ls).exp();
        let mut l = prior.log_density_log_sigma(ls);
        for i in 0..2 {
            l += -0.5 * (s2 + v[i]).ln() - 0.5 * y[i] * y[i] / (s2 + v[i]);
        }
        let w = l.exp();
        z += w;
        for i in 0..2 {
            m[i] += w * y[i] * s2 / (s2 + v[i]);
        }
    }
    [m[0] / z, m[1] / z]
}

#[test]
fn two_area_fay_herriot_matches_grid_oracle() {
    let oracle = two_area_grid_means();
    let s = sample_posterior(
        &two_area_spec(),
        &SamplerSettings {
            chains: 4,
            burn_in: 500,
            draws: 3000,
            seed: 5,
            ..Default::default()
        },
    )
    .unwrap();
    for i in 0..2 {
        let m = mean(&s.column(i));
        assert!((m - oracle[i]).abs() < 0.02, "u{i}: {m} vs {}", oracle[i]);
    }
}

/// Generalized inverse of a structure by eigendecomposition.
fn ginv(s: &StructureMatrix) -> DMatrix<f64> {
    let mut m = DMatrix::<f64>::zeros(s.dim(), s.dim());
    for &(i, j, v) in s.entries() {
        m[(i, j)] += v;
    }
    let eig = SymmetricEigen::new(m);
    let n = s.dim();
    let mut out = DMatrix::<f64>::zeros(n, n);
    for k in 0..n {
        let l = eig.eigenvalues[k];
        if l > 1e-9 {
            let v = eig.eigenvectors.column(k);
            out += (v * v.transpose()) / l;
        }
    }
    out
}

fn prior_only(blocks: Vec<EffectBlock>, draws: usize, seed: u64) -> (LatentModelSpec, PosteriorSamples) {
    let mut design = Design::with_rows(0);
    for _ in &blocks {
        design.push_block(Vec::new());
    }
    let spec = LatentModelSpec {
        fixed: vec![],
        blocks,
        design,
        data: Observations::empty_gaussian(),
    };
    let s = sample_posterior(
        &spec,
        &SamplerSettings {
            chains: 2,
            burn_in: 200,
            draws,
            seed,
            ..Default::default()
        },
    )
    .unwrap();
    (spec, s)
}

#[test]
fn prior_only_recovers_prior_moments() {
    let rw = StructureMatrix::rw1(5, true).unwrap();
    let g = RegionGraph::lattice(2, 3);
    let bym = build_structure(StructureKind::Bym2, None, Some(&g), true).unwrap();
    let rw_cov = ginv(&rw) * 0.7f64.powi(2);
    let icar_cov = ginv(&bym);
    let (sigma_b, phi_b) = (1.3, 0.4);
    let blocks = vec![
        EffectBlock::new("rw", rw).fix_sigma(0.7),
        EffectBlock::bym2("space", bym).unwrap().fix_sigma(sigma_b).fix_phi(phi_b),
        EffectBlock::new("free", StructureMatrix::iid(3)),
    ];
    let (spec, s) = prior_only(blocks, 3000, 21);
    assert!(s.max_constraint_residual(&spec) <= 1e-8);

    let check_var = |j: usize, expected: f64| {
        let x = s.column(j);
        let sq: Vec<f64> = x.iter().map(|v| v * v).collect();
        let se = (var(&sq) / s.ess(j)).sqrt();
        let m2 = mean(&sq);
        assert!((m2 - expected).abs() < 3.0 * se, "column {j}: {m2} vs {expected} (se {se})");
        assert!(mean(&x).abs() < 3.0 * mcse(&s, j));
    };
    for i in 0..5 {
        check_var(i, rw_cov[(i, i)]);
    }
    for i in 0..6 {
        let expected = sigma_b * sigma_b * ((1.0 - phi_b) + phi_b * icar_cov[(i, i)]);
        check_var(5 + i, expected);
        check_var(11 + i, icar_cov[(i, i)]);
    }
    // free σ follows its exponential prior
    let j = s.index_of("sigma.free").unwrap();
    let rate = PcPriorSigma::default().rate();
    let m = mean(&s.column(j));
    assert!((m - 1.0 / rate).abs() < 3.0 * mcse(&s, j), "{m}");
    for i in 0..3 {
        let k = s.index_of(&format!("free[{}]", i + 1)).unwrap();
        assert!(mean(&s.column(k)).abs() < 3.0 * mcse(&s, k));
    }
}

fn sample_cov(s: &PosteriorSamples, cols: &[usize]) -> DMatrix<f64> {
    let n = cols.len();
    let ms: Vec<f64> = cols.iter().map(|&j| mean(&s.column(j))).collect();
    let mut out = DMatrix::<f64>::zeros(n, n);
    for d in s.draws() {
        for a in 0..n {
            for b in 0..n {
                out[(a, b)] += (d[cols[a]] - ms[a]) * (d[cols[b]] - ms[b]);
            }
        }
    }
    out / (s.n_draws() - 1) as f64
}

#[test]
fn bym2_composition_limits() {
    let g = RegionGraph::path(4);
    let sigma = 0.8;
    for (phi, label) in [(0.0, "iid"), (1.0, "icar")] {
        let bym = build_structure(StructureKind::Bym2, None, Some(&g), true).unwrap();
        let expected = if phi == 0.0 {
            DMatrix::identity(4, 4) * sigma * sigma
        } else {
            ginv(&bym) * sigma * sigma
        };
        let blocks = vec![EffectBlock::bym2("u", bym).unwrap().fix_sigma(sigma).fix_phi(phi)];
        let (_, s) = prior_only(blocks, 4000, 8);
        let cov = sample_cov(&s, &[0, 1, 2, 3]);
        for a in 0..4 {
            for b in 0..4 {
                // se of a sample covariance of Gaussians: sqrt((Σaa Σbb + Σab²)/n)
                let se = ((expected[(a, a)] * expected[(b, b)] + expected[(a, b)].powi(2))
                    / s.n_draws() as f64)
                    .sqrt();
                assert!(
                    (cov[(a, b)] - expected[(a, b)]).abs() < 3.0 * se + 1e-9,
                    "{label} ({a},{b}): {} vs {}",
                    cov[(a, b)],
                    expected[(a, b)]
                );
            }
        }
    }
}

#[test]
fn constrained_fit_residuals_and_determinism() {
    let g = RegionGraph::lattice(2, 3);
    let bym = build_structure(StructureKind::Bym2, None, Some(&g), true).unwrap();
    let rw = StructureMatrix::rw2(4, true).unwrap();
    let icar = StructureMatrix::icar(&g, true).unwrap();
    let inter = fertsae_gmrf::build_interaction(&icar, &rw).unwrap();
    let n = 24;
    let mut design = Design::with_rows(n);
    design.push_fixed(vec![1.0; n]);
    design.push_block((0..n).map(|r| r / 4).collect());
    design.push_block((0..n).map(|r| r % 4).collect());
    design.push_block((0..n).collect());
    let y: Vec<f64> = (0..n).map(|r| -1.0 + 0.1 * ((r * 7) % 5) as f64).collect();
    let spec = LatentModelSpec {
        fixed: vec![FixedEffect::intercept()],
        blocks: vec![
            EffectBlock::bym2("space", bym).unwrap(),
            EffectBlock::new("time", rw),
            EffectBlock::new("space_time", inter),
        ],
        design,
        data: Observations::gaussian((0..n).collect(), y, vec![0.05; n]),
    };
    let settings = SamplerSettings {
        burn_in: 200,
        draws: 200,
        seed: 99,
        ..Default::default()
    };
    let a = sample_posterior(&spec, &settings).unwrap();
    assert!(a.max_constraint_residual(&spec) <= 1e-8);
    let b = sample_posterior(&spec, &settings).unwrap();
    assert_eq!(a.draws(), b.draws());
}

fn intercept_nb(y: Vec<f64>, exposure: Vec<f64>, d: Option<f64>) -> LatentModelSpec {
    let n = y.len();
    let mut design = Design::with_rows(1);
    design.push_fixed(vec![1.0]);
    LatentModelSpec {
        fixed: vec![FixedEffect::intercept()],
        blocks: vec![],
        design,
        data: Observations {
            row: vec![0; n],
            y,
            likelihood: Likelihood::NegativeBinomial {
                exposure,
                d_prior: LogNormalPrior::default(),
                d,
            },
        },
    }
}

#[test]
fn single_cell_negative_binomial_matches_quadrature() {
    let d = 10.0;
    let spec = intercept_nb(vec![5.0], vec![10.0], Some(d));
    // 1-D quadrature over α with the N(0, 1000²) prior
    let (lo, hi, n) = (-6.0, 3.0, 90_001);
    let h = (hi - lo) / (n - 1) as f64;
    let (mut z, mut m1, mut best, mut arg) = (0.0, 0.0, f64::NEG_INFINITY, 0.0);
    for k in 0..n {
        let a = lo + h * k as f64;
        let lp = nb_loglik(5, 10.0 * a.exp(), d).unwrap() - 0.5 * (a / 1000.0).powi(2);
        if lp > best {
            best = lp;
            arg = a;
        }
        let w = lp.exp();
        z += w;
        m1 += w * a;
    }
    let oracle_mean = m1 / z;
    let mode = laplace_mode(&spec, &[]).unwrap()[0];
    assert!((mode - arg).abs() < 2.0 * h);
    assert!((mode.exp() - 0.5).abs() < 1e-3);

    let s = sample_posterior(
        &spec,
        &SamplerSettings {
            burn_in: 200,
            draws: 3000,
            seed: 3,
            ..Default::default()
        },
    )
    .unwrap();
    let m = mean(&s.column(0));
    assert!((m - oracle_mean).abs() < 3.0 * mcse(&s, 0), "{m} vs {oracle_mean}");
}

#[test]
fn exposure_scaling_shifts_intercept_only() {
    let y = vec![3.0, 0.0, 7.0, 2.0, 4.0];
    let e = vec![4.0, 1.5, 9.0, 3.0, 5.5];
    let base = laplace_mode(&intercept_nb(y.clone(), e.clone(), Some(6.0)), &[]).unwrap()[0];
    for c in [0.1, 3.0, 250.0] {
        let scaled: Vec<f64> = e.iter().map(|v| v * c).collect();
        let m = laplace_mode(&intercept_nb(y.clone(), scaled, Some(6.0)), &[]).unwrap()[0];
        assert!((m + c.ln() - base).abs() < 1e-5, "c={c}");
    }
}

fn simulate_counts(n: usize, rate: f64, d: Option<f64>, seed: u64) -> (Vec<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut y = Vec::with_capacity(n);
    let mut e = Vec::with_capacity(n);
    for k in 0..n {
        let exposure = 2.0 + (k % 7) as f64;
        let mut mu = exposure * rate;
        if let Some(d) = d {
            mu *= Gamma::new(d, 1.0 / d).unwrap().sample(&mut rng);
        }
        let count: f64 = if mu > 0.0 {
            Poisson::new(mu).unwrap().sample(&mut rng)
        } else {
            0.0
        };
        y.push(count);
        e.push(exposure);
    }
    (y, e)
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    v[v.len() / 2]
}

#[test]
fn overdispersion_is_recovered() {
    let settings = SamplerSettings {
        burn_in: 300,
        draws: 600,
        seed: 17,
        ..Default::default()
    };
    let (y, e) = simulate_counts(2000, 0.2, None, 1);
    let s = sample_posterior(&intercept_nb(y, e, None), &settings).unwrap();
    let d_poisson = median(s.column_by_name("d").unwrap());
    assert!(d_poisson > 50.0, "Poisson data: median d {d_poisson}");

    let mut inside = 0;
    for rep in 0..5 {
        let (y, e) = simulate_counts(2000, 0.2, Some(5.0), 100 + rep);
        let s = sample_posterior(&intercept_nb(y, e, None), &settings).unwrap();
        let d = median(s.column_by_name("d").unwrap());
        inside += (3.0..=8.0).contains(&d) as usize;
    }
    assert!(inside >= 4, "{inside} of 5 replicates in [3, 8]");
}
