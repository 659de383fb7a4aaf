//! Latent Gaussian model specification and its compiled dense form.

use crate::linalg::{self, Dense};
use crate::nb;
use crate::prior::{logistic, LogNormalPrior, NormalPrior, PcPriorPhi, PcPriorSigma};
use crate::structure::{StructureKind, StructureMatrix};
use crate::GmrfError;

/// Fixed-effect coefficient with a normal prior. A coefficient with `value` set
/// is held at that value and contributes only an offset.
#[derive(Debug, Clone)]
pub struct FixedEffect {
    pub name: String,
    pub prior: NormalPrior,
    pub value: Option<f64>,
}

impl FixedEffect {
    pub fn new(name: impl Into<String>, prior: NormalPrior) -> Self {
        Self {
            name: name.into(),
            prior,
            value: None,
        }
    }

    pub fn intercept() -> Self {
        Self::new(
            "intercept",
            NormalPrior {
                mean: 0.0,
                sd: 1000.0,
            },
        )
    }

    /// Regression coefficient with precision 0.001.
    pub fn coefficient(name: impl Into<String>) -> Self {
        Self::new(
            name,
            NormalPrior {
                mean: 0.0,
                sd: 1000f64.sqrt(),
            },
        )
    }

    pub fn fixed_at(mut self, value: f64) -> Self {
        self.value = Some(value);
        self
    }
}

/// A random-effect block: `σ`-scaled structured prior, or BYM2 when the
/// structure kind is [`StructureKind::Bym2`].
#[derive(Debug, Clone)]
pub struct EffectBlock {
    pub name: String,
    pub structure: StructureMatrix,
    pub sigma_prior: PcPriorSigma,
    pub phi_prior: Option<PcPriorPhi>,
    pub sigma: Option<f64>,
    pub phi: Option<f64>,
}

impl EffectBlock {
    pub fn new(name: impl Into<String>, structure: StructureMatrix) -> Self {
        Self {
            name: name.into(),
            structure,
            sigma_prior: PcPriorSigma::default(),
            phi_prior: None,
            sigma: None,
            phi: None,
        }
    }

    /// BYM2 block with the default `P(φ < 0.5) = 2/3` prior.
    pub fn bym2(name: impl Into<String>, structure: StructureMatrix) -> Result<Self, GmrfError> {
        if structure.kind() != StructureKind::Bym2 {
            return Err(GmrfError::InvalidModel(format!(
                "BYM2 block needs a Bym2 structure, got {:?}",
                structure.kind()
            )));
        }
        let phi_prior = PcPriorPhi::new(&structure, 0.5, 2.0 / 3.0)?;
        let mut block = Self::new(name, structure);
        block.phi_prior = Some(phi_prior);
        Ok(block)
    }

    pub fn with_sigma_prior(mut self, prior: PcPriorSigma) -> Self {
        self.sigma_prior = prior;
        self
    }

    pub fn with_phi_prior(mut self, prior: PcPriorPhi) -> Self {
        self.phi_prior = Some(prior);
        self
    }

    pub fn fix_sigma(mut self, sigma: f64) -> Self {
        self.sigma = Some(sigma);
        self
    }

    pub fn fix_phi(mut self, phi: f64) -> Self {
        self.phi = Some(phi);
        self
    }

    pub fn is_bym2(&self) -> bool {
        self.structure.kind() == StructureKind::Bym2
    }

    /// Number of levels addressed by the linear predictor.
    pub fn levels(&self) -> usize {
        self.structure.dim()
    }

    /// Latent dimension: BYM2 blocks carry the total effect and the scaled ICAR
    /// component side by side.
    pub fn latent_dim(&self) -> usize {
        if self.is_bym2() {
            2 * self.structure.dim()
        } else {
            self.structure.dim()
        }
    }
}

/// Linear-predictor layout: `η_r = offset_r + Σ_f fixed[f][r] β_f + Σ_b x_b[levels[b][r]]`.
#[derive(Debug, Clone, Default)]
pub struct Design {
    pub offset: Vec<f64>,
    pub fixed: Vec<Vec<f64>>,
    pub levels: Vec<Vec<usize>>,
}

impl Design {
    pub fn n_rows(&self) -> usize {
        self.offset.len()
    }

    pub fn with_rows(n_rows: usize) -> Self {
        Self {
            offset: vec![0.0; n_rows],
            fixed: Vec::new(),
            levels: Vec::new(),
        }
    }

    pub fn push_fixed(&mut self, column: Vec<f64>) -> &mut Self {
        self.fixed.push(column);
        self
    }

    pub fn push_block(&mut self, levels: Vec<usize>) -> &mut Self {
        self.levels.push(levels);
        self
    }
}

#[derive(Debug, Clone)]
pub enum Likelihood {
    /// Known per-datum variances.
    Gaussian { variance: Vec<f64> },
    /// Counts with exposure offset and overdispersion `d`.
    NegativeBinomial {
        exposure: Vec<f64>,
        d_prior: LogNormalPrior,
        d: Option<f64>,
    },
}

/// Observed data; datum `k` has linear predictor row `row[k]`.
#[derive(Debug, Clone)]
pub struct Observations {
    pub row: Vec<usize>,
    pub y: Vec<f64>,
    pub likelihood: Likelihood,
}

impl Observations {
    pub fn gaussian(row: Vec<usize>, y: Vec<f64>, variance: Vec<f64>) -> Self {
        Self {
            row,
            y,
            likelihood: Likelihood::Gaussian { variance },
        }
    }

    pub fn negative_binomial(row: Vec<usize>, y: Vec<f64>, exposure: Vec<f64>) -> Self {
        Self {
            row,
            y,
            likelihood: Likelihood::NegativeBinomial {
                exposure,
                d_prior: LogNormalPrior::default(),
                d: None,
            },
        }
    }

    pub fn empty_gaussian() -> Self {
        Self::gaussian(Vec::new(), Vec::new(), Vec::new())
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct LatentModelSpec {
    pub fixed: Vec<FixedEffect>,
    pub blocks: Vec<EffectBlock>,
    pub design: Design,
    pub data: Observations,
}

/// Hyperparameter values on the natural scale.
#[derive(Debug, Clone, PartialEq)]
pub struct HyperValues {
    pub sigma: Vec<f64>,
    /// Mixing parameter per block; zero for non-BYM2 blocks.
    pub phi: Vec<f64>,
    pub d: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum HyperKind {
    LogSigma(usize),
    LogitPhi(usize),
    LogD,
}

pub(crate) const LOG_SIGMA_RANGE: (f64, f64) = (-9.0, 6.0);
pub(crate) const LOGIT_PHI_RANGE: (f64, f64) = (-12.0, 12.0);
pub(crate) const LOG_D_RANGE: (f64, f64) = (-6.0, 16.0);
const PHI_MAX: f64 = 1.0 - 1e-8;

/// Model compiled to latent-vector coordinates.
pub(crate) struct Compiled<'a> {
    pub spec: &'a LatentModelSpec,
    pub p: usize,
    pub fixed_index: Vec<Option<usize>>,
    pub block_offset: Vec<usize>,
    /// Sparse predictor rows over latent coordinates.
    pub rows: Vec<Vec<(usize, f64)>>,
    pub row_offset: Vec<f64>,
    /// Data indices per predictor row.
    pub row_data: Vec<Vec<usize>>,
    pub data_rows: Vec<usize>,
    /// Orthonormal constraint rows, dense over the latent vector.
    pub constraints: Vec<Vec<f64>>,
    /// The constraint rows stacked as a `k × p` matrix.
    pub constraint_matrix: Dense,
    pub ata: Dense,
    pub prior_shift: Vec<f64>,
    pub hyper: Vec<HyperKind>,
    pub gaussian: bool,
    ln_y_factorial: Vec<f64>,
}

impl LatentModelSpec {
    pub fn validate(&self) -> Result<(), GmrfError> {
        let n = self.design.n_rows();
        let bad = |msg: String| Err(GmrfError::InvalidModel(msg));
        if self.design.fixed.len() != self.fixed.len() {
            return bad(format!(
                "{} fixed effects but {} design columns",
                self.fixed.len(),
                self.design.fixed.len()
            ));
        }
        if self.design.levels.len() != self.blocks.len() {
            return bad(format!(
                "{} blocks but {} level maps",
                self.blocks.len(),
                self.design.levels.len()
            ));
        }
        for (f, col) in self.fixed.iter().zip(&self.design.fixed) {
            if col.len() != n {
                return bad(format!("fixed column {} has wrong length", f.name));
            }
            if !(f.prior.sd > 0.0) {
                return bad(format!("fixed effect {} needs a positive prior sd", f.name));
            }
        }
        for (b, lv) in self.blocks.iter().zip(&self.design.levels) {
            if lv.len() != n {
                return bad(format!("level map for {} has wrong length", b.name));
            }
            if let Some(&bad_level) = lv.iter().find(|&&l| l >= b.levels()) {
                return bad(format!("block {} level {bad_level} out of range", b.name));
            }
            if b.is_bym2() && b.phi_prior.is_none() && b.phi.is_none() {
                return bad(format!("BYM2 block {} needs a phi prior or fixed phi", b.name));
            }
            if let Some(s) = b.sigma {
                if !(s > 0.0 && s.is_finite()) {
                    return bad(format!("block {} fixed sigma must be positive", b.name));
                }
            }
            if let Some(phi) = b.phi {
                if !(0.0..=1.0).contains(&phi) {
                    return bad(format!("block {} fixed phi must lie in [0, 1]", b.name));
                }
            }
        }
        let data = &self.data;
        if data.row.len() != data.y.len() {
            return bad("observation rows and values differ in length".into());
        }
        if let Some(&r) = data.row.iter().find(|&&r| r >= n) {
            return bad(format!("observation row {r} out of range"));
        }
        match &data.likelihood {
            Likelihood::Gaussian { variance } => {
                if variance.len() != data.len() {
                    return bad("variance length mismatch".into());
                }
                if variance.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
                    return bad("Gaussian variances must be positive and finite".into());
                }
                if data.y.iter().any(|y| !y.is_finite()) {
                    return bad("non-finite observation".into());
                }
            }
            Likelihood::NegativeBinomial { exposure, d, .. } => {
                if exposure.len() != data.len() {
                    return bad("exposure length mismatch".into());
                }
                if exposure.iter().any(|e| !(*e > 0.0 && e.is_finite())) {
                    return bad("exposures must be positive".into());
                }
                if data.y.iter().any(|y| !(*y >= 0.0 && y.fract() == 0.0)) {
                    return bad("counts must be non-negative integers".into());
                }
                if let Some(d) = d {
                    if !(*d > 0.0) {
                        return bad("fixed overdispersion must be positive".into());
                    }
                }
            }
        }
        self.check_fixed_rank()
    }

    fn check_fixed_rank(&self) -> Result<(), GmrfError> {
        let free: Vec<usize> = (0..self.fixed.len())
            .filter(|&f| self.fixed[f].value.is_none())
            .collect();
        if free.is_empty() || self.data.is_empty() {
            return Ok(());
        }
        let mut rows: Vec<usize> = self.data.row.clone();
        rows.sort_unstable();
        rows.dedup();
        let k = free.len();
        let mut gram = linalg::zeros(k, k);
        for &r in &rows {
            for (a, &fa) in free.iter().enumerate() {
                for (b, &fb) in free.iter().enumerate() {
                    gram[(a, b)] += self.design.fixed[fa][r] * self.design.fixed[fb][r];
                }
            }
        }
        let scale = (0..k).map(|i| gram[(i, i)]).fold(0.0, f64::max).max(1.0);
        for i in 0..k {
            gram[(i, i)] += 1e-10 * scale;
        }
        let (values, _) = linalg::symmetric_eigen(&gram)?;
        if values[0] <= 1e-8 * scale {
            return Err(GmrfError::InvalidModel(
                "fixed-effect design is not of full column rank".into(),
            ));
        }
        Ok(())
    }

    pub fn is_gaussian(&self) -> bool {
        matches!(self.data.likelihood, Likelihood::Gaussian { .. })
    }

    /// Names of the free hyperparameters on their working (log / logit) scale.
    pub fn hyper_names(&self) -> Vec<String> {
        hyper_layout(self)
            .iter()
            .map(|h| match *h {
                HyperKind::LogSigma(b) => format!("log_sigma.{}", self.blocks[b].name),
                HyperKind::LogitPhi(b) => format!("logit_phi.{}", self.blocks[b].name),
                HyperKind::LogD => "log_d".to_string(),
            })
            .collect()
    }
}

pub(crate) fn hyper_layout(spec: &LatentModelSpec) -> Vec<HyperKind> {
    let mut out = Vec::new();
    for (b, block) in spec.blocks.iter().enumerate() {
        if block.sigma.is_none() {
            out.push(HyperKind::LogSigma(b));
        }
        if block.is_bym2() && block.phi.is_none() {
            out.push(HyperKind::LogitPhi(b));
        }
    }
    if let Likelihood::NegativeBinomial { d: None, .. } = spec.data.likelihood {
        out.push(HyperKind::LogD);
    }
    out
}

/// Positions of fixed effects and blocks inside the latent vector.
#[derive(Debug, Clone)]
pub(crate) struct Layout {
    pub p: usize,
    pub fixed_index: Vec<Option<usize>>,
    pub block_offset: Vec<usize>,
}

impl Layout {
    pub fn new(spec: &LatentModelSpec) -> Self {
        let mut p = 0;
        let mut fixed_index = Vec::with_capacity(spec.fixed.len());
        for f in &spec.fixed {
            if f.value.is_none() {
                fixed_index.push(Some(p));
                p += 1;
            } else {
                fixed_index.push(None);
            }
        }
        let mut block_offset = Vec::with_capacity(spec.blocks.len());
        for b in &spec.blocks {
            block_offset.push(p);
            p += b.latent_dim();
        }
        Self {
            p,
            fixed_index,
            block_offset,
        }
    }

    /// Sparse latent-coordinate rows and offsets for an arbitrary design over
    /// the same effects.
    #[allow(clippy::type_complexity)]
    pub fn rows(
        &self,
        spec: &LatentModelSpec,
        design: &Design,
    ) -> Result<(Vec<Vec<(usize, f64)>>, Vec<f64>), GmrfError> {
        let n_rows = design.n_rows();
        if design.fixed.len() != spec.fixed.len()
            || design.levels.len() != spec.blocks.len()
            || design.fixed.iter().any(|c| c.len() != n_rows)
            || design.levels.iter().any(|l| l.len() != n_rows)
        {
            return Err(GmrfError::InvalidModel(
                "design does not match the model's effects".into(),
            ));
        }
        for (b, block) in spec.blocks.iter().enumerate() {
            if design.levels[b].iter().any(|&l| l >= block.levels()) {
                return Err(GmrfError::InvalidModel(format!(
                    "design level out of range for block {}",
                    block.name
                )));
            }
        }
        let mut rows = Vec::with_capacity(n_rows);
        let mut offset = design.offset.clone();
        for r in 0..n_rows {
            let mut row = Vec::with_capacity(spec.fixed.len() + spec.blocks.len());
            for (f, fe) in spec.fixed.iter().enumerate() {
                let v = design.fixed[f][r];
                match (self.fixed_index[f], fe.value) {
                    (Some(i), _) if v != 0.0 => row.push((i, v)),
                    (None, Some(val)) => offset[r] += v * val,
                    _ => {}
                }
            }
            for b in 0..spec.blocks.len() {
                row.push((self.block_offset[b] + design.levels[b][r], 1.0));
            }
            rows.push(row);
        }
        Ok((rows, offset))
    }
}

impl<'a> Compiled<'a> {
    pub fn new(spec: &'a LatentModelSpec) -> Result<Self, GmrfError> {
        spec.validate()?;
        let layout = Layout::new(spec);
        let p = layout.p;
        let mut prior_shift = vec![0.0; p];
        for (f, fe) in spec.fixed.iter().enumerate() {
            if let Some(i) = layout.fixed_index[f] {
                prior_shift[i] = fe.prior.mean / (fe.prior.sd * fe.prior.sd);
            }
        }
        let (rows, row_offset) = layout.rows(spec, &spec.design)?;
        let n_rows = rows.len();
        let Layout {
            fixed_index,
            block_offset,
            ..
        } = layout;

        let mut row_data = vec![Vec::new(); n_rows];
        for (k, &r) in spec.data.row.iter().enumerate() {
            row_data[r].push(k);
        }
        let data_rows = (0..n_rows).filter(|&r| !row_data[r].is_empty()).collect();

        let mut constraints = Vec::new();
        for (b, block) in spec.blocks.iter().enumerate() {
            let shift = if block.is_bym2() {
                block.structure.dim()
            } else {
                0
            };
            for a in block.structure.constraints() {
                let mut v = vec![0.0; p];
                v[block_offset[b] + shift..block_offset[b] + shift + a.len()].copy_from_slice(a);
                constraints.push(v);
            }
        }
        let mut ata = linalg::zeros(p, p);
        for a in &constraints {
            let nz: Vec<usize> = (0..p).filter(|&i| a[i] != 0.0).collect();
            for &i in &nz {
                for &j in &nz {
                    ata[(i, j)] += a[i] * a[j];
                }
            }
        }
        let constraint_matrix =
            Dense::from_fn(constraints.len(), p, |r, i| constraints[r][i]);
        let ln_y_factorial = spec
            .data
            .y
            .iter()
            .map(|&y| statrs::function::gamma::ln_gamma(y + 1.0))
            .collect();

        Ok(Self {
            spec,
            p,
            fixed_index,
            block_offset,
            rows,
            row_offset,
            row_data,
            data_rows,
            constraints,
            constraint_matrix,
            ata,
            prior_shift,
            hyper: hyper_layout(spec),
            gaussian: spec.is_gaussian(),
            ln_y_factorial,
        })
    }

    pub fn n_hyper(&self) -> usize {
        self.hyper.len()
    }

    pub fn in_bounds(&self, theta: &[f64]) -> bool {
        self.hyper.iter().zip(theta).all(|(h, &t)| {
            let (lo, hi) = match h {
                HyperKind::LogSigma(_) => LOG_SIGMA_RANGE,
                HyperKind::LogitPhi(_) => LOGIT_PHI_RANGE,
                HyperKind::LogD => LOG_D_RANGE,
            };
            t.is_finite() && t >= lo && t <= hi
        })
    }

    pub fn default_theta(&self) -> Vec<f64> {
        self.hyper
            .iter()
            .map(|h| match h {
                HyperKind::LogSigma(_) => 0.3f64.ln(),
                HyperKind::LogitPhi(_) => 0.0,
                HyperKind::LogD => 10f64.ln(),
            })
            .collect()
    }

    pub fn hyper_values(&self, theta: &[f64]) -> HyperValues {
        let nb = self.spec.blocks.len();
        let mut sigma: Vec<f64> = self
            .spec
            .blocks
            .iter()
            .map(|b| b.sigma.unwrap_or(f64::NAN))
            .collect();
        let mut phi: Vec<f64> = self
            .spec
            .blocks
            .iter()
            .map(|b| if b.is_bym2() { b.phi.unwrap_or(f64::NAN) } else { 0.0 })
            .collect();
        let mut d = match self.spec.data.likelihood {
            Likelihood::NegativeBinomial { d, .. } => Some(d.unwrap_or(f64::NAN)),
            Likelihood::Gaussian { .. } => None,
        };
        for (h, &t) in self.hyper.iter().zip(theta) {
            match *h {
                HyperKind::LogSigma(b) => sigma[b] = t.exp(),
                HyperKind::LogitPhi(b) => phi[b] = logistic(t),
                HyperKind::LogD => d = Some(t.exp()),
            }
        }
        for v in phi.iter_mut().take(nb) {
            *v = v.min(PHI_MAX);
        }
        HyperValues { sigma, phi, d }
    }

    pub fn log_hyperprior(&self, theta: &[f64]) -> f64 {
        let mut total = 0.0;
        for (h, &t) in self.hyper.iter().zip(theta) {
            total += match *h {
                HyperKind::LogSigma(b) => self.spec.blocks[b].sigma_prior.log_density_log_sigma(t),
                HyperKind::LogitPhi(b) => self.spec.blocks[b]
                    .phi_prior
                    .as_ref()
                    .expect("validated")
                    .log_density_logit(t),
                HyperKind::LogD => match &self.spec.data.likelihood {
                    Likelihood::NegativeBinomial { d_prior, .. } => d_prior.log_density_log(t),
                    Likelihood::Gaussian { .. } => 0.0,
                },
            };
        }
        total
    }

    /// Prior precision `Q(θ) + A'A`.
    pub fn precision(&self, h: &HyperValues) -> Dense {
        let mut q = self.ata.clone();
        for (f, fe) in self.spec.fixed.iter().enumerate() {
            if let Some(i) = self.fixed_index[f] {
                q[(i, i)] += 1.0 / (fe.prior.sd * fe.prior.sd);
            }
        }
        for (b, block) in self.spec.blocks.iter().enumerate() {
            let o = self.block_offset[b];
            let sigma = h.sigma[b];
            if block.is_bym2() {
                let n = block.structure.dim();
                let phi = h.phi[b];
                let qbb = 1.0 / (sigma * sigma * (1.0 - phi));
                let qbs = -phi.sqrt() / (sigma * (1.0 - phi));
                let qss = phi / (1.0 - phi);
                for i in 0..n {
                    q[(o + i, o + i)] += qbb;
                    q[(o + i, o + n + i)] += qbs;
                    q[(o + n + i, o + i)] += qbs;
                    q[(o + n + i, o + n + i)] += qss;
                }
                for &(i, j, v) in block.structure.entries() {
                    q[(o + n + i, o + n + j)] += v;
                }
            } else {
                let tau = 1.0 / (sigma * sigma);
                for &(i, j, v) in block.structure.entries() {
                    q[(o + i, o + j)] += tau * v;
                }
            }
        }
        q
    }

    /// Log prior density of the latent vector on the constraint subspace, up to
    /// a constant independent of the hyperparameters.
    pub fn log_prior_latent(&self, h: &HyperValues, x: &[f64]) -> f64 {
        let mut total = 0.0;
        for (f, fe) in self.spec.fixed.iter().enumerate() {
            if let Some(i) = self.fixed_index[f] {
                total += fe.prior.log_density(x[i]);
            }
        }
        for (b, block) in self.spec.blocks.iter().enumerate() {
            let o = self.block_offset[b];
            let sigma = h.sigma[b];
            if block.is_bym2() {
                let n = block.structure.dim();
                let phi = h.phi[b];
                let (bv, sv) = (&x[o..o + n], &x[o + n..o + 2 * n]);
                let sp = sigma * phi.sqrt();
                let resid: f64 = bv
                    .iter()
                    .zip(sv)
                    .map(|(bi, si)| (bi - sp * si).powi(2))
                    .sum();
                total += -(n as f64) * sigma.ln() - 0.5 * n as f64 * (1.0 - phi).ln()
                    - 0.5 * resid / (sigma * sigma * (1.0 - phi))
                    - 0.5 * block.structure.quad_form(sv);
            } else {
                let n = block.structure.dim();
                let xb = &x[o..o + n];
                total += -(block.structure.rank() as f64) * sigma.ln()
                    - 0.5 * block.structure.quad_form(xb) / (sigma * sigma);
            }
        }
        total
    }

    pub fn eta(&self, x: &[f64]) -> Vec<f64> {
        self.rows
            .iter()
            .zip(&self.row_offset)
            .map(|(row, off)| off + row.iter().map(|&(i, v)| v * x[i]).sum::<f64>())
            .collect()
    }

    /// Full log-likelihood at predictor values `eta`.
    pub fn log_lik(&self, eta: &[f64], h: &HyperValues) -> f64 {
        let data = &self.spec.data;
        match &data.likelihood {
            Likelihood::Gaussian { variance } => data
                .row
                .iter()
                .zip(&data.y)
                .zip(variance)
                .map(|((&r, &y), &v)| {
                    let e = y - eta[r];
                    -0.5 * e * e / v - 0.5 * (2.0 * std::f64::consts::PI * v).ln()
                })
                .sum(),
            Likelihood::NegativeBinomial { exposure, .. } => {
                let d = h.d.expect("negative binomial has d");
                let ln_d = d.ln();
                let mut total = 0.0;
                for (k, (&r, &y)) in data.row.iter().zip(&data.y).enumerate() {
                    let mu = exposure[k] * eta[r].exp();
                    let log_dmu = (d + mu).ln();
                    total += ln_rising(d, y) - self.ln_y_factorial[k] + d * (ln_d - log_dmu);
                    if y > 0.0 {
                        total += y * (mu.ln() - log_dmu);
                    }
                }
                total
            }
        }
    }

    /// Per-row gradient and negative Hessian of the log-likelihood in `η`.
    pub fn lik_terms(&self, eta: &[f64], h: &HyperValues) -> (Vec<f64>, Vec<f64>) {
        let n = self.rows.len();
        let mut g = vec![0.0; n];
        let mut w = vec![0.0; n];
        let data = &self.spec.data;
        match &data.likelihood {
            Likelihood::Gaussian { variance } => {
                for ((&r, &y), &v) in data.row.iter().zip(&data.y).zip(variance) {
                    g[r] += (y - eta[r]) / v;
                    w[r] += 1.0 / v;
                }
            }
            Likelihood::NegativeBinomial { exposure, .. } => {
                let d = h.d.expect("negative binomial has d");
                for &r in &self.data_rows {
                    let e = eta[r].exp();
                    for &k in &self.row_data[r] {
                        let mu = exposure[k] * e;
                        let y = data.y[k];
                        let frac = mu / (d + mu);
                        g[r] += y - (y + d) * frac;
                        w[r] += (y + d) * frac * d / (d + mu);
                    }
                }
            }
        }
        (g, w)
    }

    /// Log-likelihood up to terms constant in `η`; used for Newton line search.
    pub fn log_lik_kernel(&self, eta: &[f64], h: &HyperValues) -> f64 {
        let data = &self.spec.data;
        match &data.likelihood {
            Likelihood::Gaussian { variance } => data
                .row
                .iter()
                .zip(&data.y)
                .zip(variance)
                .map(|((&r, &y), &v)| -0.5 * (y - eta[r]).powi(2) / v)
                .sum(),
            Likelihood::NegativeBinomial { exposure, .. } => {
                let d = h.d.expect("negative binomial has d");
                data.row
                    .iter()
                    .zip(&data.y)
                    .enumerate()
                    .map(|(k, (&r, &y))| {
                        y * eta[r] - (y + d) * (d + exposure[k] * eta[r].exp()).ln()
                    })
                    .sum()
            }
        }
    }

    pub fn constraint_residual(&self, x: &[f64]) -> f64 {
        self.constraints
            .iter()
            .map(|a| linalg::dot(a, x).abs())
            .fold(0.0, f64::max)
    }

    pub fn latent_names(&self) -> Vec<String> {
        let mut names = Vec::with_capacity(self.p);
        for (f, fe) in self.spec.fixed.iter().enumerate() {
            if self.fixed_index[f].is_some() {
                names.push(fe.name.clone());
            }
        }
        for block in &self.spec.blocks {
            let n = block.structure.dim();
            for k in 0..n {
                names.push(format!("{}[{}]", block.name, k + 1));
            }
            if block.is_bym2() {
                for k in 0..n {
                    names.push(format!("{}.s[{}]", block.name, k + 1));
                }
            }
        }
        names
    }
}

/// `ln Γ(d + y) − ln Γ(d)` for integer-valued `y ≥ 0`.
#[inline]
fn ln_rising(d: f64, y: f64) -> f64 {
    if y < 16.0 {
        let mut s = 0.0;
        let mut k = 0.0;
        while k < y {
            s += (d + k).ln();
            k += 1.0;
        }
        s
    } else {
        nb::ln_gamma_ratio(d, y)
    }
}
