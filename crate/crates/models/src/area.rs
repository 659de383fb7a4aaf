//! Fay-Herriot models on log (or logit) direct estimates.

use std::collections::BTreeSet;

use fertsae_core::{AgeGroup, CovariateTable, DirectEstimate, Level, Period, N_AGE_GROUPS};
use fertsae_gmrf::{
    build_interaction, Design, EffectBlock, FixedEffect, LatentModelSpec, Observations,
    RegionGraph, StructureMatrix,
};

use crate::estimates::{DrawTable, EstimateKey, Measure};
use crate::fit::{
    check_graph, cutoff_indicator, push_covariates, run, spatial_structures, zero_column,
    FitOptions, ModelFit, ZETA_PRIOR,
};
use crate::ModelError;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AreaObservation {
    pub key: EstimateKey,
    /// Log rate, log TFR or logit proportion.
    pub value: f64,
    pub variance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AreaModelInput {
    pub level: Level,
    pub n_areas: usize,
    pub observations: Vec<AreaObservation>,
    /// Keys left out of the likelihood, with the reason.
    pub excluded: Vec<(EstimateKey, String)>,
    pub covariates: Option<CovariateTable>,
}

impl AreaModelInput {
    fn from_direct(
        estimates: &[DirectEstimate],
        level: Level,
        n_areas: usize,
        want_age: bool,
    ) -> Self {
        let mut observations = Vec::new();
        let mut excluded = Vec::new();
        for e in estimates
            .iter()
            .filter(|e| e.key.level == level && e.key.age.is_some() == want_age)
        {
            let key = EstimateKey {
                area: e.key.area,
                period: e.key.period,
                age: e.key.age,
            };
            match (e.log_point, e.log_variance) {
                (Some(y), Some(v)) if v > 0.0 && y.is_finite() => observations.push(AreaObservation {
                    key,
                    value: y,
                    variance: v,
                }),
                (Some(_), Some(_)) => excluded.push((key, "zero design variance".into())),
                _ if e.point == 0.0 => excluded.push((key, "no births".into())),
                _ => excluded.push((key, "variance unavailable".into())),
            }
        }
        Self {
            level,
            n_areas,
            observations,
            excluded,
            covariates: None,
        }
    }

    /// Log-ASFR observations from direct estimates at `level`.
    pub fn asfr(estimates: &[DirectEstimate], level: Level, n_areas: usize) -> Self {
        Self::from_direct(estimates, level, n_areas, true)
    }

    /// Log-TFR observations from direct estimates at `level`.
    pub fn tfr(estimates: &[DirectEstimate], level: Level, n_areas: usize) -> Self {
        Self::from_direct(estimates, level, n_areas, false)
    }

    /// Logit observations from area proportions `(area, p, Var p)`, with
    /// delta-method variance `V / (p(1-p))²`.
    pub fn proportions(
        props: &[(usize, f64, f64)],
        level: Level,
        n_areas: usize,
        period: Period,
    ) -> Self {
        let mut observations = Vec::new();
        let mut excluded = Vec::new();
        for &(area, p, v) in props {
            let key = EstimateKey {
                area,
                period,
                age: None,
            };
            if !(p > 0.0 && p < 1.0) {
                excluded.push((key, format!("proportion {p} on the boundary")));
                continue;
            }
            let (value, variance) = logit_delta(p, v);
            if !(variance > 0.0) {
                excluded.push((key, "zero design variance".into()));
                continue;
            }
            observations.push(AreaObservation {
                key,
                value,
                variance,
            });
        }
        Self {
            level,
            n_areas,
            observations,
            excluded,
            covariates: None,
        }
    }

    pub fn with_covariates(mut self, table: CovariateTable) -> Self {
        self.covariates = Some(table);
        self
    }

    /// Copy without the observations matching `drop`.
    pub fn without(&self, drop: impl Fn(&EstimateKey) -> bool) -> Self {
        let mut out = self.clone();
        out.observations.retain(|o| !drop(&o.key));
        out
    }

    fn check(&self) -> Result<(), ModelError> {
        for o in &self.observations {
            if o.key.area >= self.n_areas {
                return Err(ModelError::Invalid(format!("area {} out of range", o.key.area + 1)));
            }
            if !(o.variance > 0.0 && o.value.is_finite()) {
                return Err(ModelError::Invalid("observation needs finite value and positive variance".into()));
            }
        }
        Ok(())
    }
}

/// `(logit p, V / (p(1-p))²)`.
pub fn logit_delta(p: f64, variance: f64) -> (f64, f64) {
    let q = p * (1.0 - p);
    ((p / (1.0 - p)).ln(), variance / (q * q))
}

/// Space × age model for one reference period:
/// `η_{i,a} = α + x_i'β + φ_a + ψ_a + u_i + δ_{i,a}`.
pub fn fit_fh_asfr(
    input: &AreaModelInput,
    graph: &RegionGraph,
    opts: &FitOptions,
) -> Result<ModelFit, ModelError> {
    input.check()?;
    check_graph(graph, input.n_areas)?;
    let periods: BTreeSet<Period> = input.observations.iter().map(|o| o.key.period).collect();
    let period = match periods.len() {
        1 => *periods.iter().next().unwrap(),
        0 => return Err(ModelError::NoData("no ASFR observations".into())),
        _ => {
            return Err(ModelError::Invalid(
                "the ASFR area model takes a single reference period".into(),
            ))
        }
    };
    let n = input.n_areas;
    let na = N_AGE_GROUPS;
    let rows = n * na;
    let area_of_row: Vec<usize> = (0..rows).map(|r| r / na).collect();
    let age_of_row: Vec<usize> = (0..rows).map(|r| r % na).collect();

    let mut design = Design::with_rows(rows);
    let mut fixed = vec![FixedEffect::intercept()];
    design.push_fixed(vec![1.0; rows]);
    push_covariates(&mut fixed, &mut design, input.covariates.as_ref(), n, &area_of_row, opts)?;

    let (icar, bym) = spatial_structures(graph)?;
    let rw1 = StructureMatrix::rw1(na, true)?;
    let blocks = vec![
        EffectBlock::new("age_rw1", rw1.clone()),
        EffectBlock::new("age_iid", StructureMatrix::iid(na)),
        EffectBlock::bym2("space", bym)?,
        EffectBlock::new("space_age", build_interaction(&icar, &rw1)?),
    ];
    design.push_block(age_of_row.clone());
    design.push_block(age_of_row.clone());
    design.push_block(area_of_row.clone());
    design.push_block((0..rows).collect());

    let mut obs_rows = Vec::new();
    let mut y = Vec::new();
    let mut v = Vec::new();
    for o in &input.observations {
        let a = o.key.age.ok_or_else(|| ModelError::Invalid("ASFR observation without age".into()))?;
        obs_rows.push(o.key.area * na + a.index());
        y.push(o.value);
        v.push(o.variance);
    }
    let spec = LatentModelSpec {
        fixed,
        blocks,
        design,
        data: Observations::gaussian(obs_rows, y, v),
    };
    let samples = run(&spec, &opts.sampler)?;
    let eta = samples.linear_predictor(&spec, &spec.design)?;

    let mut draws = DrawTable::new(input.level, Measure::Fertility);
    for r in 0..rows {
        let key = EstimateKey::asfr(area_of_row[r], period, AgeGroup::new(age_of_row[r]).unwrap());
        draws.insert(key, eta.iter().map(|e| 1000.0 * e[r].exp()).collect());
    }
    draws.add_tfr();
    let mut flags = Vec::new();
    for a in AgeGroup::all() {
        if !input.observations.iter().any(|o| o.key.age == Some(a)) {
            flags.push(format!("age group {a} has no observations"));
        }
    }
    let report_design = spec.design.clone();
    Ok(ModelFit {
        model: if opts.use_covariates { "area-asfr-cov" } else { "area-asfr" }.into(),
        spec,
        samples,
        draws,
        report_design,
        flags,
    })
}

/// Space × time model for yearly log TFR over `years`:
/// `θ_{i,t} = α + ζ c_t + β_T t + x_i'β + τ_t + γ_t + u_i + δ_{i,t}`, where
/// `c_t` is the cutoff indicator. Reported TFR excludes `ζ c_t`.
pub fn fit_fh_tfr(
    input: &AreaModelInput,
    graph: &RegionGraph,
    years: Period,
    survey_year: i32,
    opts: &FitOptions,
) -> Result<ModelFit, ModelError> {
    input.check()?;
    check_graph(graph, input.n_areas)?;
    let nt = years.n_years();
    if nt < 3 {
        return Err(ModelError::Invalid(format!(
            "the TFR model needs at least 3 years, got {nt}"
        )));
    }
    let n = input.n_areas;
    let rows = n * nt;
    let area_of_row: Vec<usize> = (0..rows).map(|r| r / nt).collect();
    let time_of_row: Vec<usize> = (0..rows).map(|r| r % nt).collect();
    let year_of = |t: usize| years.first + t as i32;

    let mut design = Design::with_rows(rows);
    let mut fixed = vec![FixedEffect::intercept(), FixedEffect::coefficient("trend")];
    design.push_fixed(vec![1.0; rows]);
    let centre = (nt as f64 - 1.0) / 2.0;
    design.push_fixed(time_of_row.iter().map(|&t| t as f64 - centre).collect());
    let mut zeta = FixedEffect::new("zeta", ZETA_PRIOR);
    if !opts.cutoff_adjustment {
        zeta = zeta.fixed_at(0.0);
    }
    fixed.push(zeta);
    design.push_fixed(
        time_of_row
            .iter()
            .map(|&t| cutoff_indicator(year_of(t), survey_year))
            .collect(),
    );
    push_covariates(&mut fixed, &mut design, input.covariates.as_ref(), n, &area_of_row, opts)?;

    let (icar, bym) = spatial_structures(graph)?;
    let rw2 = StructureMatrix::rw2(nt, true)?;
    let blocks = vec![
        EffectBlock::new("time_rw2", rw2.clone()),
        EffectBlock::new("time_iid", StructureMatrix::iid(nt)),
        EffectBlock::bym2("space", bym)?,
        EffectBlock::new("space_time", build_interaction(&icar, &rw2)?),
    ];
    design.push_block(time_of_row.clone());
    design.push_block(time_of_row.clone());
    design.push_block(area_of_row.clone());
    design.push_block((0..rows).collect());

    let mut obs_rows = Vec::new();
    let mut y = Vec::new();
    let mut v = Vec::new();
    for o in &input.observations {
        if o.key.period.first != o.key.period.last || !years.contains(o.key.period.first) {
            continue;
        }
        obs_rows.push(o.key.area * nt + (o.key.period.first - years.first) as usize);
        y.push(o.value);
        v.push(o.variance);
    }
    if obs_rows.is_empty() {
        return Err(ModelError::NoData("no yearly TFR observations in the window".into()));
    }
    let spec = LatentModelSpec {
        fixed,
        blocks,
        design,
        data: Observations::gaussian(obs_rows, y, v),
    };
    let samples = run(&spec, &opts.sampler)?;
    let report_design = zero_column(&spec.fixed, &spec.design, "zeta");
    let eta = samples.linear_predictor(&spec, &report_design)?;
    let mut draws = DrawTable::new(input.level, Measure::Fertility);
    for r in 0..rows {
        let key = EstimateKey::tfr(area_of_row[r], Period::year(year_of(time_of_row[r])));
        draws.insert(key, eta.iter().map(|e| e[r].exp()).collect());
    }
    Ok(ModelFit {
        model: if opts.use_covariates { "area-tfr-cov" } else { "area-tfr" }.into(),
        spec,
        samples,
        draws,
        report_design,
        flags: Vec::new(),
    })
}

/// Intercept plus BYM2 on logit proportions: `θ_i = α + u_i`.
pub fn fit_fh_covariate(
    input: &AreaModelInput,
    graph: &RegionGraph,
    opts: &FitOptions,
) -> Result<ModelFit, ModelError> {
    input.check()?;
    check_graph(graph, input.n_areas)?;
    if input.observations.is_empty() {
        return Err(ModelError::NoData("no usable proportions".into()));
    }
    let period = input.observations[0].key.period;
    let n = input.n_areas;
    let mut design = Design::with_rows(n);
    design.push_fixed(vec![1.0; n]);
    design.push_block((0..n).collect());
    let (_, bym) = spatial_structures(graph)?;
    let spec = LatentModelSpec {
        fixed: vec![FixedEffect::intercept()],
        blocks: vec![EffectBlock::bym2("space", bym)?],
        design,
        data: Observations::gaussian(
            input.observations.iter().map(|o| o.key.area).collect(),
            input.observations.iter().map(|o| o.value).collect(),
            input.observations.iter().map(|o| o.variance).collect(),
        ),
    };
    let samples = run(&spec, &opts.sampler)?;
    let eta = samples.linear_predictor(&spec, &spec.design)?;
    let mut draws = DrawTable::new(input.level, Measure::Proportion);
    for i in 0..n {
        let key = EstimateKey {
            area: i,
            period,
            age: None,
        };
        draws.insert(key, eta.iter().map(|e| fertsae_gmrf::prior::logistic(e[i])).collect());
    }
    let flags = input
        .excluded
        .iter()
        .map(|(k, why)| format!("area {} excluded: {why}", k.area + 1))
        .collect();
    let report_design = spec.design.clone();
    Ok(ModelFit {
        model: "covariate".into(),
        spec,
        samples,
        draws,
        report_design,
        flags,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn logit_delta_example() {
        let (l, v) = logit_delta(0.5, 0.0025);
        assert_eq!(l, 0.0);
        assert!((v - 0.04).abs() < 1e-15);
    }

    #[test]
    fn boundary_proportions_are_excluded() {
        let p = Period::year(2021);
        let input = AreaModelInput::proportions(&[(0, 0.0, 0.01), (1, 0.3, 0.01), (2, 1.0, 0.01)], Level::Admin1, 3, p);
        assert_eq!(input.observations.len(), 1);
        assert_eq!(input.excluded.len(), 2);
    }
}
