//! Cluster-level negative-binomial model for births with exposure offsets.

use fertsae_core::{
    AgeGroup, CovariateTable, FertilityTable, Level, Period, Urbanicity, N_AGE_GROUPS,
};
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

/// One (cluster, year, age) count.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnitCell {
    pub cluster: usize,
    pub area: usize,
    pub year: i32,
    pub age: AgeGroup,
    pub births: u64,
    pub exposure: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnitModelInput {
    pub level: Level,
    pub n_areas: usize,
    pub urbanicity: Urbanicity,
    pub years: Period,
    pub survey_year: i32,
    pub cells: Vec<UnitCell>,
    /// Cells dropped for zero exposure.
    pub dropped: usize,
    pub covariates: Option<CovariateTable>,
}

impl UnitModelInput {
    /// Unweighted counts from a cluster-level yearly table, keeping clusters
    /// admitted by `urbanicity`.
    pub fn from_table(
        table: &FertilityTable,
        level: Level,
        urbanicity: Urbanicity,
        survey_year: i32,
    ) -> Result<Self, ModelError> {
        if !table.is_cluster_level() {
            return Err(ModelError::Invalid("the unit model needs a cluster-level table".into()));
        }
        let n_areas = table.n_areas(level);
        let mut cells = Vec::new();
        let mut dropped = 0;
        for (k, c) in &table.cells {
            let cluster = &table.clusters[k.unit];
            if !urbanicity.admits(cluster.urban) {
                continue;
            }
            if k.period.n_years() != 1 {
                return Err(ModelError::Invalid("the unit model needs yearly cells".into()));
            }
            if c.exposure <= 0.0 {
                dropped += 1;
                continue;
            }
            cells.push(UnitCell {
                cluster: k.unit,
                area: cluster.area(level),
                year: k.period.first,
                age: k.age,
                births: c.births,
                exposure: c.exposure,
            });
        }
        Ok(Self {
            level,
            n_areas,
            urbanicity,
            years: table.window,
            survey_year,
            cells,
            dropped,
            covariates: None,
        })
    }

    pub fn with_covariates(mut self, table: CovariateTable) -> Self {
        self.covariates = Some(table);
        self
    }

    /// Copy without the cells matching `drop`.
    pub fn without(&self, drop: impl Fn(&UnitCell) -> bool) -> Self {
        let mut out = self.clone();
        out.cells.retain(|c| !drop(c));
        out
    }

    fn row(&self, area: usize, year: i32, age: AgeGroup) -> usize {
        let nt = self.years.n_years();
        (area * nt + (year - self.years.first) as usize) * N_AGE_GROUPS + age.index()
    }
}

/// Space-time-age model on the (area, year, age) grid:
/// `η = α + ζ c_t + β_T t + x_i'β + τ_t + γ_t + φ_a + ψ_a + u_i + δ1_{i,a} +
/// δ2_{i,t} + δ3_{a,t}`, with `births ~ NB(exposure · e^η, d)`. Reported rates
/// exclude `ζ c_t`.
pub fn fit_unit_model(
    input: &UnitModelInput,
    graph: &RegionGraph,
    opts: &FitOptions,
) -> Result<ModelFit, ModelError> {
    check_graph(graph, input.n_areas)?;
    if input.cells.is_empty() {
        return Err(ModelError::NoData("no cells with exposure".into()));
    }
    let nt = input.years.n_years();
    if nt < 3 {
        return Err(ModelError::Invalid(format!(
            "the unit model needs at least 3 years, got {nt}"
        )));
    }
    let n = input.n_areas;
    let na = N_AGE_GROUPS;
    let rows = n * nt * na;
    let area_of: Vec<usize> = (0..rows).map(|r| r / (nt * na)).collect();
    let time_of: Vec<usize> = (0..rows).map(|r| (r / na) % nt).collect();
    let age_of: Vec<usize> = (0..rows).map(|r| r % na).collect();
    let year_of = |t: usize| input.years.first + t as i32;

    let mut design = Design::with_rows(rows);
    let mut fixed = vec![FixedEffect::intercept(), FixedEffect::coefficient("trend")];
    design.push_fixed(vec![1.0; rows]);
    let centre = (nt as f64 - 1.0) / 2.0;
    design.push_fixed(time_of.iter().map(|&t| t as f64 - centre).collect());
    let mut zeta = FixedEffect::new("zeta", ZETA_PRIOR);
    if !opts.cutoff_adjustment {
        zeta = zeta.fixed_at(0.0);
    }
    fixed.push(zeta);
    design.push_fixed(
        time_of
            .iter()
            .map(|&t| cutoff_indicator(year_of(t), input.survey_year))
            .collect(),
    );
    push_covariates(&mut fixed, &mut design, input.covariates.as_ref(), n, &area_of, opts)?;

    let (icar, bym) = spatial_structures(graph)?;
    let rw1 = StructureMatrix::rw1(na, true)?;
    let rw2 = StructureMatrix::rw2(nt, true)?;
    let blocks = vec![
        EffectBlock::new("time_rw2", rw2.clone()),
        EffectBlock::new("time_iid", StructureMatrix::iid(nt)),
        EffectBlock::new("age_rw1", rw1.clone()),
        EffectBlock::new("age_iid", StructureMatrix::iid(na)),
        EffectBlock::bym2("space", bym)?,
        EffectBlock::new("space_age", build_interaction(&icar, &rw1)?),
        EffectBlock::new("space_time", build_interaction(&icar, &rw2)?),
        EffectBlock::new("age_time", build_interaction(&rw1, &rw2)?),
    ];
    design.push_block(time_of.clone());
    design.push_block(time_of.clone());
    design.push_block(age_of.clone());
    design.push_block(age_of.clone());
    design.push_block(area_of.clone());
    design.push_block((0..rows).map(|r| area_of[r] * na + age_of[r]).collect());
    design.push_block((0..rows).map(|r| area_of[r] * nt + time_of[r]).collect());
    design.push_block((0..rows).map(|r| age_of[r] * nt + time_of[r]).collect());

    let mut obs_rows = Vec::with_capacity(input.cells.len());
    let mut y = Vec::with_capacity(input.cells.len());
    let mut exposure = Vec::with_capacity(input.cells.len());
    for c in &input.cells {
        if c.area >= n || !input.years.contains(c.year) {
            return Err(ModelError::Invalid(format!(
                "cell (area {}, year {}) outside the model grid",
                c.area + 1,
                c.year
            )));
        }
        obs_rows.push(input.row(c.area, c.year, c.age));
        y.push(c.births as f64);
        exposure.push(c.exposure);
    }
    let spec = LatentModelSpec {
        fixed,
        blocks,
        design,
        data: Observations::negative_binomial(obs_rows, y, exposure),
    };
    let samples = run(&spec, &opts.sampler)?;
    let report_design = zero_column(&spec.fixed, &spec.design, "zeta");
    let eta = samples.linear_predictor(&spec, &report_design)?;

    let mut draws = DrawTable::new(input.level, Measure::Fertility);
    for r in 0..rows {
        let key = EstimateKey::asfr(
            area_of[r],
            Period::year(year_of(time_of[r])),
            AgeGroup::new(age_of[r]).expect("age index in range"),
        );
        draws.insert(key, eta.iter().map(|e| 1000.0 * e[r].exp()).collect());
    }
    draws.add_tfr();

    let mut flags = Vec::new();
    let mut seen = vec![false; n];
    for c in &input.cells {
        seen[c.area] = true;
    }
    for (i, s) in seen.iter().enumerate() {
        if !s {
            flags.push(format!("area {} has no clusters", i + 1));
        }
    }
    let model = match input.urbanicity {
        Urbanicity::Both => "unit",
        Urbanicity::Urban => "unit-urban",
        Urbanicity::Rural => "unit-rural",
    };
    Ok(ModelFit {
        model: if opts.use_covariates { format!("{model}-cov") } else { model.to_string() },
        spec,
        samples,
        draws,
        report_design,
        flags,
    })
}

/// Urban and rural fits; a stratum without data yields `None`.
#[derive(Debug, Clone)]
pub struct StratifiedFit {
    pub urban: Option<ModelFit>,
    pub rural: Option<ModelFit>,
    pub flags: Vec<String>,
}

/// Fits the unit model separately to urban and rural clusters in parallel,
/// with distinct seeds.
pub fn fit_stratified(
    table: &FertilityTable,
    level: Level,
    survey_year: i32,
    covariates: Option<&CovariateTable>,
    graph: &RegionGraph,
    opts: &FitOptions,
) -> Result<StratifiedFit, ModelError> {
    let stratum = |u: Urbanicity, seed_shift: u64| -> Result<Option<ModelFit>, ModelError> {
        let mut input = UnitModelInput::from_table(table, level, u, survey_year)?;
        if let Some(c) = covariates {
            input = input.with_covariates(c.clone());
        }
        if input.cells.is_empty() {
            return Ok(None);
        }
        let mut o = opts.clone();
        o.sampler.seed = opts.sampler.seed.wrapping_add(seed_shift);
        fit_unit_model(&input, graph, &o).map(Some)
    };
    let (urban, rural) = rayon::join(|| stratum(Urbanicity::Urban, 0), || stratum(Urbanicity::Rural, 7919));
    let (urban, rural) = (urban?, rural?);
    let mut flags = Vec::new();
    if urban.is_none() {
        flags.push("urban stratum has no data".to_string());
    }
    if rural.is_none() {
        flags.push("rural stratum has no data".to_string());
    }
    Ok(StratifiedFit {
        urban,
        rural,
        flags,
    })
}
