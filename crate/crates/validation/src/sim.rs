//! Synthetic two-stage PPS surveys with known fertility truth.
//!
//! A [`Population`] fixes the geography, the sampling frame and the true rates;
//! [`Population::sample_survey`] draws one survey from it. Birth histories are a
//! monthly renewal process with an infertile gap after each birth and a
//! discretised gamma frailty per woman. The truth tables hold the exact
//! expected realised rates of that process, so design-based estimators are
//! compared with the quantity they actually target.

use std::collections::BTreeMap;
use std::path::Path;

use fertsae_core::io::write_rows;
use fertsae_core::{
    AgeGroup, BirthRecord, CmcDate, Cluster, CovariateTable, Level, Period, SurveyDataset,
    Urbanicity, WomanRecord, N_AGE_GROUPS,
};
use fertsae_gmrf::RegionGraph;
use fertsae_models::{GridLayer, Pixel, UrbanFractionTable};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use rayon::prelude::*;
use serde::Serialize;
use statrs::distribution::{ContinuousCDF, Gamma};

use crate::ValidationError;

/// Realised national ASFR profile (per 1,000) at TFR 4.5.
const PROFILE: [f64; N_AGE_GROUPS] = [126.0, 224.0, 206.0, 167.0, 112.0, 55.0, 10.0];

/// Share of women by five-year age group at interview; the last two groups are
/// older cohorts that are never interviewed but still live through the
/// window.
const AGE_WEIGHTS: [f64; 9] = [0.21, 0.18, 0.16, 0.14, 0.12, 0.10, 0.09, 0.08, 0.07];

const FRAILTY_POINTS: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct EffectScales {
    pub admin1: f64,
    pub admin2: f64,
    pub time: f64,
    pub space_age: f64,
    pub space_time: f64,
    pub age_time: f64,
}

impl Default for EffectScales {
    fn default() -> Self {
        Self {
            admin1: 0.15,
            admin2: 0.08,
            time: 0.01,
            space_age: 0.05,
            space_time: 0.02,
            age_time: 0.03,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    /// Admin-1 regions, laid out row by row on a near-square lattice.
    pub admin1: usize,
    /// Each admin-1 region splits into `subdivision²` admin-2 regions.
    pub subdivision: usize,
    pub survey_year: i32,
    /// Calendar years with truth tables.
    pub window: Period,
    pub clusters: usize,
    pub households_per_cluster: usize,
    /// Mean of the Poisson number of eligible women per household.
    pub women_per_household: f64,
    pub psus_per_admin2: (usize, usize),
    pub households_per_psu: (usize, usize),
    /// Range of the admin-1 share of urban PSUs.
    pub urban_share: (f64, f64),
    /// Factor on the urban allocation weight.
    pub urban_oversampling: f64,
    /// Realised national TFR targets at the first and last window year.
    pub tfr_start: f64,
    pub tfr_end: f64,
    /// Log rate ratio of urban to rural fertility.
    pub urban_log_effect: f64,
    pub effects: EffectScales,
    /// Gamma frailty shape; `None` gives homogeneous women.
    pub frailty_shape: Option<f64>,
    pub gap_months: usize,
    /// Probability that a birth in year `t_s − 5` is reported 12 months
    /// earlier.
    pub displacement: f64,
    /// Multiplies every true rate; 0 gives no births.
    pub fertility_scale: f64,
    /// Interview months within the survey year (inclusive).
    pub interview_months: (u32, u32),
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            admin1: 23,
            subdivision: 2,
            survey_year: 2021,
            window: Period {
                first: 2012,
                last: 2020,
            },
            clusters: 647,
            households_per_cluster: 32,
            women_per_household: 0.9,
            psus_per_admin2: (30, 60),
            households_per_psu: (80, 250),
            urban_share: (0.12, 0.4),
            urban_oversampling: 1.0,
            tfr_start: 4.7,
            tfr_end: 4.3,
            urban_log_effect: -0.35,
            effects: EffectScales::default(),
            frailty_shape: Some(64.0),
            gap_months: 9,
            displacement: 0.0,
            fertility_scale: 1.0,
            interview_months: (1, 6),
            seed: 1,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), ValidationError> {
        let bad = |m: &str| Err(ValidationError::Config(m.to_string()));
        if self.admin1 == 0 || self.subdivision == 0 {
            return bad("need at least one region");
        }
        if self.clusters == 0 || self.households_per_cluster == 0 {
            return bad("cluster and household counts must be positive");
        }
        if !(self.women_per_household > 0.0) {
            return bad("women per household must be positive");
        }
        if self.psus_per_admin2.0 == 0 || self.psus_per_admin2.0 > self.psus_per_admin2.1 {
            return bad("bad PSU count range");
        }
        if self.households_per_psu.0 < self.households_per_cluster
            || self.households_per_psu.0 > self.households_per_psu.1
        {
            return bad("PSUs must hold at least one cluster's households");
        }
        if !(0.0 < self.urban_share.0 && self.urban_share.0 <= self.urban_share.1 && self.urban_share.1 < 1.0) {
            return bad("urban share range must lie in (0, 1)");
        }
        if !(self.urban_oversampling > 0.0) {
            return bad("urban oversampling must be positive");
        }
        if self.window.last >= self.survey_year {
            return bad("window must end before the survey year");
        }
        if self.survey_year - self.window.first > 35 {
            return bad("window starts before the oldest cohort reaches 15");
        }
        if !(self.tfr_start > 0.0 && self.tfr_end > 0.0) || !(self.fertility_scale >= 0.0) {
            return bad("fertility targets must be positive");
        }
        if !(0.0..=1.0).contains(&self.displacement) {
            return bad("displacement probability outside [0, 1]");
        }
        if let Some(k) = self.frailty_shape {
            if !(k > 0.0) {
                return bad("frailty shape must be positive");
            }
        }
        let (m0, m1) = self.interview_months;
        if !(1 <= m0 && m0 <= m1 && m1 <= 12) {
            return bad("interview months must lie in 1..=12");
        }
        Ok(())
    }
}

/// Admin-1 and admin-2 lattices with admin-2 nested in admin-1.
#[derive(Debug, Clone, PartialEq)]
pub struct Geography {
    pub admin1_graph: RegionGraph,
    pub admin2_graph: RegionGraph,
    pub parent: Vec<usize>,
}

impl Geography {
    pub fn new(n_admin1: usize, subdivision: usize) -> Self {
        let width = (n_admin1 as f64).sqrt().ceil() as usize;
        let pos1: Vec<(usize, usize)> = (0..n_admin1).map(|k| (k / width, k % width)).collect();
        let admin1_graph = lattice_graph(&pos1);
        let s = subdivision;
        let mut pos2 = Vec::new();
        let mut parent = Vec::new();
        for (k, &(r, c)) in pos1.iter().enumerate() {
            for dr in 0..s {
                for dc in 0..s {
                    pos2.push((r * s + dr, c * s + dc));
                    parent.push(k);
                }
            }
        }
        Self {
            admin1_graph,
            admin2_graph: lattice_graph(&pos2),
            parent,
        }
    }

    pub fn n_admin1(&self) -> usize {
        self.admin1_graph.len()
    }

    pub fn n_admin2(&self) -> usize {
        self.admin2_graph.len()
    }

    pub fn area(&self, level: Level, admin2: usize) -> usize {
        match level {
            Level::National => 0,
            Level::Admin1 => self.parent[admin2],
            Level::Admin2 => admin2,
        }
    }

    pub fn n_areas(&self, level: Level) -> usize {
        match level {
            Level::National => 1,
            Level::Admin1 => self.n_admin1(),
            Level::Admin2 => self.n_admin2(),
        }
    }
}

fn lattice_graph(pos: &[(usize, usize)]) -> RegionGraph {
    let index: BTreeMap<(usize, usize), usize> = pos.iter().enumerate().map(|(k, &p)| (p, k)).collect();
    let mut edges = Vec::new();
    for (k, &(r, c)) in pos.iter().enumerate() {
        for q in [(r + 1, c), (r, c + 1)] {
            if let Some(&j) = index.get(&q) {
                edges.push((k, j));
            }
        }
    }
    RegionGraph::from_edges(pos.len(), &edges)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Psu {
    pub admin1: usize,
    pub admin2: usize,
    pub urban: bool,
    pub households: usize,
}

/// Expected births and exposure per woman of the stratum population, by
/// (window year, age group).
#[derive(Debug, Clone, PartialEq)]
struct CellMoments {
    births: Vec<[f64; N_AGE_GROUPS]>,
    exposure: Vec<[f64; N_AGE_GROUPS]>,
}

/// True fertility of every (admin-2 area, urbanicity) stratum.
#[derive(Debug, Clone, PartialEq)]
pub struct SimTruth {
    pub window: Period,
    geography: Geography,
    /// Indexed `admin2 * 2 + urban`.
    moments: Vec<CellMoments>,
    /// Moments over all cohorts alive in the window, used where no
    /// interviewed cohort is exposed.
    fallback: Vec<CellMoments>,
    /// Women per stratum.
    population: Vec<f64>,
}

impl SimTruth {
    fn strata(&self, level: Level, area: usize, urbanicity: Urbanicity) -> Vec<usize> {
        (0..self.geography.n_admin2())
            .filter(|&i2| self.geography.area(level, i2) == area)
            .flat_map(|i2| {
                [false, true]
                    .into_iter()
                    .filter(move |&u| urbanicity.admits(u))
                    .map(move |u| i2 * 2 + usize::from(u))
            })
            .collect()
    }

    /// Expected realised ASFR (per 1,000) for the women of an area and
    /// urbanicity over `period`.
    pub fn asfr(
        &self,
        level: Level,
        area: usize,
        urbanicity: Urbanicity,
        period: Period,
        age: AgeGroup,
    ) -> Option<f64> {
        let strata = self.strata(level, area, urbanicity);
        let ratio = |m: &[CellMoments]| {
            let (mut b, mut e) = (0.0, 0.0);
            for &s in &strata {
                for year in period.years() {
                    let t = (year - self.window.first) as usize;
                    b += self.population[s] * m[s].births.get(t)?[age.index()];
                    e += self.population[s] * m[s].exposure.get(t)?[age.index()];
                }
            }
            Some((b, e))
        };
        if strata.is_empty() || period.first < self.window.first || period.last > self.window.last {
            return None;
        }
        let (b, e) = ratio(&self.moments)?;
        if e > 0.0 {
            return Some(1000.0 * b / e);
        }
        let (b, e) = ratio(&self.fallback)?;
        (e > 0.0).then(|| 1000.0 * b / e)
    }

    pub fn tfr(&self, level: Level, area: usize, urbanicity: Urbanicity, period: Period) -> Option<f64> {
        let mut s = 0.0;
        for a in AgeGroup::all() {
            s += self.asfr(level, area, urbanicity, period, a)?;
        }
        Some(5.0 * s / 1000.0)
    }

    /// Women in an area and urbanicity.
    pub fn population(&self, level: Level, area: usize, urbanicity: Urbanicity) -> f64 {
        self.strata(level, area, urbanicity).iter().map(|&s| self.population[s]).sum()
    }

    pub fn geography(&self) -> &Geography {
        &self.geography
    }

    /// Urban share of women per area, the same for every age group.
    pub fn urban_fractions(&self, level: Level, period: Period) -> Result<UrbanFractionTable, ValidationError> {
        let mut table = UrbanFractionTable::new();
        for area in 0..self.geography.n_areas(level) {
            let total = self.population(level, area, Urbanicity::Both);
            let r = if total > 0.0 {
                self.population(level, area, Urbanicity::Urban) / total
            } else {
                0.0
            };
            for age in AgeGroup::all() {
                table.insert(area, period, age, r)?;
            }
        }
        Ok(table)
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), ValidationError> {
        #[derive(Serialize)]
        struct Row {
            area_id: usize,
            urban: u8,
            year: i32,
            age_group: String,
            true_asfr: f64,
        }
        let mut rows = Vec::new();
        for i2 in 0..self.geography.n_admin2() {
            for urban in [false, true] {
                let u = if urban { Urbanicity::Urban } else { Urbanicity::Rural };
                for year in self.window.years() {
                    for a in AgeGroup::all() {
                        let v = self.asfr(Level::Admin2, i2, u, Period::year(year), a).unwrap_or(f64::NAN);
                        rows.push(Row {
                            area_id: i2 + 1,
                            urban: u8::from(urban),
                            year,
                            age_group: a.label(),
                            true_asfr: v,
                        });
                    }
                }
            }
        }
        write_rows(path, rows)?;
        Ok(())
    }
}

/// Geography, frame and truth; surveys are drawn from it.
#[derive(Debug, Clone)]
pub struct Population {
    pub config: SimConfig,
    pub geography: Geography,
    pub frame: Vec<Psu>,
    pub truth: SimTruth,
    /// Per-month birth hazard (before frailty) by stratum, calendar year from
    /// `first_year`, and age group.
    hazard: Vec<Vec<[f64; N_AGE_GROUPS]>>,
    first_year: i32,
    frailty: Vec<f64>,
    covariates: Vec<CovariateTable>,
}

/// One synthetic survey.
#[derive(Debug, Clone)]
pub struct SimOutput {
    pub dataset: SurveyDataset,
    /// Births moved across the cutoff year.
    pub displaced: usize,
}

fn normal(rng: &mut ChaCha8Rng, sd: f64) -> f64 {
    if sd > 0.0 {
        Normal::new(0.0, sd).expect("positive sd").sample(rng)
    } else {
        0.0
    }
}

fn centred(mut v: Vec<f64>) -> Vec<f64> {
    let m = v.iter().sum::<f64>() / v.len().max(1) as f64;
    v.iter_mut().for_each(|x| *x -= m);
    v
}

/// Spatially smooth effect: IID draws averaged with their neighbours.
fn smooth_field(graph: &RegionGraph, sd: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let z: Vec<f64> = (0..graph.len()).map(|_| normal(rng, 1.0)).collect();
    let raw: Vec<f64> = (0..graph.len())
        .map(|i| {
            let nb = graph.neighbors(i);
            let s: f64 = nb.iter().map(|&j| z[j]).sum::<f64>() + z[i];
            s / (nb.len() as f64 + 1.0).sqrt()
        })
        .collect();
    let raw = centred(raw);
    let scale = (raw.iter().map(|x| x * x).sum::<f64>() / raw.len().max(1) as f64).sqrt();
    raw.into_iter().map(|x| if scale > 0.0 { sd * x / scale } else { 0.0 }).collect()
}

fn frailty_points(shape: Option<f64>) -> Vec<f64> {
    let Some(k) = shape else { return vec![1.0] };
    let g = Gamma::new(k, k).expect("valid gamma");
    let pts: Vec<f64> = (0..FRAILTY_POINTS)
        .map(|j| g.inverse_cdf((j as f64 + 0.5) / FRAILTY_POINTS as f64))
        .collect();
    let mean = pts.iter().sum::<f64>() / pts.len() as f64;
    pts.into_iter().map(|z| z / mean).collect()
}

/// Age-at-interview density per month for ages 180..720 months.
fn age_density(months: i64) -> f64 {
    if !(180..720).contains(&months) {
        return 0.0;
    }
    AGE_WEIGHTS[((months - 180) / 60) as usize] / 60.0
}

/// Draws an age at interview in [180, 600) months.
fn draw_age(rng: &mut ChaCha8Rng) -> i64 {
    let total: f64 = AGE_WEIGHTS[..N_AGE_GROUPS].iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (g, w) in AGE_WEIGHTS[..N_AGE_GROUPS].iter().enumerate() {
        if u < *w || g == N_AGE_GROUPS - 1 {
            return 180 + 60 * g as i64 + rng.random_range(0..60);
        }
        u -= w;
    }
    unreachable!()
}

impl Population {
    pub fn build(config: &SimConfig) -> Result<Self, ValidationError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_0f_7e57);
        let geography = Geography::new(config.admin1, config.subdivision);
        let n1 = geography.n_admin1();
        let n2 = geography.n_admin2();

        // frame
        let share: Vec<f64> = (0..n1)
            .map(|_| rng.random_range(config.urban_share.0..=config.urban_share.1))
            .collect();
        let mut frame = Vec::new();
        for i2 in 0..n2 {
            let i1 = geography.parent[i2];
            let n_psu = rng.random_range(config.psus_per_admin2.0..=config.psus_per_admin2.1);
            for _ in 0..n_psu {
                frame.push(Psu {
                    admin1: i1,
                    admin2: i2,
                    urban: rng.random::<f64>() < share[i1],
                    households: rng.random_range(config.households_per_psu.0..=config.households_per_psu.1),
                });
            }
        }
        // every admin-1 stratum needs PSUs of both kinds
        for i1 in 0..n1 {
            for urban in [false, true] {
                if !frame.iter().any(|p| p.admin1 == i1 && p.urban == urban) {
                    let k = frame.iter().position(|p| p.admin1 == i1).expect("admin1 has PSUs");
                    let mut extra = frame[k].clone();
                    extra.urban = urban;
                    frame.push(extra);
                }
            }
        }
        let mut population = vec![0.0; 2 * n2];
        for p in &frame {
            population[p.admin2 * 2 + usize::from(p.urban)] += p.households as f64 * config.women_per_household;
        }

        // log-rate effects
        let e = &config.effects;
        let years: Vec<i32> = config.window.years().collect();
        let nt = years.len();
        let u1 = smooth_field(&geography.admin1_graph, e.admin1, &mut rng);
        let v2: Vec<f64> = centred((0..n2).map(|_| normal(&mut rng, e.admin2)).collect());
        let tau = centred((0..nt).map(|_| normal(&mut rng, e.time)).collect());
        let d1: Vec<Vec<f64>> = (0..n1)
            .map(|_| centred((0..N_AGE_GROUPS).map(|_| normal(&mut rng, e.space_age)).collect()))
            .collect();
        let d2: Vec<Vec<f64>> = (0..n1)
            .map(|_| {
                let mut walk = 0.0;
                centred(
                    (0..nt)
                        .map(|_| {
                            walk += normal(&mut rng, e.space_time);
                            walk
                        })
                        .collect(),
                )
            })
            .collect();
        let d3: Vec<Vec<f64>> = (0..N_AGE_GROUPS)
            .map(|_| centred((0..nt).map(|_| normal(&mut rng, e.age_time)).collect()))
            .collect();

        // rural and urban shifts keep the national mix on target
        let urban_total: f64 = population.iter().skip(1).step_by(2).sum();
        let total: f64 = population.iter().sum();
        let pu = urban_total / total;
        let rural_shift = -((1.0 - pu) + pu * config.urban_log_effect.exp()).ln();
        let slope = if nt > 1 {
            (config.tfr_end / config.tfr_start).ln() / (nt - 1) as f64
        } else {
            0.0
        };
        let base_tfr = 5.0 * PROFILE.iter().sum::<f64>() / 1000.0;
        let level0 = (config.tfr_start / base_tfr).ln();

        let gap = config.gap_months as f64;
        let first_year = config.survey_year - 50;
        let n_years = (config.survey_year - first_year + 1) as usize;
        let mut hazard = Vec::with_capacity(2 * n2);
        for i2 in 0..n2 {
            let i1 = geography.parent[i2];
            for urban in [false, true] {
                let shift = rural_shift + if urban { config.urban_log_effect } else { 0.0 };
                let mut table = vec![[0.0; N_AGE_GROUPS]; n_years];
                for (y, row) in table.iter_mut().enumerate() {
                    let year = first_year + y as i32;
                    let t = (year - config.window.first).clamp(0, nt as i32 - 1) as usize;
                    for (a, h) in row.iter_mut().enumerate() {
                        let log_rate = (PROFILE[a] / 1000.0).ln()
                            + level0
                            + slope * t as f64
                            + tau[t]
                            + u1[i1]
                            + v2[i2]
                            + shift
                            + d1[i1][a]
                            + d2[i1][t]
                            + d3[a][t];
                        // monthly hazard whose stationary rate under the gap is the target
                        let q = config.fertility_scale * log_rate.exp() / 12.0;
                        *h = (q / (1.0 - gap * q).max(0.05)).min(0.5);
                    }
                }
                hazard.push(table);
            }
        }

        let frailty = frailty_points(config.frailty_shape);
        let (moments, fallback): (Vec<_>, Vec<_>) = hazard
            .par_iter()
            .map(|h| stratum_moments(config, h, first_year, &frailty))
            .unzip();

        let covariates = build_covariates(&geography, &u1, &v2, &population, &mut rng);
        let truth = SimTruth {
            window: config.window,
            geography: geography.clone(),
            moments,
            fallback,
            population,
        };
        Ok(Self {
            config: config.clone(),
            geography,
            frame,
            truth,
            hazard,
            first_year,
            frailty,
            covariates,
        })
    }

    pub fn covariates(&self) -> &[CovariateTable] {
        &self.covariates
    }

    /// One pixel per PSU, carrying its female population by age group.
    pub fn grid(&self) -> GridLayer {
        let total: f64 = AGE_WEIGHTS[..N_AGE_GROUPS].iter().sum();
        let pixels = self
            .frame
            .iter()
            .enumerate()
            .map(|(k, p)| {
                let women = p.households as f64 * self.config.women_per_household;
                let mut population = [0.0; N_AGE_GROUPS];
                for (a, h) in population.iter_mut().enumerate() {
                    *h = women * AGE_WEIGHTS[a] / total;
                }
                Pixel {
                    pixel_id: format!("px{:05}", k + 1),
                    area: p.admin2,
                    urban: p.urban,
                    population,
                }
            })
            .collect();
        GridLayer { pixels }
    }

    /// Cluster counts per (admin-1, urban) stratum.
    pub fn allocation(&self) -> Result<Vec<usize>, ValidationError> {
        let n1 = self.geography.n_admin1();
        let n_strata = 2 * n1;
        if self.config.clusters < n_strata {
            return Err(ValidationError::Infeasible(format!(
                "{} clusters cannot cover {n_strata} strata",
                self.config.clusters
            )));
        }
        let mut size = vec![0.0; n_strata];
        let mut psus = vec![0usize; n_strata];
        for p in &self.frame {
            let s = p.admin1 * 2 + usize::from(p.urban);
            let f = if p.urban { self.config.urban_oversampling } else { 1.0 };
            size[s] += f * p.households as f64;
            psus[s] += 1;
        }
        let total: f64 = size.iter().sum();
        let spare = (self.config.clusters - n_strata) as f64;
        let quota: Vec<f64> = size.iter().map(|s| spare * s / total).collect();
        let mut alloc: Vec<usize> = quota.iter().map(|q| 1 + q.floor() as usize).collect();
        let mut left = self.config.clusters - alloc.iter().sum::<usize>();
        let mut order: Vec<usize> = (0..n_strata).collect();
        order.sort_by(|&a, &b| {
            (quota[b] - quota[b].floor())
                .total_cmp(&(quota[a] - quota[a].floor()))
                .then(a.cmp(&b))
        });
        for &s in order.iter().cycle() {
            if left == 0 {
                break;
            }
            alloc[s] += 1;
            left -= 1;
        }
        for s in 0..n_strata {
            if alloc[s] > psus[s] {
                return Err(ValidationError::Infeasible(format!(
                    "stratum {} needs {} clusters but has {} PSUs",
                    stratum_label(s / 2, s % 2 == 1),
                    alloc[s],
                    psus[s]
                )));
            }
        }
        Ok(alloc)
    }

    /// Draws one survey: systematic PPS selection of PSUs within each
    /// (admin-1, urbanicity) stratum, a fixed number of households per
    /// cluster, and every eligible woman in a selected household.
    pub fn sample_survey(&self, seed: u64) -> Result<SimOutput, ValidationError> {
        let cfg = &self.config;
        let alloc = self.allocation()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut clusters = Vec::new();
        let mut selected: Vec<(usize, f64)> = Vec::new();
        for (s, &n_h) in alloc.iter().enumerate() {
            let (i1, urban) = (s / 2, s % 2 == 1);
            let members: Vec<usize> = (0..self.frame.len())
                .filter(|&k| self.frame[k].admin1 == i1 && self.frame[k].urban == urban)
                .collect();
            let total: f64 = members.iter().map(|&k| self.frame[k].households as f64).sum();
            let step = total / n_h as f64;
            if members.iter().any(|&k| self.frame[k].households as f64 >= step) {
                return Err(ValidationError::Infeasible(format!(
                    "stratum {} has a PSU larger than the sampling interval",
                    stratum_label(i1, urban)
                )));
            }
            let start = rng.random::<f64>() * step;
            let mut cum = 0.0;
            let mut hit = 0;
            for &k in &members {
                let next = cum + self.frame[k].households as f64;
                while hit < n_h && start + hit as f64 * step < next {
                    let weight = total / (n_h as f64 * cfg.households_per_cluster as f64);
                    selected.push((k, weight));
                    hit += 1;
                }
                cum = next;
            }
            debug_assert_eq!(hit, n_h);
        }

        let mut women = Vec::new();
        let mut births = Vec::new();
        let mut displaced = 0;
        let poisson = Poisson::new(cfg.women_per_household).expect("positive mean");
        for (c, &(k, weight)) in selected.iter().enumerate() {
            let psu = &self.frame[k];
            let cluster_id = format!("c{:04}", c + 1);
            clusters.push(Cluster {
                cluster_id: cluster_id.clone(),
                admin1: psu.admin1,
                admin2: psu.admin2,
                urban: psu.urban,
                stratum_id: stratum_label(psu.admin1, psu.urban),
            });
            let month = rng.random_range(cfg.interview_months.0..=cfg.interview_months.1);
            let interview = CmcDate::from_year_month(cfg.survey_year, month)?;
            let hazard = &self.hazard[psu.admin2 * 2 + usize::from(psu.urban)];
            for h in 0..cfg.households_per_cluster {
                let n_women = poisson.sample(&mut rng) as usize;
                for w in 0..n_women {
                    let age = draw_age(&mut rng);
                    let dob = interview.offset(-age)?;
                    let woman_id = format!("{cluster_id}-{:02}-{w}", h + 1);
                    let z = self.frailty[rng.random_range(0..self.frailty.len())];
                    let history = self.birth_history(hazard, dob, interview, z, &mut rng);
                    for b in history {
                        let mut b = b;
                        if cfg.displacement > 0.0
                            && b.year() == cfg.survey_year - 5
                            && rng.random::<f64>() < cfg.displacement
                        {
                            b = b.offset(-12)?;
                            displaced += 1;
                        }
                        births.push(BirthRecord {
                            woman_id: woman_id.clone(),
                            birth: b,
                        });
                    }
                    women.push(WomanRecord {
                        woman_id,
                        cluster_id: cluster_id.clone(),
                        dob,
                        interview,
                        weight,
                    });
                }
            }
        }
        let mut dataset = SurveyDataset::new(
            women,
            births,
            clusters,
            self.geography.admin1_graph.clone(),
            self.geography.admin2_graph.clone(),
        )?;
        for t in &self.covariates {
            dataset = dataset.with_covariates(t.clone())?;
        }
        Ok(SimOutput { dataset, displaced })
    }

    fn birth_history(
        &self,
        hazard: &[[f64; N_AGE_GROUPS]],
        dob: CmcDate,
        interview: CmcDate,
        z: f64,
        rng: &mut ChaCha8Rng,
    ) -> Vec<CmcDate> {
        let mut out = Vec::new();
        let start = dob.value() as i64 + 180;
        let end = interview.value() as i64 - 1;
        let mut blocked_until = i64::MIN;
        for m in start..=end {
            if m <= blocked_until {
                continue;
            }
            let h = self.month_hazard(hazard, dob, m) * z;
            if rng.random::<f64>() < h {
                out.push(CmcDate::new(m).expect("valid month"));
                blocked_until = m + self.config.gap_months as i64;
            }
        }
        out
    }

    fn month_hazard(&self, hazard: &[[f64; N_AGE_GROUPS]], dob: CmcDate, month: i64) -> f64 {
        month_hazard(hazard, self.first_year, dob.value() as i64, month)
    }
}

fn month_hazard(hazard: &[[f64; N_AGE_GROUPS]], first_year: i32, dob: i64, month: i64) -> f64 {
    let age = month - dob;
    if !(180..600).contains(&age) {
        return 0.0;
    }
    let year = 1900 + (month - 1).div_euclid(12) as i32;
    let y = ((year - first_year).max(0) as usize).min(hazard.len() - 1);
    hazard[y][((age - 180) / 60) as usize]
}

fn stratum_label(admin1: usize, urban: bool) -> String {
    format!("{}-{}", admin1 + 1, if urban { "U" } else { "R" })
}

/// Probability of a birth in each month of a renewal process with monthly
/// hazards `hazard` and `gap` blocked months after every birth.
fn birth_probabilities(hazard: impl Iterator<Item = f64>, gap: usize) -> Vec<f64> {
    // delay line of birth probabilities for the last `gap` months
    let mut recent = vec![0.0; gap.max(1)];
    let mut fecund = 1.0;
    let mut out = Vec::new();
    for (i, h) in hazard.enumerate() {
        let b = fecund * h;
        out.push(b);
        if gap > 0 {
            let k = i % gap;
            fecund += recent[k] - b;
            recent[k] = b;
        }
    }
    out
}

/// Exact expected births and exposure per woman in each window cell, for the
/// interviewed cohorts and for all cohorts alive in the window.
fn stratum_moments(
    cfg: &SimConfig,
    hazard: &[[f64; N_AGE_GROUPS]],
    first_year: i32,
    frailty: &[f64],
) -> (CellMoments, CellMoments) {
    let nt = cfg.window.n_years();
    let zero = || CellMoments {
        births: vec![[0.0; N_AGE_GROUPS]; nt],
        exposure: vec![[0.0; N_AGE_GROUPS]; nt],
    };
    let (mut eligible, mut all) = (zero(), zero());
    let w_first = cfg.window.first_month().value() as i64;
    let w_last = cfg.window.last_month().value() as i64;
    let (m0, m1) = cfg.interview_months;
    let interviews: Vec<i64> = (m0..=m1)
        .map(|m| CmcDate::from_year_month(cfg.survey_year, m).expect("valid").value() as i64)
        .collect();
    let p_month = 1.0 / interviews.len() as f64;
    let lo = interviews[0] - 719;
    let hi = *interviews.last().expect("non-empty") - 180;
    let gap = cfg.gap_months;
    for dob in lo..=hi {
        let (mut w_eli, mut w_all) = (0.0, 0.0);
        for &iv in &interviews {
            let age = iv - dob;
            let d = p_month * age_density(age);
            w_all += d;
            if age < 600 {
                w_eli += d;
            }
        }
        if w_all == 0.0 {
            continue;
        }
        let first = dob + 180;
        let last = (dob + 599).min(w_last);
        if last < w_first || first > last {
            continue;
        }
        let mut births = vec![[0.0; N_AGE_GROUPS]; nt];
        let mut exposure = vec![[0.0; N_AGE_GROUPS]; nt];
        for m in first.max(w_first)..=last {
            let t = ((m - w_first) / 12) as usize;
            exposure[t][((m - dob - 180) / 60) as usize] += 1.0 / 12.0;
        }
        for &z in frailty {
            let probs = birth_probabilities(
                (first..=last).map(|m| (month_hazard(hazard, first_year, dob, m) * z).min(1.0)),
                gap,
            );
            for (m, b) in (first..=last).zip(probs) {
                if m >= w_first {
                    let t = ((m - w_first) / 12) as usize;
                    births[t][((m - dob - 180) / 60) as usize] += b / frailty.len() as f64;
                }
            }
        }
        for (acc, w) in [(&mut eligible, w_eli), (&mut all, w_all)] {
            if w == 0.0 {
                continue;
            }
            for t in 0..nt {
                for a in 0..N_AGE_GROUPS {
                    acc.births[t][a] += w * births[t][a];
                    acc.exposure[t][a] += w * exposure[t][a];
                }
            }
        }
    }
    (eligible, all)
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Two area covariates that track (negatively) the spatial fertility effect.
fn build_covariates(
    geo: &Geography,
    u1: &[f64],
    v2: &[f64],
    population: &[f64],
    rng: &mut ChaCha8Rng,
) -> Vec<CovariateTable> {
    let n2 = geo.n_admin2();
    let names = vec!["educ".to_string(), "mcpr".to_string()];
    let values2: Vec<Vec<f64>> = (0..n2)
        .map(|i2| {
            let effect = u1[geo.parent[i2]] + v2[i2];
            vec![
                logistic(-0.4 - 5.0 * effect + normal(rng, 0.2)),
                logistic(-1.0 - 3.0 * effect + normal(rng, 0.2)),
            ]
        })
        .collect();
    let mut values1 = vec![vec![0.0; 2]; geo.n_admin1()];
    let mut weight1 = vec![0.0; geo.n_admin1()];
    for i2 in 0..n2 {
        let w = population[2 * i2] + population[2 * i2 + 1];
        let i1 = geo.parent[i2];
        weight1[i1] += w;
        for k in 0..2 {
            values1[i1][k] += w * values2[i2][k];
        }
    }
    for (row, w) in values1.iter_mut().zip(&weight1) {
        row.iter_mut().for_each(|v| *v /= w);
    }
    vec![
        CovariateTable {
            level: Level::Admin1,
            names: names.clone(),
            values: values1,
        },
        CovariateTable {
            level: Level::Admin2,
            names,
            values: values2,
        },
    ]
}

/// Builds the population and draws a survey with the configured seed.
pub fn simulate_survey(config: &SimConfig) -> Result<(SimOutput, Population), ValidationError> {
    let population = Population::build(config)?;
    let out = population.sample_survey(config.seed)?;
    Ok((out, population))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Explicit chain over "months still blocked" states 0..=gap.
    fn markov_birth_probabilities(hazard: &[f64], gap: usize) -> Vec<f64> {
        let mut p = vec![0.0; gap + 1];
        p[0] = 1.0;
        let mut out = Vec::new();
        for &h in hazard {
            out.push(p[0] * h);
            let mut next = vec![0.0; gap + 1];
            if gap == 0 {
                next[0] = 1.0;
            } else {
                next[0] += p[0] * (1.0 - h) + p[1];
                for r in 2..=gap {
                    next[r - 1] += p[r];
                }
                next[gap] += p[0] * h;
            }
            p = next;
        }
        out
    }

    #[test]
    fn delay_line_matches_markov_chain() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for gap in [0, 1, 2, 9, 15] {
            let hazard: Vec<f64> = (0..300).map(|_| rng.random::<f64>() * 0.3).collect();
            let a = birth_probabilities(hazard.iter().copied(), gap);
            let b = markov_birth_probabilities(&hazard, gap);
            for (x, y) in a.iter().zip(&b) {
                assert!((x - y).abs() < 1e-12, "gap {gap}: {x} vs {y}");
            }
        }
    }

    #[test]
    fn simulated_histories_match_birth_probabilities() {
        let cfg = SimConfig {
            admin1: 1,
            subdivision: 1,
            clusters: 2,
            ..SimConfig::default()
        };
        let pop = Population::build(&cfg).unwrap();
        let hazard = vec![[0.03, 0.05, 0.04, 0.03, 0.02, 0.01, 0.005]; 3];
        let dob = CmcDate::from_year_month(1990, 1).unwrap();
        let interview = CmcDate::from_year_month(2021, 1).unwrap();
        let first = dob.value() as i64 + 180;
        let last = interview.value() as i64 - 1;
        let expected: f64 = birth_probabilities(
            (first..=last).map(|m| month_hazard(&hazard, pop.first_year, dob.value() as i64, m)),
            cfg.gap_months,
        )
        .iter()
        .sum();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 20_000;
        let counts: Vec<f64> = (0..n)
            .map(|_| pop.birth_history(&hazard, dob, interview, 1.0, &mut rng).len() as f64)
            .collect();
        let mean = counts.iter().sum::<f64>() / n as f64;
        let sd = (counts.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
        assert!((mean - expected).abs() < 4.0 * sd / (n as f64).sqrt(), "{mean} vs {expected}");
    }

    #[test]
    fn lattice_nesting() {
        let g = Geography::new(23, 2);
        assert_eq!(g.n_admin1(), 23);
        assert_eq!(g.n_admin2(), 92);
        assert_eq!(g.admin1_graph.validate().n_components(), 1);
        assert_eq!(g.admin2_graph.validate().n_components(), 1);
        assert!(g.parent.iter().all(|&p| p < 23));
    }

    #[test]
    fn frailty_has_unit_mean() {
        let z = frailty_points(Some(64.0));
        assert_eq!(z.len(), FRAILTY_POINTS);
        assert!((z.iter().sum::<f64>() / z.len() as f64 - 1.0).abs() < 1e-12);
        assert!(z.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn age_density_integrates_to_total_weight() {
        let s: f64 = (0..800).map(age_density).sum();
        assert!((s - AGE_WEIGHTS.iter().sum::<f64>()).abs() < 1e-12);
    }

    #[test]
    fn zero_gap_chain_gives_the_hazard() {
        // with no gap and no frailty the expected rate is 12 × hazard exactly
        let cfg = SimConfig {
            gap_months: 0,
            frailty_shape: None,
            ..SimConfig::default()
        };
        let hazard = vec![[0.01; N_AGE_GROUPS]; 60];
        let (m, _) = stratum_moments(&cfg, &hazard, cfg.survey_year - 50, &[1.0]);
        for t in 0..cfg.window.n_years() {
            for a in 0..N_AGE_GROUPS {
                if m.exposure[t][a] > 0.0 {
                    assert!((m.births[t][a] / m.exposure[t][a] - 0.12).abs() < 1e-12);
                }
            }
        }
    }
}
