//! Survey-weighted ratio estimates of ASFR and TFR with delete-one-cluster
//! jackknife variances.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::exposure::{FertilityTable, Period, PeriodGrouping, Urbanicity};
use crate::survey::{AgeGroup, Level, N_AGE_GROUPS};
use crate::CoreError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct DirectKey {
    pub level: Level,
    pub area: usize,
    pub period: Period,
    /// `None` addresses the TFR.
    pub age: Option<AgeGroup>,
}

impl DirectKey {
    pub fn estimator(&self) -> Estimator {
        match self.age {
            Some(_) => Estimator::Asfr,
            None => Estimator::Tfr,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Estimator {
    Asfr,
    Tfr,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum EstimateFlag {
    /// No births: point 0, no log scale.
    Sparse,
    /// An age group had no exposure and entered the TFR as 0.
    MissingAgeGroup,
    /// Fewer than two contributing clusters.
    FewClusters,
    /// Some replicates had no exposure after deletion and were dropped.
    DroppedReplicates,
}

impl EstimateFlag {
    pub fn as_str(self) -> &'static str {
        match self {
            EstimateFlag::Sparse => "sparse",
            EstimateFlag::MissingAgeGroup => "missing_age_group",
            EstimateFlag::FewClusters => "few_clusters",
            EstimateFlag::DroppedReplicates => "dropped_replicates",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [
            EstimateFlag::Sparse,
            EstimateFlag::MissingAgeGroup,
            EstimateFlag::FewClusters,
            EstimateFlag::DroppedReplicates,
        ]
        .into_iter()
        .find(|f| f.as_str() == s)
    }
}

impl fmt::Display for EstimateFlag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DirectEstimate {
    pub key: DirectKey,
    /// ASFR per 1,000 woman-years, or TFR in children per woman.
    pub point: f64,
    pub variance: Option<f64>,
    pub log_point: Option<f64>,
    pub log_variance: Option<f64>,
    pub n_clusters: usize,
    pub flags: Vec<EstimateFlag>,
}

impl DirectEstimate {
    fn new(key: DirectKey, point: f64, n_clusters: usize) -> Self {
        Self {
            key,
            point,
            variance: None,
            log_point: None,
            log_variance: None,
            n_clusters,
            flags: Vec::new(),
        }
    }

    fn flag(&mut self, f: EstimateFlag) {
        if !self.flags.contains(&f) {
            self.flags.push(f);
            self.flags.sort();
        }
    }

    pub fn has_flag(&self, f: EstimateFlag) -> bool {
        self.flags.contains(&f)
    }

    /// Usable as a log-scale observation in area-level models.
    pub fn is_modelable(&self) -> bool {
        matches!((self.log_point, self.log_variance), (Some(_), Some(v)) if v > 0.0)
    }
}

/// Weighted births and exposure per age group contributed by each cluster.
#[derive(Debug, Clone, Copy, Default)]
struct ClusterSums {
    wy: [f64; N_AGE_GROUPS],
    we: [f64; N_AGE_GROUPS],
}

type Grouped = BTreeMap<(usize, Period), BTreeMap<usize, ClusterSums>>;

fn group_clusters(
    table: &FertilityTable,
    level: Level,
    urbanicity: Urbanicity,
    grouping: &PeriodGrouping,
) -> Result<Grouped, CoreError> {
    if !table.is_cluster_level() {
        return Err(CoreError::Invalid(
            "direct estimation needs the cluster-level table".into(),
        ));
    }
    let mut out: Grouped = BTreeMap::new();
    for (k, c) in &table.cells {
        let cluster = &table.clusters[k.unit];
        if !urbanicity.admits(cluster.urban) {
            continue;
        }
        let Some(period) = grouping.period_of(k.period.first) else {
            continue;
        };
        let s = out
            .entry((cluster.area(level), period))
            .or_default()
            .entry(k.unit)
            .or_default();
        s.wy[k.age.index()] += c.weighted_births;
        s.we[k.age.index()] += c.weighted_exposure;
    }
    Ok(out)
}

fn totals(clusters: &BTreeMap<usize, ClusterSums>) -> ClusterSums {
    let mut t = ClusterSums::default();
    for s in clusters.values() {
        for a in 0..N_AGE_GROUPS {
            t.wy[a] += s.wy[a];
            t.we[a] += s.we[a];
        }
    }
    t
}

fn asfr_from(s: &ClusterSums, a: usize) -> Option<f64> {
    (s.we[a] > 0.0).then(|| s.wy[a] / s.we[a] * 1000.0)
}

/// TFR from sums; age groups without exposure count as 0.
fn tfr_from(s: &ClusterSums) -> (f64, bool) {
    let mut sum = 0.0;
    let mut missing = false;
    for a in 0..N_AGE_GROUPS {
        match asfr_from(s, a) {
            Some(r) => sum += r,
            None => missing = true,
        }
    }
    (5.0 * sum / 1000.0, missing)
}

/// `((C-1)/C) Σ (θ_(c) - θ̄)²` over the supplied replicates.
pub fn jackknife_from_replicates(replicates: &[f64]) -> Option<f64> {
    let c = replicates.len();
    if c < 2 {
        return None;
    }
    let mean = replicates.iter().sum::<f64>() / c as f64;
    let ss: f64 = replicates.iter().map(|r| (r - mean).powi(2)).sum();
    Some((c as f64 - 1.0) / c as f64 * ss)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Jackknife {
    pub variance: Option<f64>,
    /// Clusters whose replicate entered the variance.
    pub n_clusters: usize,
    pub dropped: usize,
}

fn contributes(s: &ClusterSums, age: Option<AgeGroup>) -> bool {
    match age {
        Some(a) => s.we[a.index()] > 0.0 || s.wy[a.index()] > 0.0,
        None => s.we.iter().chain(&s.wy).any(|&v| v > 0.0),
    }
}

/// How the delete-one-cluster jackknife treats the design strata.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum JackknifeMethod {
    /// Delete one cluster within its stratum, reweight the stratum's other
    /// clusters by `n_h/(n_h-1)`, and sum `((n_h-1)/n_h) Σ (θ_(hj) - θ̄_h)²`
    /// over strata. Strata with a single cluster are pooled together.
    #[default]
    Stratified,
    /// Pool clusters across strata: `((C-1)/C) Σ (θ_(c) - θ̄)²`.
    Unstratified,
}

impl JackknifeMethod {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "stratified" => Some(JackknifeMethod::Stratified),
            "unstratified" => Some(JackknifeMethod::Unstratified),
            _ => None,
        }
    }
}

/// Stratum index of every cluster of the table.
fn stratum_index(table: &FertilityTable) -> Vec<usize> {
    let mut ids: BTreeMap<&str, usize> = BTreeMap::new();
    table
        .clusters
        .iter()
        .map(|c| {
            let n = ids.len();
            *ids.entry(c.stratum_id.as_str()).or_insert(n)
        })
        .collect()
}

/// Replicate estimate from `rest`, or `None` when it is undefined.
fn replicate(total: &ClusterSums, mut rest: ClusterSums, age: Option<AgeGroup>) -> Option<f64> {
    for a in 0..N_AGE_GROUPS {
        // cancellation residue when the deleted cluster held everything
        if rest.we[a] <= 1e-10 * total.we[a] {
            rest.we[a] = 0.0;
        }
        if rest.wy[a] <= 1e-10 * total.wy[a] {
            rest.wy[a] = 0.0;
        }
    }
    match age {
        Some(a) => asfr_from(&rest, a.index()),
        None => {
            // a replicate is undefined if it loses an age group the full
            // sample had
            let lost = (0..N_AGE_GROUPS).any(|a| total.we[a] > 0.0 && !(rest.we[a] > 0.0));
            (!lost).then(|| tfr_from(&rest).0)
        }
    }
}

fn jackknife_group(
    clusters: &BTreeMap<usize, ClusterSums>,
    age: Option<AgeGroup>,
    strata: &[usize],
    method: JackknifeMethod,
) -> Jackknife {
    let total = totals(clusters);
    let n_clusters = clusters.values().filter(|s| contributes(s, age)).count();
    match method {
        JackknifeMethod::Unstratified => {
            let mut reps = Vec::new();
            let mut dropped = 0;
            for s in clusters.values().filter(|s| contributes(s, age)) {
                let mut rest = total;
                for a in 0..N_AGE_GROUPS {
                    rest.wy[a] -= s.wy[a];
                    rest.we[a] -= s.we[a];
                }
                match replicate(&total, rest, age) {
                    Some(r) => reps.push(r),
                    None => dropped += 1,
                }
            }
            Jackknife {
                variance: jackknife_from_replicates(&reps),
                n_clusters: reps.len(),
                dropped,
            }
        }
        JackknifeMethod::Stratified => {
            let mut by_stratum: BTreeMap<usize, Vec<&ClusterSums>> = BTreeMap::new();
            for (&unit, s) in clusters {
                by_stratum.entry(strata[unit]).or_default().push(s);
            }
            let (mut groups, singles): (Vec<_>, Vec<_>) =
                by_stratum.into_values().partition(|g| g.len() > 1);
            if singles.len() > 1 {
                groups.push(singles.into_iter().flatten().collect());
            }
            let mut variance = None;
            let mut dropped = 0;
            for g in &groups {
                let n_h = g.len() as f64;
                let mut t_h = ClusterSums::default();
                for s in g {
                    for a in 0..N_AGE_GROUPS {
                        t_h.wy[a] += s.wy[a];
                        t_h.we[a] += s.we[a];
                    }
                }
                let scale = n_h / (n_h - 1.0);
                let mut reps = Vec::new();
                for s in g {
                    let mut rest = total;
                    for a in 0..N_AGE_GROUPS {
                        rest.wy[a] += (t_h.wy[a] - s.wy[a]) * scale - t_h.wy[a];
                        rest.we[a] += (t_h.we[a] - s.we[a]) * scale - t_h.we[a];
                    }
                    match replicate(&total, rest, age) {
                        Some(r) => reps.push(r),
                        None => dropped += 1,
                    }
                }
                if let Some(v) = jackknife_from_replicates(&reps) {
                    *variance.get_or_insert(0.0) += v;
                }
            }
            Jackknife {
                variance: if n_clusters > 1 { variance } else { None },
                n_clusters,
                dropped,
            }
        }
    }
}

fn grouping_for(period: Period) -> PeriodGrouping {
    PeriodGrouping::Blocks(vec![period])
}

fn lookup(
    table: &FertilityTable,
    key: &DirectKey,
    urbanicity: Urbanicity,
) -> Result<BTreeMap<usize, ClusterSums>, CoreError> {
    let mut g = group_clusters(table, key.level, urbanicity, &grouping_for(key.period))?;
    Ok(g.remove(&(key.area, key.period)).unwrap_or_default())
}

/// Point estimate of one ASFR (per 1,000 woman-years).
pub fn direct_asfr(
    table: &FertilityTable,
    key: &DirectKey,
    urbanicity: Urbanicity,
) -> Result<DirectEstimate, CoreError> {
    let age = key
        .age
        .ok_or_else(|| CoreError::Invalid("ASFR key needs an age group".into()))?;
    let clusters = lookup(table, key, urbanicity)?;
    asfr_estimate(key, &clusters, age)
}

fn asfr_estimate(
    key: &DirectKey,
    clusters: &BTreeMap<usize, ClusterSums>,
    age: AgeGroup,
) -> Result<DirectEstimate, CoreError> {
    let t = totals(clusters);
    let point = asfr_from(&t, age.index()).ok_or_else(|| {
        CoreError::NoData(format!(
            "no weighted exposure for {} area {} {} {}",
            key.level,
            key.area + 1,
            key.period,
            age
        ))
    })?;
    let n = clusters.values().filter(|s| contributes(s, Some(age))).count();
    let mut est = DirectEstimate::new(*key, point, n);
    if point == 0.0 {
        est.flag(EstimateFlag::Sparse);
    }
    Ok(est)
}

/// TFR from the seven ASFRs of one (area, period); absent groups count as 0
/// and raise a flag.
pub fn direct_tfr(asfrs: &[DirectEstimate]) -> Result<DirectEstimate, CoreError> {
    let first = asfrs
        .first()
        .ok_or_else(|| CoreError::NoData("no ASFRs supplied".into()))?;
    let mut key = first.key;
    key.age = None;
    let mut seen = [false; N_AGE_GROUPS];
    let mut sum = 0.0;
    for e in asfrs {
        let a = e
            .key
            .age
            .ok_or_else(|| CoreError::Invalid("TFR input must be ASFRs".into()))?;
        if (e.key.level, e.key.area, e.key.period) != (key.level, key.area, key.period) {
            return Err(CoreError::Invalid("ASFRs from different areas or periods".into()));
        }
        if std::mem::replace(&mut seen[a.index()], true) {
            return Err(CoreError::Invalid(format!("age group {a} given twice")));
        }
        sum += e.point;
    }
    let n = asfrs.iter().map(|e| e.n_clusters).max().unwrap_or(0);
    let mut est = DirectEstimate::new(key, 5.0 * sum / 1000.0, n);
    if seen.iter().any(|s| !s) {
        est.flag(EstimateFlag::MissingAgeGroup);
    }
    if est.point == 0.0 {
        est.flag(EstimateFlag::Sparse);
    }
    Ok(est)
}

/// Delete-one-cluster jackknife variance of the estimator addressed by `key`.
pub fn jackknife_variance(
    table: &FertilityTable,
    key: &DirectKey,
    urbanicity: Urbanicity,
    method: JackknifeMethod,
) -> Result<Jackknife, CoreError> {
    let clusters = lookup(table, key, urbanicity)?;
    Ok(jackknife_group(&clusters, key.age, &stratum_index(table), method))
}

/// Fills the log-rate fields: `log(point)` (ASFR on the per-woman-year scale)
/// and the delta-method variance `variance / point²`.
pub fn log_transform(est: &DirectEstimate) -> Result<DirectEstimate, CoreError> {
    if !(est.point > 0.0) {
        return Err(CoreError::Invalid("log transform of a zero estimate".into()));
    }
    let var = est
        .variance
        .ok_or_else(|| CoreError::Invalid("log transform needs a variance".into()))?;
    let rate = match est.key.age {
        Some(_) => est.point / 1000.0,
        None => est.point,
    };
    let mut out = est.clone();
    out.log_point = Some(rate.ln());
    out.log_variance = Some(var / (est.point * est.point));
    Ok(out)
}

fn finish(mut est: DirectEstimate, jk: Jackknife) -> DirectEstimate {
    if jk.dropped > 0 {
        est.flag(EstimateFlag::DroppedReplicates);
    }
    match jk.variance {
        Some(v) => est.variance = Some(v),
        None => est.flag(EstimateFlag::FewClusters),
    }
    if est.point > 0.0 && est.variance.is_some() {
        est = log_transform(&est).expect("positive point with variance");
    }
    est
}

/// All ASFR and TFR direct estimates for every (area, period) with data, with
/// stratified jackknife variances and log-scale fields where defined.
pub fn direct_estimates(
    table: &FertilityTable,
    level: Level,
    urbanicity: Urbanicity,
    grouping: &PeriodGrouping,
) -> Result<Vec<DirectEstimate>, CoreError> {
    direct_estimates_with(table, level, urbanicity, grouping, JackknifeMethod::default())
}

/// [`direct_estimates`] with an explicit jackknife method.
pub fn direct_estimates_with(
    table: &FertilityTable,
    level: Level,
    urbanicity: Urbanicity,
    grouping: &PeriodGrouping,
    method: JackknifeMethod,
) -> Result<Vec<DirectEstimate>, CoreError> {
    let grouped = group_clusters(table, level, urbanicity, grouping)?;
    let strata = stratum_index(table);
    let mut out = Vec::new();
    for (&(area, period), clusters) in &grouped {
        let mut asfrs = Vec::new();
        for age in AgeGroup::all() {
            let key = DirectKey {
                level,
                area,
                period,
                age: Some(age),
            };
            let Ok(est) = asfr_estimate(&key, clusters, age) else {
                continue;
            };
            let jk = jackknife_group(clusters, Some(age), &strata, method);
            asfrs.push(finish(est, jk));
        }
        if asfrs.is_empty() {
            continue;
        }
        let tfr = direct_tfr(&asfrs)?;
        let jk = jackknife_group(clusters, None, &strata, method);
        out.extend(asfrs);
        out.push(finish(tfr, jk));
    }
    Ok(out)
}

#[derive(Debug, Serialize, Deserialize)]
struct EstimateRow {
    level: String,
    area_id: usize,
    period: String,
    age_group: String,
    point: f64,
    variance: Option<f64>,
    log_point: Option<f64>,
    log_variance: Option<f64>,
    flags: String,
}

/// Writes `direct_estimates.csv`; the TFR row uses age group `TFR`.
pub fn write_direct_estimates(path: &Path, estimates: &[DirectEstimate]) -> Result<(), CoreError> {
    crate::io::write_rows(
        path,
        estimates.iter().map(|e| EstimateRow {
            level: e.key.level.to_string(),
            area_id: e.key.area + 1,
            period: e.key.period.to_string(),
            age_group: e.key.age.map_or("TFR".to_string(), |a| a.label()),
            point: e.point,
            variance: e.variance,
            log_point: e.log_point,
            log_variance: e.log_variance,
            flags: e
                .flags
                .iter()
                .map(|f| f.as_str())
                .collect::<Vec<_>>()
                .join(";"),
        }),
    )
}

pub fn read_direct_estimates(path: &Path) -> Result<Vec<DirectEstimate>, CoreError> {
    let rows: Vec<EstimateRow> = crate::io::read_rows(path)?;
    rows.into_iter()
        .enumerate()
        .map(|(i, r)| {
            let bad = |m: String| CoreError::schema(path, format!("line {}: {m}", i + 2));
            let level = Level::parse(&r.level).ok_or_else(|| bad(format!("bad level `{}`", r.level)))?;
            if r.area_id == 0 {
                return Err(bad("area_id must be one-based".into()));
            }
            let age = match r.age_group.as_str() {
                "TFR" => None,
                s => Some(AgeGroup::parse(s).ok_or_else(|| bad(format!("bad age group `{s}`")))?),
            };
            let mut flags = Vec::new();
            for f in r.flags.split(';').filter(|s| !s.is_empty()) {
                flags.push(EstimateFlag::parse(f).ok_or_else(|| bad(format!("bad flag `{f}`")))?);
            }
            Ok(DirectEstimate {
                key: DirectKey {
                    level,
                    area: r.area_id - 1,
                    period: r.period.parse().map_err(|e: CoreError| bad(e.to_string()))?,
                    age,
                },
                point: r.point,
                variance: r.variance,
                log_point: r.log_point,
                log_variance: r.log_variance,
                n_clusters: 0,
                flags,
            })
        })
        .collect()
}
