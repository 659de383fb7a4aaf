//! Keyed posterior draws on the reporting scale and their summaries.

use std::collections::HashMap;
use std::path::Path;

use fertsae_core::{summarize, AgeGroup, Level, Period, Summary, N_AGE_GROUPS};
use serde::{Deserialize, Serialize};

use crate::ModelError;

/// (area, period, age group); `age == None` addresses the TFR, or the whole
/// area for proportions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct EstimateKey {
    pub area: usize,
    pub period: Period,
    pub age: Option<AgeGroup>,
}

impl EstimateKey {
    pub fn asfr(area: usize, period: Period, age: AgeGroup) -> Self {
        Self {
            area,
            period,
            age: Some(age),
        }
    }

    pub fn tfr(area: usize, period: Period) -> Self {
        Self {
            area,
            period,
            age: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Measure {
    /// ASFR per 1,000 woman-years for age keys, TFR otherwise.
    Fertility,
    /// Proportion in (0, 1).
    Proportion,
}

/// Draws per key on the natural reporting scale: ASFR per 1,000, TFR in
/// children per woman, or a proportion.
#[derive(Debug, Clone, PartialEq)]
pub struct DrawTable {
    pub level: Level,
    pub measure: Measure,
    keys: Vec<EstimateKey>,
    values: Vec<Vec<f64>>,
    index: HashMap<EstimateKey, usize>,
}

impl DrawTable {
    pub fn new(level: Level, measure: Measure) -> Self {
        Self {
            level,
            measure,
            keys: Vec::new(),
            values: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, key: EstimateKey, draws: Vec<f64>) {
        match self.index.get(&key) {
            Some(&k) => self.values[k] = draws,
            None => {
                self.index.insert(key, self.keys.len());
                self.keys.push(key);
                self.values.push(draws);
            }
        }
    }

    pub fn keys(&self) -> &[EstimateKey] {
        &self.keys
    }

    pub fn get(&self, key: &EstimateKey) -> Option<&[f64]> {
        self.index.get(key).map(|&k| self.values[k].as_slice())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&EstimateKey, &[f64])> {
        self.keys.iter().zip(self.values.iter().map(Vec::as_slice))
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn n_draws(&self) -> usize {
        self.values.first().map_or(0, Vec::len)
    }

    /// Transformed scale: log rate per woman-year, log TFR, or logit.
    pub fn to_log(&self, key: &EstimateKey, v: f64) -> f64 {
        match (self.measure, key.age) {
            (Measure::Fertility, Some(_)) => (v / 1000.0).ln(),
            (Measure::Fertility, None) => v.ln(),
            (Measure::Proportion, _) => (v / (1.0 - v)).ln(),
        }
    }

    pub fn log_draws(&self, key: &EstimateKey) -> Option<Vec<f64>> {
        self.get(key)
            .map(|d| d.iter().map(|&v| self.to_log(key, v)).collect())
    }

    /// Adds per-draw TFR keys `5 Σ_a ASFR_a / 1000` for every (area, period)
    /// with all seven age groups.
    pub fn add_tfr(&mut self) {
        if self.measure != Measure::Fertility {
            return;
        }
        let mut groups: Vec<(usize, Period)> = self
            .keys
            .iter()
            .filter(|k| k.age.is_some())
            .map(|k| (k.area, k.period))
            .collect();
        groups.sort();
        groups.dedup();
        for (area, period) in groups {
            let cols: Option<Vec<&[f64]>> = AgeGroup::all()
                .map(|a| self.get(&EstimateKey::asfr(area, period, a)))
                .collect();
            let Some(cols) = cols else { continue };
            let s = cols[0].len();
            let tfr: Vec<f64> = (0..s)
                .map(|d| 5.0 * cols.iter().map(|c| c[d]).sum::<f64>() / 1000.0)
                .collect();
            self.insert(EstimateKey::tfr(area, period), tfr);
        }
    }

    pub fn summaries(&self, model: &str) -> Vec<SmoothedEstimate> {
        self.iter()
            .filter_map(|(key, draws)| {
                let natural = summarize(draws)?;
                let log: Vec<f64> = draws.iter().map(|&v| self.to_log(key, v)).collect();
                Some(SmoothedEstimate {
                    model: model.to_string(),
                    level: self.level,
                    key: *key,
                    natural,
                    log: summarize(&log)?,
                })
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SmoothedEstimate {
    pub model: String,
    pub level: Level,
    pub key: EstimateKey,
    pub natural: Summary,
    pub log: Summary,
}

#[derive(Debug, Serialize, Deserialize)]
struct SmoothedRow {
    model: String,
    level: String,
    area_id: usize,
    period: String,
    age_group: String,
    median: f64,
    mean: f64,
    q025: f64,
    q05: f64,
    q95: f64,
    q975: f64,
}

fn age_label(age: Option<AgeGroup>) -> String {
    age.map_or_else(|| "TFR".to_string(), |a| a.label())
}

fn rows<'a>(
    estimates: &'a [SmoothedEstimate],
    pick: impl Fn(&SmoothedEstimate) -> Summary + 'a,
) -> impl Iterator<Item = SmoothedRow> + 'a {
    estimates.iter().map(move |e| {
        let s = pick(e);
        SmoothedRow {
            model: e.model.clone(),
            level: e.level.to_string(),
            area_id: e.key.area + 1,
            period: e.key.period.to_string(),
            age_group: age_label(e.key.age),
            median: s.median,
            mean: s.mean,
            q025: s.q025,
            q05: s.q05,
            q95: s.q95,
            q975: s.q975,
        }
    })
}

/// Writes `smoothed_estimates.csv` (natural scale) and
/// `smoothed_estimates_log.csv` (log or logit scale) into `dir`.
pub fn write_smoothed(dir: &Path, estimates: &[SmoothedEstimate]) -> Result<(), ModelError> {
    fertsae_core::io::write_rows(&dir.join("smoothed_estimates.csv"), rows(estimates, |e| e.natural))?;
    fertsae_core::io::write_rows(&dir.join("smoothed_estimates_log.csv"), rows(estimates, |e| e.log))?;
    Ok(())
}

/// Reads one smoothed-estimates file; returns (model, level, key, summary).
pub fn read_smoothed(path: &Path) -> Result<Vec<(String, Level, EstimateKey, Summary)>, ModelError> {
    let rows: Vec<SmoothedRow> = fertsae_core::io::read_rows(path)?;
    rows.into_iter()
        .map(|r| {
            let level = Level::parse(&r.level)
                .ok_or_else(|| ModelError::Invalid(format!("bad level `{}`", r.level)))?;
            let key = parse_key(r.area_id, &r.period, &r.age_group)?;
            let s = Summary {
                mean: r.mean,
                median: r.median,
                q025: r.q025,
                q05: r.q05,
                q95: r.q95,
                q975: r.q975,
            };
            Ok((r.model, level, key, s))
        })
        .collect()
}

#[derive(Debug, Serialize, Deserialize)]
struct DrawRow {
    level: String,
    area_id: usize,
    period: String,
    age_group: String,
    draw: usize,
    value: f64,
}

fn parse_key(area_id: usize, period: &str, age_group: &str) -> Result<EstimateKey, ModelError> {
    let age = match age_group {
        "TFR" => None,
        s => Some(AgeGroup::parse(s).ok_or_else(|| ModelError::Invalid(format!("bad age group `{s}`")))?),
    };
    Ok(EstimateKey {
        area: area_id
            .checked_sub(1)
            .ok_or_else(|| ModelError::Invalid("area_id must be one-based".into()))?,
        period: period.parse()?,
        age,
    })
}

/// Long-format reported draws: `level,area_id,period,age_group,draw,value`.
pub fn write_draws(path: &Path, table: &DrawTable) -> Result<(), ModelError> {
    let level = table.level.to_string();
    let rows = table.iter().flat_map(|(k, d)| {
        let level = level.clone();
        d.iter().enumerate().map(move |(s, &value)| DrawRow {
            level: level.clone(),
            area_id: k.area + 1,
            period: k.period.to_string(),
            age_group: age_label(k.age),
            draw: s + 1,
            value,
        })
    });
    fertsae_core::io::write_rows(path, rows)?;
    Ok(())
}

/// Reads a file written by [`write_draws`] as fertility draws.
pub fn read_draws(path: &Path) -> Result<DrawTable, ModelError> {
    let rows: Vec<DrawRow> = fertsae_core::io::read_rows(path)?;
    let level = match rows.first() {
        Some(r) => Level::parse(&r.level).ok_or_else(|| ModelError::Invalid(format!("bad level `{}`", r.level)))?,
        None => return Err(ModelError::NoData(format!("{} has no draws", path.display()))),
    };
    let mut grouped: Vec<(EstimateKey, Vec<f64>)> = Vec::new();
    let mut index: HashMap<EstimateKey, usize> = HashMap::new();
    for r in rows {
        let key = parse_key(r.area_id, &r.period, &r.age_group)?;
        let k = *index.entry(key).or_insert_with(|| {
            grouped.push((key, Vec::new()));
            grouped.len() - 1
        });
        let d = &mut grouped[k].1;
        if r.draw != d.len() + 1 {
            return Err(ModelError::Invalid(format!("draws of {key:?} are not numbered 1, 2, ...")));
        }
        d.push(r.value);
    }
    let n = grouped.first().map_or(0, |g| g.1.len());
    let mut table = DrawTable::new(level, Measure::Fertility);
    for (key, d) in grouped {
        if d.len() != n {
            return Err(ModelError::Invalid("unequal draw counts across keys".into()));
        }
        table.insert(key, d);
    }
    Ok(table)
}

#[derive(Debug, Serialize)]
struct SampleRow<'a> {
    draw: usize,
    parameter: &'a str,
    value: f64,
}

/// Long-format `samples.csv`: `draw,parameter,value`.
pub fn write_samples(path: &Path, samples: &fertsae_gmrf::PosteriorSamples) -> Result<(), ModelError> {
    let names = samples.names();
    let rows = samples.draws().iter().enumerate().flat_map(|(d, x)| {
        names.iter().zip(x).map(move |(n, &v)| SampleRow {
            draw: d + 1,
            parameter: n,
            value: v,
        })
    });
    fertsae_core::io::write_rows(path, rows)?;
    Ok(())
}

/// Weighted per-draw average of yearly draws into periods. `weights` gives a
/// weight per year; equal weights are used when `None`. Weights are
/// renormalised within each period and must be non-negative.
pub fn aggregate_periods(
    yearly: &DrawTable,
    periods: &[Period],
    weights: Option<&dyn Fn(usize, i32) -> f64>,
) -> Result<DrawTable, ModelError> {
    let mut out = DrawTable::new(yearly.level, yearly.measure);
    let mut groups: Vec<(usize, Option<AgeGroup>)> =
        yearly.keys().iter().map(|k| (k.area, k.age)).collect();
    groups.sort();
    groups.dedup();
    for (area, age) in groups {
        for &p in periods {
            let mut acc: Option<Vec<f64>> = None;
            let mut total = 0.0;
            let mut parts = Vec::new();
            for year in p.years() {
                let key = EstimateKey {
                    area,
                    period: Period::year(year),
                    age,
                };
                let Some(d) = yearly.get(&key) else {
                    parts.clear();
                    break;
                };
                let w = weights.map_or(1.0, |f| f(area, year));
                if !(w >= 0.0 && w.is_finite()) {
                    return Err(ModelError::Invalid(format!("negative weight for year {year}")));
                }
                total += w;
                parts.push((w, d));
            }
            if parts.len() != p.n_years() {
                continue;
            }
            if !(total > 0.0) {
                return Err(ModelError::Invalid(format!("period {p} has zero total weight")));
            }
            for (w, d) in parts {
                let a = acc.get_or_insert_with(|| vec![0.0; d.len()]);
                if a.len() != d.len() {
                    return Err(ModelError::Invalid("unequal draw counts across years".into()));
                }
                for (x, v) in a.iter_mut().zip(d) {
                    *x += w * v;
                }
            }
            if let Some(mut a) = acc {
                a.iter_mut().for_each(|x| *x /= total);
                out.insert(EstimateKey { area, period: p, age }, a);
            }
        }
    }
    Ok(out)
}

/// Population-weighted per-draw average of area draws into parent areas.
/// `parent[i]` is the parent of area `i` at `level`; `weight(i, age)` is the
/// female population behind key `(i, age)`. ASFR keys are averaged and the
/// TFR recomputed from them; tables without age keys average the TFR directly.
pub fn aggregate_areas(
    table: &DrawTable,
    parent: &[usize],
    level: Level,
    weight: &dyn Fn(usize, Option<AgeGroup>) -> f64,
) -> Result<DrawTable, ModelError> {
    let has_ages = table.keys().iter().any(|k| k.age.is_some());
    let mut acc: HashMap<EstimateKey, (f64, Vec<f64>)> = HashMap::new();
    let mut order = Vec::new();
    for (key, d) in table.iter() {
        if has_ages && key.age.is_none() {
            continue;
        }
        let &p = parent
            .get(key.area)
            .ok_or_else(|| ModelError::Invalid(format!("area {} has no parent", key.area + 1)))?;
        let w = weight(key.area, key.age);
        if !(w >= 0.0 && w.is_finite()) {
            return Err(ModelError::Invalid(format!("bad weight for area {}", key.area + 1)));
        }
        let target = EstimateKey { area: p, ..*key };
        let entry = acc.entry(target).or_insert_with(|| {
            order.push(target);
            (0.0, vec![0.0; d.len()])
        });
        if entry.1.len() != d.len() {
            return Err(ModelError::Invalid("unequal draw counts across areas".into()));
        }
        entry.0 += w;
        for (x, v) in entry.1.iter_mut().zip(d) {
            *x += w * v;
        }
    }
    order.sort();
    let mut out = DrawTable::new(level, table.measure);
    for key in order {
        let (total, mut sum) = acc.remove(&key).expect("accumulated");
        if !(total > 0.0) {
            return Err(ModelError::Invalid(format!("area {} has zero total weight", key.area + 1)));
        }
        sum.iter_mut().for_each(|x| *x /= total);
        out.insert(key, sum);
    }
    out.add_tfr();
    Ok(out)
}

/// Checks `TFR = 5 Σ ASFR / 1000` per draw for every TFR key that has all seven
/// age groups; returns the largest absolute discrepancy.
pub fn tfr_identity_gap(table: &DrawTable) -> f64 {
    let mut worst = 0.0f64;
    for (key, tfr) in table.iter().filter(|(k, _)| k.age.is_none()) {
        let cols: Option<Vec<&[f64]>> = AgeGroup::all()
            .map(|a| table.get(&EstimateKey::asfr(key.area, key.period, a)))
            .collect();
        if let Some(cols) = cols {
            debug_assert_eq!(cols.len(), N_AGE_GROUPS);
            for (d, &t) in tfr.iter().enumerate() {
                let s: f64 = cols.iter().map(|c| c[d]).sum();
                worst = worst.max((t - 5.0 * s / 1000.0).abs());
            }
        }
    }
    worst
}
