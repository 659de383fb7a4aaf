//! Urban fractions, urban/rural combination and exceedance probabilities.

use std::collections::BTreeMap;
use std::path::Path;

use fertsae_core::io::{read_rows, write_rows};
use fertsae_core::{AgeGroup, Period, N_AGE_GROUPS};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::estimates::{DrawTable, Measure};
#[cfg(test)]
use crate::estimates::EstimateKey;
use crate::ModelError;

#[derive(Debug, Clone, PartialEq)]
pub struct Pixel {
    pub pixel_id: String,
    pub area: usize,
    pub urban: bool,
    /// Female population per age group.
    pub population: [f64; N_AGE_GROUPS],
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GridLayer {
    pub pixels: Vec<Pixel>,
}

impl GridLayer {
    pub fn new(pixels: Vec<Pixel>) -> Result<Self, ModelError> {
        for p in &pixels {
            if p.population.iter().any(|h| !(*h >= 0.0) || !h.is_finite()) {
                return Err(ModelError::Invalid(format!(
                    "pixel `{}` has a negative or non-finite population",
                    p.pixel_id
                )));
            }
        }
        Ok(Self { pixels })
    }

    /// Reads `pixel_id,area_id,urban_label,pop_15_19,…,pop_45_49`.
    pub fn read_csv(path: &Path) -> Result<Self, ModelError> {
        let mut reader = csv::Reader::from_path(path)
            .map_err(|e| ModelError::Invalid(format!("{}: {e}", path.display())))?;
        let mut pixels = Vec::new();
        for (line, rec) in reader.records().enumerate() {
            let rec = rec.map_err(|e| ModelError::Invalid(format!("{}: {e}", path.display())))?;
            let bad = |what: &str| {
                ModelError::Invalid(format!("{} line {}: bad {what}", path.display(), line + 2))
            };
            if rec.len() != 3 + N_AGE_GROUPS {
                return Err(bad("column count"));
            }
            let area: usize = rec[1].trim().parse().map_err(|_| bad("area_id"))?;
            if area == 0 {
                return Err(bad("area_id"));
            }
            let urban = match rec[2].trim() {
                "1" => true,
                "0" => false,
                _ => return Err(bad("urban_label")),
            };
            let mut population = [0.0; N_AGE_GROUPS];
            for (a, h) in population.iter_mut().enumerate() {
                *h = rec[3 + a].trim().parse().map_err(|_| bad("population"))?;
            }
            pixels.push(Pixel {
                pixel_id: rec[0].to_string(),
                area: area - 1,
                urban,
                population,
            });
        }
        Self::new(pixels)
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), ModelError> {
        let mut w = csv::Writer::from_path(path)
            .map_err(|e| ModelError::Invalid(format!("{}: {e}", path.display())))?;
        let mut header = vec!["pixel_id".to_string(), "area_id".into(), "urban_label".into()];
        header.extend(AgeGroup::all().map(|a| format!("pop_{}", a.label().replace('-', "_"))));
        let io = |e: csv::Error| ModelError::Invalid(e.to_string());
        w.write_record(&header).map_err(io)?;
        for p in &self.pixels {
            let mut row = vec![
                p.pixel_id.clone(),
                (p.area + 1).to_string(),
                if p.urban { "1" } else { "0" }.to_string(),
            ];
            row.extend(p.population.iter().map(|h| h.to_string()));
            w.write_record(&row).map_err(io)?;
        }
        w.flush().map_err(|e| ModelError::Invalid(e.to_string()))
    }
}

/// `Σ L_g H_g / Σ H_g` over the pixels of `area`.
pub fn urban_fraction(grid: &GridLayer, area: usize, age: AgeGroup) -> Result<f64, ModelError> {
    let (mut urban, mut total) = (0.0, 0.0);
    for p in grid.pixels.iter().filter(|p| p.area == area) {
        let h = p.population[age.index()];
        total += h;
        if p.urban {
            urban += h;
        }
    }
    if total > 0.0 {
        Ok(urban / total)
    } else {
        Err(ModelError::Invalid(format!(
            "area {} has no female population aged {age}",
            area + 1
        )))
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct FractionRow {
    area_id: usize,
    period: String,
    age_group: String,
    r: f64,
}

/// Urban share `r` per (area, period, age group).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct UrbanFractionTable {
    values: BTreeMap<(usize, Period, AgeGroup), f64>,
}

impl UrbanFractionTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, area: usize, period: Period, age: AgeGroup, r: f64) -> Result<(), ModelError> {
        if !(0.0..=1.0).contains(&r) {
            return Err(ModelError::Invalid(format!("urban fraction {r} outside [0, 1]")));
        }
        self.values.insert((area, period, age), r);
        Ok(())
    }

    /// Fractions for every area and age of `grid`, attached to `period`.
    pub fn from_grid(grid: &GridLayer, n_areas: usize, period: Period) -> Result<Self, ModelError> {
        let mut out = Self::new();
        for area in 0..n_areas {
            for age in AgeGroup::all() {
                out.insert(area, period, age, urban_fraction(grid, area, age)?)?;
            }
        }
        Ok(out)
    }

    /// Exact period match first, then any stored period containing `period`.
    pub fn get(&self, area: usize, period: Period, age: AgeGroup) -> Option<f64> {
        if let Some(&r) = self.values.get(&(area, period, age)) {
            return Some(r);
        }
        self.values
            .iter()
            .find(|((i, p, a), _)| {
                *i == area && *a == age && p.first <= period.first && period.last <= p.last
            })
            .map(|(_, &r)| r)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), ModelError> {
        write_rows(
            path,
            self.values.iter().map(|(&(area, period, age), &r)| FractionRow {
                area_id: area + 1,
                period: period.to_string(),
                age_group: age.label(),
                r,
            }),
        )?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self, ModelError> {
        let rows: Vec<FractionRow> = read_rows(path)?;
        let mut out = Self::new();
        for row in rows {
            if row.area_id == 0 {
                return Err(ModelError::Invalid("area_id must be at least 1".into()));
            }
            let age = AgeGroup::parse(&row.age_group).ok_or_else(|| {
                ModelError::Invalid(format!("unknown age group `{}`", row.age_group))
            })?;
            out.insert(row.area_id - 1, row.period.parse()?, age, row.r)?;
        }
        Ok(out)
    }
}

/// Combined table and any alignment flags.
#[derive(Debug, Clone)]
pub struct Combined {
    pub draws: DrawTable,
    pub flags: Vec<String>,
}

fn resample(draws: &[f64], n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| draws[rng.random_range(0..draws.len())]).collect()
}

/// Per-draw `r μ^U + (1-r) μ^R` for every ASFR key, then TFR from the
/// combined rates. A missing stratum falls back to the other with `r` forced
/// to 0 or 1.
pub fn aggregate_ur(
    urban: Option<&DrawTable>,
    rural: Option<&DrawTable>,
    fractions: &UrbanFractionTable,
    seed: u64,
) -> Result<Combined, ModelError> {
    let mut flags = Vec::new();
    let (u, r) = match (urban, rural) {
        (Some(u), Some(r)) => (u, r),
        (Some(only), None) | (None, Some(only)) => {
            let which = if urban.is_some() { "rural" } else { "urban" };
            flags.push(format!("{which} stratum unavailable; using the other stratum alone"));
            let mut draws = DrawTable::new(only.level, Measure::Fertility);
            for (k, d) in only.iter().filter(|(k, _)| k.age.is_some()) {
                draws.insert(*k, d.to_vec());
            }
            draws.add_tfr();
            return Ok(Combined { draws, flags });
        }
        (None, None) => return Err(ModelError::NoData("both strata are unavailable".into())),
    };
    if u.level != r.level {
        return Err(ModelError::Invalid("urban and rural tables are at different levels".into()));
    }
    let s = u.n_draws().max(r.n_draws());
    if u.n_draws() != r.n_draws() {
        flags.push(format!(
            "draw counts differ ({} urban, {} rural); resampled to {s}",
            u.n_draws(),
            r.n_draws()
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = DrawTable::new(u.level, Measure::Fertility);
    for (key, du) in u.iter().filter(|(k, _)| k.age.is_some()) {
        let age = key.age.expect("filtered");
        let Some(dr) = r.get(key) else {
            flags.push(format!("no rural estimate for area {} {} {age}", key.area + 1, key.period));
            continue;
        };
        let w = fractions.get(key.area, key.period, age).ok_or_else(|| {
            ModelError::Invalid(format!(
                "no urban fraction for area {} period {} age {age}",
                key.area + 1,
                key.period
            ))
        })?;
        let du = if du.len() == s { du.to_vec() } else { resample(du, s, &mut rng) };
        let dr = if dr.len() == s { dr.to_vec() } else { resample(dr, s, &mut rng) };
        out.insert(*key, du.iter().zip(&dr).map(|(a, b)| w * a + (1.0 - w) * b).collect());
    }
    out.add_tfr();
    Ok(Combined { draws: out, flags })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Exceedance {
    pub area: usize,
    pub period: Period,
    pub threshold: f64,
    pub probability: f64,
}

/// Share of index-matched draws with `TFR^R - TFR^U > threshold`.
pub fn exceedance_probability(urban: &DrawTable, rural: &DrawTable, threshold: f64) -> Vec<Exceedance> {
    let mut out = Vec::new();
    for (key, du) in urban.iter().filter(|(k, _)| k.age.is_none()) {
        let Some(dr) = rural.get(key) else { continue };
        let s = du.len().min(dr.len());
        if s == 0 {
            continue;
        }
        let hits = (0..s).filter(|&d| dr[d] - du[d] > threshold).count();
        out.push(Exceedance {
            area: key.area,
            period: key.period,
            threshold,
            probability: hits as f64 / s as f64,
        });
    }
    out
}

#[derive(Serialize)]
struct ExceedanceRow {
    area_id: usize,
    period: String,
    threshold: f64,
    probability: f64,
}

pub fn write_exceedance(path: &Path, rows: &[Exceedance]) -> Result<(), ModelError> {
    write_rows(
        path,
        rows.iter().map(|e| ExceedanceRow {
            area_id: e.area + 1,
            period: e.period.to_string(),
            threshold: e.threshold,
            probability: e.probability,
        }),
    )?;
    Ok(())
}
