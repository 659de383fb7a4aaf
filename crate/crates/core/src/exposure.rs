//! Births and person-years on the Lexis grid.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::survey::{AgeGroup, CmcDate, Cluster, Level, SurveyDataset};
use crate::CoreError;

/// Inclusive range of calendar years.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Period {
    pub first: i32,
    pub last: i32,
}

impl Period {
    pub fn new(first: i32, last: i32) -> Result<Self, CoreError> {
        if first > last {
            return Err(CoreError::Invalid(format!("empty period {first}-{last}")));
        }
        Ok(Self { first, last })
    }

    pub fn year(year: i32) -> Self {
        Self {
            first: year,
            last: year,
        }
    }

    pub fn contains(self, year: i32) -> bool {
        (self.first..=self.last).contains(&year)
    }

    pub fn n_years(self) -> usize {
        (self.last - self.first + 1) as usize
    }

    pub fn years(self) -> impl Iterator<Item = i32> {
        self.first..=self.last
    }

    pub fn first_month(self) -> CmcDate {
        CmcDate::from_year_month(self.first, 1).expect("year >= 1900")
    }

    pub fn last_month(self) -> CmcDate {
        CmcDate::from_year_month(self.last, 12).expect("year >= 1900")
    }
}

impl fmt::Display for Period {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.first == self.last {
            write!(f, "{}", self.first)
        } else {
            write!(f, "{}-{}", self.first, self.last)
        }
    }
}

impl FromStr for Period {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || CoreError::Invalid(format!("bad period `{s}`"));
        let s = s.trim();
        match s.split_once('-') {
            Some((a, b)) => Period::new(a.parse().map_err(|_| bad())?, b.parse().map_err(|_| bad())?),
            None => Ok(Period::year(s.parse().map_err(|_| bad())?)),
        }
    }
}

/// How calendar years are grouped into reporting periods.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum PeriodGrouping {
    #[default]
    Annual,
    Blocks(Vec<Period>),
}

impl PeriodGrouping {
    /// Consecutive blocks of `width` years ending at `last`, starting no
    /// earlier than `first`; a short leading block is kept.
    pub fn consecutive(first: i32, last: i32, width: usize) -> Self {
        let mut blocks = Vec::new();
        let mut end = last;
        while end >= first {
            let start = (end - width as i32 + 1).max(first);
            blocks.push(Period { first: start, last: end });
            end = start - 1;
        }
        blocks.reverse();
        PeriodGrouping::Blocks(blocks)
    }

    pub fn period_of(&self, year: i32) -> Option<Period> {
        match self {
            PeriodGrouping::Annual => Some(Period::year(year)),
            PeriodGrouping::Blocks(b) => b.iter().copied().find(|p| p.contains(year)),
        }
    }

    pub fn periods(&self, window: Period) -> Vec<Period> {
        match self {
            PeriodGrouping::Annual => window.years().map(Period::year).collect(),
            PeriodGrouping::Blocks(b) => b.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Urbanicity {
    Urban,
    Rural,
    #[default]
    Both,
}

impl Urbanicity {
    pub fn admits(self, urban: bool) -> bool {
        match self {
            Urbanicity::Urban => urban,
            Urbanicity::Rural => !urban,
            Urbanicity::Both => true,
        }
    }

    fn flag(self) -> Option<bool> {
        match self {
            Urbanicity::Urban => Some(true),
            Urbanicity::Rural => Some(false),
            Urbanicity::Both => None,
        }
    }
}

/// Cell address. `unit` is a cluster index for cluster-level tables and an
/// area index otherwise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CellKey {
    pub unit: usize,
    pub urban: Option<bool>,
    pub period: Period,
    pub age: AgeGroup,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct FertilityCell {
    pub births: u64,
    pub exposure: f64,
    pub weighted_births: f64,
    pub weighted_exposure: f64,
}

impl FertilityCell {
    fn add(&mut self, other: &FertilityCell) {
        self.births += other.births;
        self.exposure += other.exposure;
        self.weighted_births += other.weighted_births;
        self.weighted_exposure += other.weighted_exposure;
    }
}

/// Metadata of the cluster behind each cluster-level row.
pub type ClusterMeta = Cluster;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TabulationReport {
    /// In-window births to mothers outside ages 15-49.
    pub out_of_age_births: usize,
    pub women_without_exposure: usize,
    pub zero_exposure: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FertilityTable {
    /// `None` for the cluster-level table produced by [`tabulate`].
    pub level: Option<Level>,
    pub urbanicity: Urbanicity,
    pub window: Period,
    pub cells: BTreeMap<CellKey, FertilityCell>,
    pub clusters: Vec<ClusterMeta>,
    pub n_admin1: usize,
    pub n_admin2: usize,
    pub report: TabulationReport,
}

impl FertilityTable {
    pub fn total(&self) -> FertilityCell {
        let mut t = FertilityCell::default();
        for c in self.cells.values() {
            t.add(c);
        }
        t
    }

    pub fn is_cluster_level(&self) -> bool {
        self.level.is_none()
    }

    pub fn n_areas(&self, level: Level) -> usize {
        match level {
            Level::National => 1,
            Level::Admin1 => self.n_admin1,
            Level::Admin2 => self.n_admin2,
        }
    }

    /// Restricts a cluster-level table to a subset of clusters.
    pub fn retain_clusters(&self, keep: impl Fn(usize, &Cluster) -> bool) -> FertilityTable {
        let mut out = self.clone();
        out.cells
            .retain(|k, _| keep(k.unit, &self.clusters[k.unit]));
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), CoreError> {
        let rows = self.cells.iter().map(|(k, c)| {
            let (area_id, cluster_id) = match self.level {
                None => {
                    let cl = &self.clusters[k.unit];
                    (cl.admin2 + 1, cl.cluster_id.clone())
                }
                Some(_) => (k.unit + 1, String::new()),
            };
            CellRow {
                area_id,
                urban: k.urban.map(u8::from),
                cluster_id,
                year: k.period.to_string(),
                age_group: k.age.label(),
                births: c.births,
                exposure: c.exposure,
                w_births: c.weighted_births,
                w_exposure: c.weighted_exposure,
            }
        });
        crate::io::write_rows(path, rows)
    }

    /// Reads an aggregated table written by [`FertilityTable::write_csv`].
    pub fn read_aggregated_csv(
        path: &Path,
        level: Level,
        n_admin1: usize,
        n_admin2: usize,
    ) -> Result<FertilityTable, CoreError> {
        let rows: Vec<CellRow> = crate::io::read_rows(path)?;
        let mut cells = BTreeMap::new();
        let mut urbanicity = Urbanicity::Both;
        let mut window: Option<Period> = None;
        for (i, r) in rows.into_iter().enumerate() {
            let bad = |m: String| CoreError::schema(path, format!("line {}: {m}", i + 2));
            if !r.cluster_id.is_empty() {
                return Err(bad("cluster-level row in aggregated table".into()));
            }
            let period: Period = r.year.parse().map_err(|e: CoreError| bad(e.to_string()))?;
            let age = AgeGroup::parse(&r.age_group)
                .ok_or_else(|| bad(format!("bad age group `{}`", r.age_group)))?;
            if r.area_id == 0 {
                return Err(bad("area_id must be one-based".into()));
            }
            let urban = match r.urban {
                None => None,
                Some(0) => Some(false),
                Some(1) => Some(true),
                Some(v) => return Err(bad(format!("urban must be 0 or 1, found {v}"))),
            };
            urbanicity = match urban {
                Some(true) => Urbanicity::Urban,
                Some(false) => Urbanicity::Rural,
                None => Urbanicity::Both,
            };
            window = Some(match window {
                None => period,
                Some(w) => Period {
                    first: w.first.min(period.first),
                    last: w.last.max(period.last),
                },
            });
            let key = CellKey {
                unit: r.area_id - 1,
                urban,
                period,
                age,
            };
            let cell = FertilityCell {
                births: r.births,
                exposure: r.exposure,
                weighted_births: r.w_births,
                weighted_exposure: r.w_exposure,
            };
            if cells.insert(key, cell).is_some() {
                return Err(bad("duplicate cell".into()));
            }
        }
        Ok(FertilityTable {
            level: Some(level),
            urbanicity,
            window: window.ok_or_else(|| CoreError::NoData(format!("{} is empty", path.display())))?,
            cells,
            clusters: Vec::new(),
            n_admin1,
            n_admin2,
            report: TabulationReport::default(),
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CellRow {
    area_id: usize,
    urban: Option<u8>,
    cluster_id: String,
    year: String,
    age_group: String,
    births: u64,
    exposure: f64,
    w_births: f64,
    w_exposure: f64,
}

/// Integer months and birth counts contributed by one woman, per
/// (year, age group).
#[derive(Debug, Default)]
struct WomanContribution {
    cells: Vec<(i32, AgeGroup, u64, u64)>,
    out_of_age: usize,
}

fn contribution(
    dob: CmcDate,
    interview: CmcDate,
    births: impl Iterator<Item = CmcDate>,
    window: Period,
) -> WomanContribution {
    let mut out = WomanContribution::default();
    let (ws, we) = (window.first_month().value() as i64, window.last_month().value() as i64);
    let dob = dob.value() as i64;
    let start = (dob + 180).max(ws);
    let end = (interview.value() as i64 - 1).min(we).min(dob + 599);
    let mut m = start;
    while m <= end {
        let g = (m - dob - 180) / 60;
        let group_end = dob + 180 + 60 * (g + 1) - 1;
        let year = 1900 + (m - 1) / 12;
        let year_end = (year - 1900) * 12 + 12;
        let seg_end = end.min(group_end).min(year_end);
        out.cells.push((
            year as i32,
            AgeGroup::new(g as usize).expect("age within 15-49"),
            (seg_end - m + 1) as u64,
            0,
        ));
        m = seg_end + 1;
    }
    for b in births {
        let b = b.value() as i64;
        if b < ws || b > we {
            continue;
        }
        match AgeGroup::from_age_months(b - dob) {
            Some(age) => {
                let year = (1900 + (b - 1) / 12) as i32;
                match out.cells.iter_mut().find(|c| c.0 == year && c.1 == age) {
                    Some(c) => c.3 += 1,
                    None => out.cells.push((year, age, 0, 1)),
                }
            }
            None => out.out_of_age += 1,
        }
    }
    out
}

/// Tabulates births and exposure per (cluster, year, age group) over the
/// calendar-year `window`. Exposure is censored at the month before
/// interview; births in the interview month are counted.
pub fn tabulate(dataset: &SurveyDataset, window: Period) -> Result<FertilityTable, CoreError> {
    if window.first > window.last {
        return Err(CoreError::Invalid("empty tabulation window".into()));
    }
    let latest = dataset
        .last_interview_year()
        .ok_or_else(|| CoreError::NoData("dataset has no women".into()))?;
    if window.last > latest {
        return Err(CoreError::Invalid(format!(
            "window ends in {} after the latest interview year {latest}",
            window.last
        )));
    }
    if window.first < 1900 {
        return Err(CoreError::Invalid("window starts before 1900".into()));
    }
    let contributions: Vec<WomanContribution> = dataset
        .women()
        .par_iter()
        .enumerate()
        .map(|(i, w)| {
            contribution(
                w.dob,
                w.interview,
                dataset.births_of(i).iter().map(|b| b.birth),
                window,
            )
        })
        .collect();

    // merge in woman order so floating sums do not depend on scheduling
    let mut months: BTreeMap<CellKey, (u64, u64, f64, f64)> = BTreeMap::new();
    let mut report = TabulationReport::default();
    for (i, contrib) in contributions.iter().enumerate() {
        let w = &dataset.women()[i];
        let cluster = dataset.cluster_of(i);
        let exposed: u64 = contrib.cells.iter().map(|c| c.2).sum();
        if exposed == 0 {
            report.women_without_exposure += 1;
        }
        report.out_of_age_births += contrib.out_of_age;
        for &(year, age, m, b) in &contrib.cells {
            let key = CellKey {
                unit: cluster,
                urban: Some(dataset.clusters()[cluster].urban),
                period: Period::year(year),
                age,
            };
            let e = months.entry(key).or_default();
            e.0 += m;
            e.1 += b;
            e.2 += w.weight * m as f64;
            e.3 += w.weight * b as f64;
        }
    }
    let cells: BTreeMap<CellKey, FertilityCell> = months
        .into_iter()
        .map(|(k, (m, b, wm, wb))| {
            (
                k,
                FertilityCell {
                    births: b,
                    exposure: m as f64 / 12.0,
                    weighted_births: wb,
                    weighted_exposure: wm / 12.0,
                },
            )
        })
        .collect();
    report.zero_exposure = cells.values().all(|c| c.exposure == 0.0);
    Ok(FertilityTable {
        level: None,
        urbanicity: Urbanicity::Both,
        window,
        cells,
        clusters: dataset.clusters().to_vec(),
        n_admin1: dataset.admin1_graph().len(),
        n_admin2: dataset.admin2_graph().len(),
        report,
    })
}

/// Re-keys a cluster-level table to (area, period, age group), keeping only
/// clusters admitted by `urbanicity`.
pub fn aggregate_cells(
    table: &FertilityTable,
    level: Level,
    urbanicity: Urbanicity,
    grouping: &PeriodGrouping,
) -> Result<FertilityTable, CoreError> {
    if !table.is_cluster_level() {
        return Err(CoreError::Invalid(
            "aggregation needs a cluster-level table".into(),
        ));
    }
    let n_areas = table.n_areas(level);
    let mut cells: BTreeMap<CellKey, FertilityCell> = BTreeMap::new();
    for (k, c) in &table.cells {
        let cluster = &table.clusters[k.unit];
        if !urbanicity.admits(cluster.urban) {
            continue;
        }
        let area = cluster.area(level);
        if area >= n_areas {
            return Err(CoreError::Invalid(format!(
                "cluster `{}` has unknown {level} id {}",
                cluster.cluster_id,
                area + 1
            )));
        }
        let period = grouping.period_of(k.period.first).ok_or_else(|| {
            CoreError::Invalid(format!("year {} is not covered by the period grouping", k.period.first))
        })?;
        let key = CellKey {
            unit: area,
            urban: urbanicity.flag(),
            period,
            age: k.age,
        };
        cells.entry(key).or_default().add(c);
    }
    Ok(FertilityTable {
        level: Some(level),
        urbanicity,
        window: table.window,
        cells,
        clusters: table.clusters.clone(),
        n_admin1: table.n_admin1,
        n_admin2: table.n_admin2,
        report: table.report.clone(),
    })
}
