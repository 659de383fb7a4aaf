//! Survey microdata: dates, records, region graphs and validated loading.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use fertsae_gmrf::{GraphReport, RegionGraph};
use serde::{Deserialize, Serialize};

use crate::CoreError;

pub const N_AGE_GROUPS: usize = 7;

/// Century month code: `(year - 1900) * 12 + month`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CmcDate(u32);

impl CmcDate {
    pub fn new(cmc: i64) -> Result<Self, CoreError> {
        if cmc < 1 || cmc > u32::MAX as i64 {
            return Err(CoreError::Invalid(format!("CMC {cmc} out of range")));
        }
        Ok(Self(cmc as u32))
    }

    pub fn from_year_month(year: i32, month: u32) -> Result<Self, CoreError> {
        if !(1..=12).contains(&month) {
            return Err(CoreError::Invalid(format!("month {month} not in 1..=12")));
        }
        if year < 1900 {
            return Err(CoreError::Invalid(format!("year {year} before 1900")));
        }
        Self::new((year as i64 - 1900) * 12 + month as i64)
    }

    pub fn value(self) -> u32 {
        self.0
    }

    pub fn year(self) -> i32 {
        1900 + ((self.0 - 1) / 12) as i32
    }

    pub fn month(self) -> u32 {
        (self.0 - 1) % 12 + 1
    }

    pub fn year_month(self) -> (i32, u32) {
        (self.year(), self.month())
    }

    /// Whole months from `earlier` to `self` (negative if `self` is earlier).
    pub fn months_since(self, earlier: CmcDate) -> i64 {
        self.0 as i64 - earlier.0 as i64
    }

    pub fn offset(self, months: i64) -> Result<Self, CoreError> {
        Self::new(self.0 as i64 + months)
    }
}

impl fmt::Display for CmcDate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

pub fn cmc_from_year_month(year: i32, month: u32) -> Result<CmcDate, CoreError> {
    CmcDate::from_year_month(year, month)
}

/// Five-year maternal age group, index 0 (15-19) to 6 (45-49).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct AgeGroup(u8);

impl AgeGroup {
    pub fn new(index: usize) -> Option<Self> {
        (index < N_AGE_GROUPS).then_some(Self(index as u8))
    }

    /// Group for an age in completed months, if within 15-49.
    pub fn from_age_months(months: i64) -> Option<Self> {
        if (180..600).contains(&months) {
            Some(Self(((months - 180) / 60) as u8))
        } else {
            None
        }
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn lower_age(self) -> u32 {
        15 + 5 * self.0 as u32
    }

    pub fn label(self) -> String {
        format!("{}-{}", self.lower_age(), self.lower_age() + 4)
    }

    pub fn parse(label: &str) -> Option<Self> {
        let (lo, _) = label.split_once('-')?;
        let lo: u32 = lo.trim().parse().ok()?;
        if lo < 15 || (lo - 15) % 5 != 0 {
            return None;
        }
        Self::new(((lo - 15) / 5) as usize).filter(|g| g.label() == label.trim())
    }

    pub fn all() -> impl Iterator<Item = AgeGroup> {
        (0..N_AGE_GROUPS as u8).map(AgeGroup)
    }
}

impl fmt::Display for AgeGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    National,
    Admin1,
    Admin2,
}

impl Level {
    pub fn as_str(self) -> &'static str {
        match self {
            Level::National => "national",
            Level::Admin1 => "admin1",
            Level::Admin2 => "admin2",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "national" => Some(Level::National),
            "admin1" => Some(Level::Admin1),
            "admin2" => Some(Level::Admin2),
            _ => None,
        }
    }
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WomanRecord {
    pub woman_id: String,
    pub cluster_id: String,
    pub dob: CmcDate,
    pub interview: CmcDate,
    pub weight: f64,
}

impl WomanRecord {
    pub fn age_at_interview(&self) -> i64 {
        self.interview.months_since(self.dob)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BirthRecord {
    pub woman_id: String,
    pub birth: CmcDate,
}

/// Sampled cluster. Region indices are zero-based internally and one-based in
/// files.
#[derive(Debug, Clone, PartialEq)]
pub struct Cluster {
    pub cluster_id: String,
    pub admin1: usize,
    pub admin2: usize,
    pub urban: bool,
    pub stratum_id: String,
}

impl Cluster {
    pub fn area(&self, level: Level) -> usize {
        match level {
            Level::National => 0,
            Level::Admin1 => self.admin1,
            Level::Admin2 => self.admin2,
        }
    }
}

/// Per-area covariate values, one row per region of `level`.
#[derive(Debug, Clone, PartialEq)]
pub struct CovariateTable {
    pub level: Level,
    pub names: Vec<String>,
    pub values: Vec<Vec<f64>>,
}

impl CovariateTable {
    pub fn column(&self, k: usize) -> Vec<f64> {
        self.values.iter().map(|row| row[k]).collect()
    }
}

/// Cross-referenced survey microdata. Records are held sorted by identifier so
/// the dataset does not depend on input row order.
#[derive(Debug, Clone, PartialEq)]
pub struct SurveyDataset {
    women: Vec<WomanRecord>,
    births: Vec<BirthRecord>,
    clusters: Vec<Cluster>,
    admin1_graph: RegionGraph,
    admin2_graph: RegionGraph,
    covariates: Vec<CovariateTable>,
    woman_cluster: Vec<usize>,
    woman_births: Vec<(usize, usize)>,
}

impl SurveyDataset {
    /// Builds a dataset, checking every cross-reference and record invariant.
    pub fn new(
        mut women: Vec<WomanRecord>,
        mut births: Vec<BirthRecord>,
        mut clusters: Vec<Cluster>,
        admin1_graph: RegionGraph,
        admin2_graph: RegionGraph,
    ) -> Result<Self, CoreError> {
        clusters.sort_by(|a, b| a.cluster_id.cmp(&b.cluster_id));
        women.sort_by(|a, b| a.woman_id.cmp(&b.woman_id));
        births.sort_by(|a, b| (&a.woman_id, a.birth).cmp(&(&b.woman_id, b.birth)));
        for pair in clusters.windows(2) {
            if pair[0].cluster_id == pair[1].cluster_id {
                return Err(CoreError::Invalid(format!(
                    "duplicate cluster id `{}`",
                    pair[0].cluster_id
                )));
            }
        }
        for pair in women.windows(2) {
            if pair[0].woman_id == pair[1].woman_id {
                return Err(CoreError::Invalid(format!(
                    "duplicate woman id `{}`",
                    pair[0].woman_id
                )));
            }
        }
        for c in &clusters {
            if c.admin1 >= admin1_graph.len() || c.admin2 >= admin2_graph.len() {
                return Err(CoreError::Invalid(format!(
                    "cluster `{}` refers to a region outside the graphs",
                    c.cluster_id
                )));
            }
        }
        check_nesting(&clusters)?;
        let cluster_index: HashMap<&str, usize> = clusters
            .iter()
            .enumerate()
            .map(|(i, c)| (c.cluster_id.as_str(), i))
            .collect();
        let mut woman_cluster = Vec::with_capacity(women.len());
        for w in &women {
            let &c = cluster_index.get(w.cluster_id.as_str()).ok_or_else(|| {
                CoreError::Invalid(format!(
                    "woman `{}` refers to unknown cluster `{}`",
                    w.woman_id, w.cluster_id
                ))
            })?;
            if let Err(reason) = check_woman(w) {
                return Err(CoreError::Invalid(format!("woman `{}`: {reason}", w.woman_id)));
            }
            woman_cluster.push(c);
        }
        let mut woman_births = vec![(0, 0); women.len()];
        let mut k = 0;
        for (i, w) in women.iter().enumerate() {
            while k < births.len() && births[k].woman_id < w.woman_id {
                return Err(CoreError::Invalid(format!(
                    "birth refers to unknown woman `{}`",
                    births[k].woman_id
                )));
            }
            let start = k;
            while k < births.len() && births[k].woman_id == w.woman_id {
                if let Err(reason) = check_birth(&births[k], w) {
                    return Err(CoreError::Invalid(format!(
                        "birth of woman `{}`: {reason}",
                        w.woman_id
                    )));
                }
                k += 1;
            }
            woman_births[i] = (start, k);
        }
        if k < births.len() {
            return Err(CoreError::Invalid(format!(
                "birth refers to unknown woman `{}`",
                births[k].woman_id
            )));
        }
        Ok(Self {
            women,
            births,
            clusters,
            admin1_graph,
            admin2_graph,
            covariates: Vec::new(),
            woman_cluster,
            woman_births,
        })
    }

    pub fn with_covariates(mut self, table: CovariateTable) -> Result<Self, CoreError> {
        let n = self.n_areas(table.level);
        if table.values.len() != n || table.values.iter().any(|r| r.len() != table.names.len()) {
            return Err(CoreError::Invalid(format!(
                "covariate table for {} needs {n} rows of {} values",
                table.level,
                table.names.len()
            )));
        }
        self.covariates.retain(|t| t.level != table.level);
        self.covariates.push(table);
        Ok(self)
    }

    pub fn women(&self) -> &[WomanRecord] {
        &self.women
    }

    pub fn births(&self) -> &[BirthRecord] {
        &self.births
    }

    pub fn clusters(&self) -> &[Cluster] {
        &self.clusters
    }

    pub fn admin1_graph(&self) -> &RegionGraph {
        &self.admin1_graph
    }

    pub fn admin2_graph(&self) -> &RegionGraph {
        &self.admin2_graph
    }

    pub fn graph(&self, level: Level) -> Option<&RegionGraph> {
        match level {
            Level::National => None,
            Level::Admin1 => Some(&self.admin1_graph),
            Level::Admin2 => Some(&self.admin2_graph),
        }
    }

    pub fn n_areas(&self, level: Level) -> usize {
        match level {
            Level::National => 1,
            Level::Admin1 => self.admin1_graph.len(),
            Level::Admin2 => self.admin2_graph.len(),
        }
    }

    pub fn covariates(&self, level: Level) -> Option<&CovariateTable> {
        self.covariates.iter().find(|t| t.level == level)
    }

    pub fn covariate_tables(&self) -> &[CovariateTable] {
        &self.covariates
    }

    /// Cluster index of woman `i`.
    pub fn cluster_of(&self, woman: usize) -> usize {
        self.woman_cluster[woman]
    }

    pub fn births_of(&self, woman: usize) -> &[BirthRecord] {
        let (a, b) = self.woman_births[woman];
        &self.births[a..b]
    }

    /// Admin-1 region containing each Admin-2 region, when observed.
    pub fn admin2_parent(&self) -> Vec<Option<usize>> {
        let mut parent = vec![None; self.admin2_graph.len()];
        for c in &self.clusters {
            parent[c.admin2] = Some(c.admin1);
        }
        parent
    }

    /// Latest interview year among respondents.
    pub fn last_interview_year(&self) -> Option<i32> {
        self.women.iter().map(|w| w.interview.year()).max()
    }
}

fn check_woman(w: &WomanRecord) -> Result<(), String> {
    if !(w.weight.is_finite() && w.weight > 0.0) {
        return Err(format!("weight {} must be positive", w.weight));
    }
    if w.interview <= w.dob {
        return Err("interview must follow date of birth".into());
    }
    let age = w.age_at_interview();
    if !(180..600).contains(&age) {
        return Err(format!("age at interview {age} months outside [180, 600)"));
    }
    Ok(())
}

fn check_birth(b: &BirthRecord, mother: &WomanRecord) -> Result<(), String> {
    if b.birth.months_since(mother.dob) < 120 {
        return Err(format!(
            "birth {} earlier than 120 months after mother's birth {}",
            b.birth, mother.dob
        ));
    }
    if b.birth > mother.interview {
        return Err(format!("birth {} after interview {}", b.birth, mother.interview));
    }
    Ok(())
}

fn check_nesting(clusters: &[Cluster]) -> Result<(), CoreError> {
    let mut parent: HashMap<usize, usize> = HashMap::new();
    let mut strata: HashMap<&str, (usize, bool)> = HashMap::new();
    for c in clusters {
        if let Some(&p) = parent.get(&c.admin2) {
            if p != c.admin1 {
                return Err(CoreError::Invalid(format!(
                    "admin2 region {} nests in admin1 regions {} and {}",
                    c.admin2 + 1,
                    p + 1,
                    c.admin1 + 1
                )));
            }
        } else {
            parent.insert(c.admin2, c.admin1);
        }
        let key = (c.admin1, c.urban);
        if let Some(&s) = strata.get(c.stratum_id.as_str()) {
            if s != key {
                return Err(CoreError::Invalid(format!(
                    "stratum `{}` spans more than one (admin1, urbanicity) pair",
                    c.stratum_id
                )));
            }
        } else {
            strata.insert(&c.stratum_id, key);
        }
    }
    Ok(())
}

/// Report-only structural check of an adjacency graph.
pub fn validate_graph(graph: &RegionGraph) -> GraphReport {
    graph.validate()
}

/// Reads an adjacency file: line 1 holds `n`, then one line `i k j1 .. jk`
/// per region, all indices one-based.
pub fn read_adjacency(path: &Path) -> Result<RegionGraph, CoreError> {
    let text = fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
    let graph = parse_adjacency(&text).map_err(|m| CoreError::schema(path, m))?;
    let report = graph.validate();
    if !report.self_loops.is_empty() {
        return Err(CoreError::Graph(format!(
            "{}: self-loop at region {}",
            path.display(),
            report.self_loops[0] + 1
        )));
    }
    if let Some(&(i, j)) = report.asymmetric_pairs.first() {
        return Err(CoreError::Graph(format!(
            "{}: region {} lists {} but not the reverse",
            path.display(),
            i + 1,
            j + 1
        )));
    }
    Ok(graph)
}

pub(crate) fn parse_adjacency(text: &str) -> Result<RegionGraph, String> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(k, l)| (k + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty());
    let (_, first) = lines.next().ok_or("empty adjacency file")?;
    let n: usize = first
        .parse()
        .map_err(|_| format!("line 1: expected region count, found `{first}`"))?;
    let mut neighbors: Vec<Option<Vec<usize>>> = vec![None; n];
    for (line, text) in lines {
        let nums: Result<Vec<usize>, _> = text.split_whitespace().map(str::parse).collect();
        let nums = nums.map_err(|_| format!("line {line}: non-integer token"))?;
        if nums.len() < 2 {
            return Err(format!("line {line}: expected `i k j1 .. jk`"));
        }
        let (i, k) = (nums[0], nums[1]);
        if i == 0 || i > n {
            return Err(format!("line {line}: region {i} outside 1..={n}"));
        }
        if nums.len() != k + 2 {
            return Err(format!(
                "line {line}: region {i} declares {k} neighbours but lists {}",
                nums.len() - 2
            ));
        }
        let mut list = Vec::with_capacity(k);
        for &j in &nums[2..] {
            if j == 0 || j > n {
                return Err(format!("line {line}: neighbour {j} outside 1..={n}"));
            }
            list.push(j - 1);
        }
        if neighbors[i - 1].replace(list).is_some() {
            return Err(format!("line {line}: region {i} listed twice"));
        }
    }
    let missing: Vec<usize> = (0..n).filter(|&i| neighbors[i].is_none()).collect();
    if let Some(&i) = missing.first() {
        return Err(format!("region {} has no adjacency line", i + 1));
    }
    Ok(RegionGraph::from_adjacency(
        neighbors.into_iter().map(Option::unwrap_or_default).collect(),
    ))
}

pub fn write_adjacency(graph: &RegionGraph, path: &Path) -> Result<(), CoreError> {
    let mut out = format!("{}\n", graph.len());
    for i in 0..graph.len() {
        let nb = graph.neighbors(i);
        out.push_str(&format!("{} {}", i + 1, nb.len()));
        for &j in nb {
            out.push_str(&format!(" {}", j + 1));
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| CoreError::io(path, e))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetPaths {
    pub women: PathBuf,
    pub births: PathBuf,
    pub clusters: PathBuf,
    pub admin1_graph: PathBuf,
    pub admin2_graph: PathBuf,
    pub covariates: Vec<(Level, PathBuf)>,
}

impl DatasetPaths {
    /// Standard file names inside `dir`.
    pub fn in_dir(dir: &Path) -> Self {
        let mut covariates = Vec::new();
        for level in [Level::Admin1, Level::Admin2] {
            let p = dir.join(format!("covariates_{level}.csv"));
            if p.exists() {
                covariates.push((level, p));
            }
        }
        Self {
            women: dir.join("women.csv"),
            births: dir.join("births.csv"),
            clusters: dir.join("clusters.csv"),
            admin1_graph: dir.join("admin1.adj"),
            admin2_graph: dir.join("admin2.adj"),
            covariates,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LoadMode {
    /// Drop rows that violate record invariants and report them.
    #[default]
    Lenient,
    /// Abort on the first invalid row.
    Strict,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RowIssue {
    pub file: String,
    pub line: u64,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LoadReport {
    pub women: usize,
    pub births: usize,
    pub clusters: usize,
    pub rejected: Vec<RowIssue>,
    pub admin1_report: GraphReport,
    pub admin2_report: GraphReport,
}

impl fmt::Display for LoadReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} women, {} births, {} clusters loaded; {} rows rejected",
            self.women,
            self.births,
            self.clusters,
            self.rejected.len()
        )?;
        for issue in &self.rejected {
            write!(f, "\n  {} line {}: {}", issue.file, issue.line, issue.reason)?;
        }
        Ok(())
    }
}

#[derive(Debug, Deserialize, Serialize)]
pub(crate) struct WomanRow {
    pub woman_id: String,
    pub cluster_id: String,
    pub dob_cmc: i64,
    pub interview_cmc: i64,
    pub weight: f64,
}

#[derive(Debug, Deserialize, Serialize)]
pub(crate) struct BirthRow {
    pub woman_id: String,
    pub birth_cmc: i64,
}

#[derive(Debug, Deserialize, Serialize)]
pub(crate) struct ClusterRow {
    pub cluster_id: String,
    pub admin1_id: usize,
    pub admin2_id: usize,
    pub urban: u8,
    pub stratum_id: String,
}

struct Rows<T> {
    rows: Vec<(u64, T)>,
}

fn file_name(path: &Path) -> String {
    path.file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

/// Reads typed rows; unparsable rows are rejected (lenient) or fatal (strict).
fn read_rows<T: serde::de::DeserializeOwned>(
    path: &Path,
    columns: &[&str],
    mode: LoadMode,
    issues: &mut Vec<RowIssue>,
) -> Result<Rows<T>, CoreError> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => CoreError::io(path, io),
            other => CoreError::schema(path, format!("{other:?}")),
        })?;
    let headers = reader
        .headers()
        .map_err(|e| CoreError::schema(path, e.to_string()))?
        .clone();
    for col in columns {
        if !headers.iter().any(|h| h == *col) {
            return Err(CoreError::schema(path, format!("missing column `{col}`")));
        }
    }
    let mut rows = Vec::new();
    for result in reader.records() {
        let outcome = result.and_then(|rec| {
            let line = rec.position().map_or(0, |p| p.line());
            rec.deserialize::<T>(Some(&headers)).map(|row| (line, row))
        });
        match outcome {
            Ok(row) => rows.push(row),
            Err(e) => {
                let line = e.position().map_or(0, |p| p.line());
                let reason = match e.kind() {
                    csv::ErrorKind::Deserialize { err, .. } => err.to_string(),
                    _ => e.to_string(),
                };
                reject(issues, mode, path, line, reason)?;
            }
        }
    }
    Ok(Rows { rows })
}

fn reject(
    issues: &mut Vec<RowIssue>,
    mode: LoadMode,
    path: &Path,
    line: u64,
    reason: String,
) -> Result<(), CoreError> {
    let file = file_name(path);
    if mode == LoadMode::Strict {
        return Err(CoreError::InvalidRow { file, line, reason });
    }
    issues.push(RowIssue { file, line, reason });
    Ok(())
}

/// Loads and cross-references the survey files. Rows violating record
/// invariants are dropped with line-numbered diagnostics (or abort in strict
/// mode); dangling identifiers and malformed graphs are always errors.
pub fn load_dataset(
    paths: &DatasetPaths,
    mode: LoadMode,
) -> Result<(SurveyDataset, LoadReport), CoreError> {
    let admin1_graph = read_adjacency(&paths.admin1_graph)?;
    let admin2_graph = read_adjacency(&paths.admin2_graph)?;
    let mut issues = Vec::new();

    let cluster_rows: Rows<ClusterRow> = read_rows(
        &paths.clusters,
        &["cluster_id", "admin1_id", "admin2_id", "urban", "stratum_id"],
        mode,
        &mut issues,
    )?;
    let mut clusters = Vec::new();
    let mut cluster_ids: HashSet<String> = HashSet::new();
    let mut rejected_clusters: HashSet<String> = HashSet::new();
    for (line, r) in cluster_rows.rows {
        let problem = if r.admin1_id == 0 || r.admin1_id > admin1_graph.len() {
            Some(format!("admin1_id {} outside 1..={}", r.admin1_id, admin1_graph.len()))
        } else if r.admin2_id == 0 || r.admin2_id > admin2_graph.len() {
            Some(format!("admin2_id {} outside 1..={}", r.admin2_id, admin2_graph.len()))
        } else if r.urban > 1 {
            Some(format!("urban must be 0 or 1, found {}", r.urban))
        } else if cluster_ids.contains(&r.cluster_id) {
            Some(format!("duplicate cluster_id `{}`", r.cluster_id))
        } else {
            None
        };
        if let Some(reason) = problem {
            reject(&mut issues, mode, &paths.clusters, line, reason)?;
            rejected_clusters.insert(r.cluster_id);
            continue;
        }
        cluster_ids.insert(r.cluster_id.clone());
        clusters.push(Cluster {
            cluster_id: r.cluster_id,
            admin1: r.admin1_id - 1,
            admin2: r.admin2_id - 1,
            urban: r.urban == 1,
            stratum_id: r.stratum_id,
        });
    }

    let woman_rows: Rows<WomanRow> = read_rows(
        &paths.women,
        &["woman_id", "cluster_id", "dob_cmc", "interview_cmc", "weight"],
        mode,
        &mut issues,
    )?;
    let women_file = file_name(&paths.women);
    let mut women = Vec::new();
    let mut woman_ids: HashMap<String, usize> = HashMap::new();
    let mut rejected_women: HashSet<String> = HashSet::new();
    for (line, r) in woman_rows.rows {
        if !cluster_ids.contains(&r.cluster_id) {
            if rejected_clusters.contains(&r.cluster_id) {
                reject(&mut issues, mode, &paths.women, line, format!("cluster `{}` was rejected", r.cluster_id))?;
                rejected_women.insert(r.woman_id);
                continue;
            }
            return Err(CoreError::DanglingKey {
                file: women_file,
                line,
                field: "cluster_id",
                key: r.cluster_id,
            });
        }
        let record = (|| -> Result<WomanRecord, String> {
            let dob = CmcDate::new(r.dob_cmc).map_err(|e| e.to_string())?;
            let interview = CmcDate::new(r.interview_cmc).map_err(|e| e.to_string())?;
            let w = WomanRecord {
                woman_id: r.woman_id.clone(),
                cluster_id: r.cluster_id.clone(),
                dob,
                interview,
                weight: r.weight,
            };
            check_woman(&w)?;
            if woman_ids.contains_key(&w.woman_id) {
                return Err(format!("duplicate woman_id `{}`", w.woman_id));
            }
            Ok(w)
        })();
        match record {
            Ok(w) => {
                woman_ids.insert(w.woman_id.clone(), women.len());
                women.push(w);
            }
            Err(reason) => {
                reject(&mut issues, mode, &paths.women, line, reason)?;
                rejected_women.insert(r.woman_id);
            }
        }
    }

    let birth_rows: Rows<BirthRow> =
        read_rows(&paths.births, &["woman_id", "birth_cmc"], mode, &mut issues)?;
    let births_file = file_name(&paths.births);
    let mut births = Vec::new();
    for (line, r) in birth_rows.rows {
        let Some(&w) = woman_ids.get(&r.woman_id) else {
            if rejected_women.contains(&r.woman_id) {
                reject(&mut issues, mode, &paths.births, line, format!("woman `{}` was rejected", r.woman_id))?;
                continue;
            }
            return Err(CoreError::DanglingKey {
                file: births_file,
                line,
                field: "woman_id",
                key: r.woman_id,
            });
        };
        let record = CmcDate::new(r.birth_cmc)
            .map_err(|e| e.to_string())
            .and_then(|birth| {
                let b = BirthRecord {
                    woman_id: r.woman_id.clone(),
                    birth,
                };
                check_birth(&b, &women[w]).map(|_| b)
            });
        match record {
            Ok(b) => births.push(b),
            Err(reason) => reject(&mut issues, mode, &paths.births, line, reason)?,
        }
    }

    let admin1_report = admin1_graph.validate();
    let admin2_report = admin2_graph.validate();
    let mut dataset = SurveyDataset::new(women, births, clusters, admin1_graph, admin2_graph)?;
    for (level, path) in &paths.covariates {
        let n = dataset.n_areas(*level);
        let table = read_covariates(path, *level, n)?;
        dataset = dataset.with_covariates(table)?;
    }
    issues.sort_by(|a, b| (&a.file, a.line).cmp(&(&b.file, b.line)));
    let report = LoadReport {
        women: dataset.women().len(),
        births: dataset.births().len(),
        clusters: dataset.clusters().len(),
        rejected: issues,
        admin1_report,
        admin2_report,
    };
    Ok((dataset, report))
}

/// Reads a wide covariate file `area_id,<name>,...` with one row per region.
pub fn read_covariates(path: &Path, level: Level, n_areas: usize) -> Result<CovariateTable, CoreError> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| CoreError::schema(path, e.to_string()))?;
    let headers = reader
        .headers()
        .map_err(|e| CoreError::schema(path, e.to_string()))?
        .clone();
    if headers.get(0) != Some("area_id") || headers.len() < 2 {
        return Err(CoreError::schema(path, "expected `area_id,<covariate>,...` header"));
    }
    let names: Vec<String> = headers.iter().skip(1).map(str::to_string).collect();
    let mut values: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for record in reader.records() {
        let record = record.map_err(|e| CoreError::schema(path, e.to_string()))?;
        let line = record.position().map_or(0, |p| p.line());
        let bad = |m: String| CoreError::schema(path, format!("line {line}: {m}"));
        let area: usize = record[0].parse().map_err(|_| bad(format!("bad area_id `{}`", &record[0])))?;
        if area == 0 || area > n_areas {
            return Err(bad(format!("area_id {area} outside 1..={n_areas}")));
        }
        let row: Result<Vec<f64>, _> = record.iter().skip(1).map(str::parse::<f64>).collect();
        let row = row.map_err(|_| bad("non-numeric covariate".into()))?;
        if row.iter().any(|v| !v.is_finite()) {
            return Err(bad("non-finite covariate".into()));
        }
        if values.insert(area - 1, row).is_some() {
            return Err(bad(format!("area_id {area} repeated")));
        }
    }
    if values.len() != n_areas {
        return Err(CoreError::schema(
            path,
            format!("{} of {n_areas} areas present", values.len()),
        ));
    }
    Ok(CovariateTable {
        level,
        names,
        values: values.into_values().collect(),
    })
}

pub fn write_covariates(table: &CovariateTable, path: &Path) -> Result<(), CoreError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CoreError::schema(path, e.to_string()))?;
    let mut header = vec!["area_id".to_string()];
    header.extend(table.names.iter().cloned());
    let map = |e: csv::Error| CoreError::schema(path, e.to_string());
    w.write_record(&header).map_err(map)?;
    for (i, row) in table.values.iter().enumerate() {
        let mut rec = vec![(i + 1).to_string()];
        rec.extend(row.iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(map)?;
    }
    w.flush().map_err(|e| CoreError::io(path, e))
}

/// Writes the dataset in the loader's file layout under `dir`.
pub fn write_dataset(dataset: &SurveyDataset, dir: &Path) -> Result<DatasetPaths, CoreError> {
    fs::create_dir_all(dir).map_err(|e| CoreError::io(dir, e))?;
    let paths = DatasetPaths {
        women: dir.join("women.csv"),
        births: dir.join("births.csv"),
        clusters: dir.join("clusters.csv"),
        admin1_graph: dir.join("admin1.adj"),
        admin2_graph: dir.join("admin2.adj"),
        covariates: dataset
            .covariates
            .iter()
            .map(|t| (t.level, dir.join(format!("covariates_{}.csv", t.level))))
            .collect(),
    };
    crate::io::write_rows(
        &paths.women,
        dataset.women.iter().map(|w| WomanRow {
            woman_id: w.woman_id.clone(),
            cluster_id: w.cluster_id.clone(),
            dob_cmc: w.dob.value() as i64,
            interview_cmc: w.interview.value() as i64,
            weight: w.weight,
        }),
    )?;
    crate::io::write_rows(
        &paths.births,
        dataset.births.iter().map(|b| BirthRow {
            woman_id: b.woman_id.clone(),
            birth_cmc: b.birth.value() as i64,
        }),
    )?;
    crate::io::write_rows(
        &paths.clusters,
        dataset.clusters.iter().map(|c| ClusterRow {
            cluster_id: c.cluster_id.clone(),
            admin1_id: c.admin1 + 1,
            admin2_id: c.admin2 + 1,
            urban: c.urban as u8,
            stratum_id: c.stratum_id.clone(),
        }),
    )?;
    write_adjacency(&dataset.admin1_graph, &paths.admin1_graph)?;
    write_adjacency(&dataset.admin2_graph, &paths.admin2_graph)?;
    for (t, (_, p)) in dataset.covariates.iter().zip(&paths.covariates) {
        write_covariates(t, p)?;
    }
    Ok(paths)
}
