//! Exploration measurement: a fixed coverage grid over the maze, run logs,
//! and the interquartile-mean / bootstrap aggregation used to compare runs.
//!
//! Every algorithm is scored on the same grid (0.5 maze units, 24x24 for the
//! default 12x12 arena) regardless of any cells it uses internally.
//!
//! Run log files are plain text:
//!
//! ```text
//! # lge-runlog v1
//! # algorithm=lge seed=0 config_hash=0123abcd total_steps=100000 reachable_cells=576
//! timestep,cells_visited,coverage,algorithm,seed,config_hash
//! 1,1,0.001736111111111111,lge,0,0123abcd
//! ```
//!
//! Aggregate tables are CSV with header `algorithm,timestep,iqm,ci_lo,ci_hi`;
//! performance profiles use `algorithm,threshold,fraction`.

use std::collections::{BTreeMap, HashSet, VecDeque};
use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;

use crate::envsim::EnvConfig;
use crate::error::{Error, Result};

/// Cell size of the scoring grid.
pub const METRIC_CELL_SIZE: f64 = 0.5;

pub type GridCell = (usize, usize);

#[derive(Clone, Debug)]
pub struct CoverageGrid {
    cell_size: f64,
    half_width: f64,
    cells_per_side: usize,
    reachable: HashSet<GridCell>,
    visited: HashSet<GridCell>,
    visited_reachable: usize,
}

impl CoverageGrid {
    pub fn new(maze: &EnvConfig, cell_size: f64) -> Result<Self> {
        let reachable = flood_fill_reachable(maze, cell_size)?;
        Ok(Self {
            cell_size,
            half_width: maze.half_width,
            cells_per_side: cells_per_side(maze.half_width, cell_size),
            reachable,
            visited: HashSet::new(),
            visited_reachable: 0,
        })
    }

    pub fn cell_size(&self) -> f64 {
        self.cell_size
    }

    pub fn cell_of(&self, obs: &[f64]) -> GridCell {
        let idx = |v: f64| {
            let i = ((v + self.half_width) / self.cell_size).floor();
            (i.max(0.0) as usize).min(self.cells_per_side - 1)
        };
        (idx(obs[0]), idx(obs[1]))
    }

    /// Marks the cell of `obs` as visited; returns true if it is new.
    pub fn visit(&mut self, obs: &[f64]) -> bool {
        let cell = self.cell_of(obs);
        let new = self.visited.insert(cell);
        if new && self.reachable.contains(&cell) {
            self.visited_reachable += 1;
        }
        new
    }

    /// Number of visited cells that belong to the reachable set.
    pub fn cells_visited(&self) -> usize {
        self.visited_reachable
    }

    pub fn reachable_total(&self) -> usize {
        self.reachable.len()
    }

    pub fn coverage(&self) -> f64 {
        self.visited_reachable as f64 / self.reachable.len() as f64
    }

    pub fn is_reachable(&self, cell: GridCell) -> bool {
        self.reachable.contains(&cell)
    }
}

fn cells_per_side(half_width: f64, cell_size: f64) -> usize {
    ((2.0 * half_width / cell_size) - 1e-9).ceil().max(1.0) as usize
}

fn cell_center(half_width: f64, cell_size: f64, cell: GridCell) -> [f64; 2] {
    [
        -half_width + (cell.0 as f64 + 0.5) * cell_size,
        -half_width + (cell.1 as f64 + 0.5) * cell_size,
    ]
}

/// Breadth-first search over grid cells from the start cell. Two
/// 4-neighbouring cells are connected when the segment joining their centres
/// crosses no wall.
pub fn flood_fill_reachable(maze: &EnvConfig, cell_size: f64) -> Result<HashSet<GridCell>> {
    if !(cell_size > 0.0) {
        return Err(Error::InvalidInput(format!(
            "cell size must be positive, got {cell_size}"
        )));
    }
    let n = cells_per_side(maze.half_width, cell_size);
    let hw = maze.half_width;
    let start_idx = |v: f64| ((((v + hw) / cell_size).floor()).max(0.0) as usize).min(n - 1);
    let start = (start_idx(maze.start[0]), start_idx(maze.start[1]));
    let c = cell_center(hw, cell_size, start);
    if !maze.path_is_clear(c, c) {
        return Err(Error::Maze("start cell is blocked by a wall".into()));
    }
    let mut seen = HashSet::from([start]);
    let mut queue = VecDeque::from([start]);
    while let Some(cell) = queue.pop_front() {
        let from = cell_center(hw, cell_size, cell);
        for next in grid_neighbours(cell, n) {
            if seen.contains(&next) {
                continue;
            }
            if maze.path_is_clear(from, cell_center(hw, cell_size, next)) {
                seen.insert(next);
                queue.push_back(next);
            }
        }
    }
    Ok(seen)
}

fn grid_neighbours(cell: GridCell, n: usize) -> impl Iterator<Item = GridCell> {
    let (i, j) = cell;
    let mut out = Vec::with_capacity(4);
    if i > 0 {
        out.push((i - 1, j));
    }
    if i + 1 < n {
        out.push((i + 1, j));
    }
    if j > 0 {
        out.push((i, j - 1));
    }
    if j + 1 < n {
        out.push((i, j + 1));
    }
    out.into_iter()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRecord {
    pub timestep: u64,
    pub cells_visited: usize,
    pub coverage: f64,
}

/// Append-only coverage history of one run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunLog {
    pub algorithm: String,
    pub seed: u64,
    pub config_hash: String,
    pub total_steps: u64,
    pub reachable_cells: usize,
    pub records: Vec<LogRecord>,
}

impl RunLog {
    pub fn new(
        algorithm: impl Into<String>,
        seed: u64,
        config_hash: impl Into<String>,
        total_steps: u64,
        reachable_cells: usize,
    ) -> Self {
        Self {
            algorithm: algorithm.into(),
            seed,
            config_hash: config_hash.into(),
            total_steps,
            reachable_cells,
            records: Vec::new(),
        }
    }

    pub fn final_coverage(&self) -> f64 {
        self.records.last().map_or(0.0, |r| r.coverage)
    }

    pub fn coverage_at(&self, timestep: u64) -> Option<f64> {
        let idx = self.records.partition_point(|r| r.timestep <= timestep);
        idx.checked_sub(1).map(|i| self.records[i].coverage)
    }

    pub fn push(&mut self, record: LogRecord) -> Result<()> {
        if let Some(last) = self.records.last() {
            if record.timestep <= last.timestep {
                return Err(Error::RunLog(format!(
                    "timestep {} does not follow {}",
                    record.timestep, last.timestep
                )));
            }
            if record.coverage < last.coverage {
                return Err(Error::RunLog("coverage decreased".into()));
            }
        }
        self.records.push(record);
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::with_capacity(64 * (self.records.len() + 3));
        out.push_str("# lge-runlog v1\n");
        let _ = writeln!(
            out,
            "# algorithm={} seed={} config_hash={} total_steps={} reachable_cells={}",
            self.algorithm, self.seed, self.config_hash, self.total_steps, self.reachable_cells
        );
        out.push_str("timestep,cells_visited,coverage,algorithm,seed,config_hash\n");
        for r in &self.records {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                r.timestep, r.cells_visited, r.coverage, self.algorithm, self.seed, self.config_hash
            );
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some("# lge-runlog v1") {
            return Err(Error::RunLog("missing `# lge-runlog v1` header".into()));
        }
        let meta_line = lines
            .next()
            .and_then(|l| l.strip_prefix("# "))
            .ok_or_else(|| Error::RunLog("missing metadata line".into()))?;
        let meta: BTreeMap<&str, &str> = meta_line
            .split_whitespace()
            .filter_map(|kv| kv.split_once('='))
            .collect();
        let get = |k: &str| {
            meta.get(k)
                .copied()
                .ok_or_else(|| Error::RunLog(format!("metadata lacks `{k}`")))
        };
        let num = |k: &str| -> Result<u64> { get(k)?.parse().map_err(|_| Error::RunLog(format!("bad `{k}`"))) };
        let mut log = RunLog::new(
            get("algorithm")?,
            num("seed")?,
            get("config_hash")?,
            num("total_steps")?,
            num("reachable_cells")? as usize,
        );
        if lines.next() != Some("timestep,cells_visited,coverage,algorithm,seed,config_hash") {
            return Err(Error::RunLog("missing column header".into()));
        }
        for (i, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            let bad = || Error::RunLog(format!("bad record on data line {}", i + 1));
            if f.len() != 6 {
                return Err(bad());
            }
            log.push(LogRecord {
                timestep: f[0].parse().map_err(|_| bad())?,
                cells_visited: f[1].parse().map_err(|_| bad())?,
                coverage: f[2].parse().map_err(|_| bad())?,
            })?;
        }
        Ok(log)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| Error::RunLog(format!("{}: {e}", path.display())))
    }
}

/// Couples a coverage grid with the log it feeds.
#[derive(Clone, Debug)]
pub struct CoverageRecorder {
    pub grid: CoverageGrid,
    pub log: RunLog,
}

impl CoverageRecorder {
    pub fn new(grid: CoverageGrid, log: RunLog) -> Self {
        Self { grid, log }
    }

    pub fn record(&mut self, obs: &[f64], timestep: u64) -> Result<()> {
        self.grid.visit(obs);
        self.log.push(LogRecord {
            timestep,
            cells_visited: self.grid.cells_visited(),
            coverage: self.grid.coverage(),
        })
    }
}

/// Number of values dropped from each end by [`iqm`].
pub fn iqm_trim(n: usize) -> usize {
    n / 4
}

/// Interquartile mean: the mean after dropping `floor(n/4)` values from each end.
pub fn iqm(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::InvalidInput("iqm of an empty list".into()));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(iqm_sorted(&sorted))
}

fn iqm_sorted(sorted: &[f64]) -> f64 {
    let k = iqm_trim(sorted.len());
    let mid = &sorted[k..sorted.len() - k];
    mid.iter().sum::<f64>() / mid.len() as f64
}

/// Percentile-bootstrap interval of the IQM. The returned interval is widened
/// if needed so that it always contains the point estimate.
pub fn bootstrap_ci<R: Rng + ?Sized>(values: &[f64], level: f64, resamples: usize, rng: &mut R) -> Result<(f64, f64)> {
    if values.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "bootstrap needs at least 2 values, got {}",
            values.len()
        )));
    }
    if !(level > 0.0 && level < 1.0) || resamples == 0 {
        return Err(Error::InvalidInput(
            "bootstrap level must be in (0,1), resamples > 0".into(),
        ));
    }
    let n = values.len();
    let mut sample = vec![0.0; n];
    let mut stats = Vec::with_capacity(resamples);
    for _ in 0..resamples {
        for s in sample.iter_mut() {
            *s = values[rng.random_range(0..n)];
        }
        sample.sort_by(f64::total_cmp);
        stats.push(iqm_sorted(&sample));
    }
    stats.sort_by(f64::total_cmp);
    let alpha = (1.0 - level) / 2.0;
    let point = iqm(values)?;
    let lo = quantile_sorted(&stats, alpha).min(point);
    let hi = quantile_sorted(&stats, 1.0 - alpha).max(point);
    Ok((lo, hi))
}

/// Linear-interpolation quantile of sorted data.
fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// Fraction of `finals` at or above each threshold.
pub fn performance_profile(finals: &[f64], thresholds: &[f64]) -> Vec<f64> {
    thresholds
        .iter()
        .map(|&t| finals.iter().filter(|&&v| v >= t).count() as f64 / finals.len().max(1) as f64)
        .collect()
}

/// Evenly spaced thresholds `0, 1/(n-1), ..., 1`.
pub fn profile_thresholds(n: usize) -> Vec<f64> {
    (0..n).map(|i| i as f64 / (n - 1).max(1) as f64).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct AggregateRow {
    pub algorithm: String,
    pub timestep: u64,
    pub iqm: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProfileRow {
    pub algorithm: String,
    pub threshold: f64,
    pub fraction: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Aggregate {
    pub rows: Vec<AggregateRow>,
    pub profile: Vec<ProfileRow>,
    pub warnings: Vec<String>,
}

#[derive(Clone, Debug)]
pub struct AggregateOptions {
    /// Emit one row every `stride` timesteps (plus the last common timestep).
    pub stride: u64,
    pub level: f64,
    pub resamples: usize,
    pub profile_points: usize,
    /// Allow logs with different config hashes under one algorithm label.
    pub allow_mixed_configs: bool,
}

impl Default for AggregateOptions {
    fn default() -> Self {
        Self {
            stride: 1000,
            level: 0.95,
            resamples: 2000,
            profile_points: 101,
            allow_mixed_configs: false,
        }
    }
}

/// Per-algorithm IQM curves with bootstrap intervals over seeds, plus final
/// performance profiles. Logs of unequal length are truncated to their
/// common prefix with a warning.
pub fn aggregate<R: Rng + ?Sized>(logs: &[RunLog], opts: &AggregateOptions, rng: &mut R) -> Result<Aggregate> {
    if logs.is_empty() {
        return Err(Error::RunLog("no run logs to aggregate".into()));
    }
    let mut groups: BTreeMap<&str, Vec<&RunLog>> = BTreeMap::new();
    for log in logs {
        groups.entry(log.algorithm.as_str()).or_default().push(log);
    }
    let mut out = Aggregate::default();
    let thresholds = profile_thresholds(opts.profile_points);
    for (algo, runs) in groups {
        let hashes: HashSet<&str> = runs.iter().map(|r| r.config_hash.as_str()).collect();
        if hashes.len() > 1 && !opts.allow_mixed_configs {
            return Err(Error::RunLog(format!(
                "algorithm `{algo}` mixes {} config hashes; pass the override to combine them",
                hashes.len()
            )));
        }
        let common = runs.iter().map(|r| r.records.len()).min().unwrap_or(0);
        if runs.iter().any(|r| r.records.len() != common) {
            out.warnings.push(format!(
                "algorithm `{algo}`: logs differ in length, truncated to the common {common} records"
            ));
        }
        if common == 0 {
            out.warnings.push(format!("algorithm `{algo}`: empty logs skipped"));
            continue;
        }
        let stride = opts.stride.max(1);
        let mut idxs: Vec<usize> = (0..common)
            .filter(|&i| runs[0].records[i].timestep % stride == 0)
            .collect();
        if idxs.last() != Some(&(common - 1)) {
            idxs.push(common - 1);
        }
        for i in idxs {
            let values: Vec<f64> = runs.iter().map(|r| r.records[i].coverage).collect();
            let centre = iqm(&values)?;
            let (lo, hi) = if values.len() >= 2 {
                bootstrap_ci(&values, opts.level, opts.resamples, rng)?
            } else {
                (centre, centre)
            };
            out.rows.push(AggregateRow {
                algorithm: algo.to_string(),
                timestep: runs[0].records[i].timestep,
                iqm: centre,
                ci_lo: lo,
                ci_hi: hi,
            });
        }
        let finals: Vec<f64> = runs.iter().map(|r| r.records[common - 1].coverage).collect();
        for (t, frac) in thresholds.iter().zip(performance_profile(&finals, &thresholds)) {
            out.profile.push(ProfileRow {
                algorithm: algo.to_string(),
                threshold: *t,
                fraction: frac,
            });
        }
    }
    Ok(out)
}

impl Aggregate {
    pub fn table_text(&self) -> String {
        let mut out = String::from("algorithm,timestep,iqm,ci_lo,ci_hi\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{},{},{}", r.algorithm, r.timestep, r.iqm, r.ci_lo, r.ci_hi);
        }
        out
    }

    pub fn profile_text(&self) -> String {
        let mut out = String::from("algorithm,threshold,fraction\n");
        for r in &self.profile {
            let _ = writeln!(out, "{},{},{}", r.algorithm, r.threshold, r.fraction);
        }
        out
    }

    /// Last row for `algorithm`, i.e. the final-timestep IQM and interval.
    pub fn final_row(&self, algorithm: &str) -> Option<&AggregateRow> {
        self.rows.iter().rev().find(|r| r.algorithm == algorithm)
    }
}
