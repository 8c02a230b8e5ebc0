//! Go-Explore baseline with a fixed cell discretization.
//!
//! The archive keeps, for every cell seen so far, its visit count and the
//! shortest episode prefix that reached it. Each episode selects a rarely
//! visited cell and follows the stored prefix one cell at a time.

use std::collections::BTreeMap;

use ndarray::ArrayView2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::replay::{Episode, GoalPredicate};
use crate::rollout::{GoalProgress, GoalSource, Learner, Trace, TraceEvent};

pub type Cell = Vec<i64>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GoExploreConfig {
    pub cell_size: f64,
}

impl Default for GoExploreConfig {
    fn default() -> Self {
        Self { cell_size: 2.0 }
    }
}

impl GoExploreConfig {
    pub fn validate(&self) -> Result<()> {
        check_cell_size(self.cell_size)
    }
}

fn check_cell_size(size: f64) -> Result<()> {
    if size > 0.0 && size.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("cell size must be positive, got {size}")))
    }
}

pub fn to_cell(obs: &[f64], cell_size: f64) -> Result<Cell> {
    check_cell_size(cell_size)?;
    Ok(obs.iter().map(|x| (x / cell_size).floor() as i64).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct CellEntry {
    pub visits: u64,
    /// Shortest known prefix from an episode start into the cell.
    pub best_trajectory: Vec<Vec<f64>>,
}

impl CellEntry {
    pub fn representative(&self) -> &[f64] {
        self.best_trajectory.last().expect("trajectory is nonempty")
    }
}

#[derive(Clone, Debug)]
pub struct CellArchive {
    cell_size: f64,
    cells: BTreeMap<Cell, CellEntry>,
}

impl CellArchive {
    pub fn new(cell_size: f64) -> Result<Self> {
        check_cell_size(cell_size)?;
        Ok(Self {
            cell_size,
            cells: BTreeMap::new(),
        })
    }

    pub fn cell_size(&self) -> f64 {
        self.cell_size
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn get(&self, cell: &Cell) -> Option<&CellEntry> {
        self.cells.get(cell)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Cell, &CellEntry)> {
        self.cells.iter()
    }

    pub fn cell_of(&self, obs: &[f64]) -> Cell {
        obs.iter().map(|x| (x / self.cell_size).floor() as i64).collect()
    }

    /// Count every state of `trajectory` as a visit and record any prefix
    /// shorter than the stored one.
    pub fn update(&mut self, trajectory: &[Vec<f64>]) {
        for (i, obs) in trajectory.iter().enumerate() {
            let cell = self.cell_of(obs);
            let prefix_len = i + 1;
            let entry = self.cells.entry(cell).or_insert_with(|| CellEntry {
                visits: 0,
                best_trajectory: trajectory[..prefix_len].to_vec(),
            });
            entry.visits += 1;
            if prefix_len < entry.best_trajectory.len() {
                entry.best_trajectory = trajectory[..prefix_len].to_vec();
            }
        }
    }

    pub fn selection_weight(&self, cell: &Cell) -> Option<f64> {
        self.cells.get(cell).map(|e| 1.0 / (1.0 + e.visits as f64))
    }

    /// Sample a cell with probability proportional to `1 / (1 + visits)`.
    pub fn select<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Cell> {
        if self.cells.is_empty() {
            return Err(Error::InsufficientData("cannot select from an empty archive".into()));
        }
        let total: f64 = self.cells.values().map(|e| 1.0 / (1.0 + e.visits as f64)).sum();
        let u = rng.random::<f64>() * total;
        let mut acc = 0.0;
        for (cell, e) in &self.cells {
            acc += 1.0 / (1.0 + e.visits as f64);
            if u < acc {
                return Ok(cell.clone());
            }
        }
        Ok(self.cells.keys().next_back().expect("nonempty").clone())
    }

    /// One state per distinct cell along the best trajectory into `cell`.
    /// The reset state is left out unless it is the whole trajectory.
    pub fn subgoals(&self, cell: &Cell) -> Option<Vec<Vec<f64>>> {
        let traj = &self.cells.get(cell)?.best_trajectory;
        let first = usize::from(traj.len() > 1);
        Some(cell_subgoals(&traj[first..], self.cell_size))
    }
}

/// Reduce a trajectory to the first state of each cell it passes through.
/// A return to an earlier cell cuts the loop, so cells are distinct and
/// appear in trajectory order.
pub fn cell_subgoals(trajectory: &[Vec<f64>], cell_size: f64) -> Vec<Vec<f64>> {
    let mut cells: Vec<Cell> = Vec::new();
    let mut states: Vec<Vec<f64>> = Vec::new();
    for obs in trajectory {
        let c: Cell = obs.iter().map(|x| (x / cell_size).floor() as i64).collect();
        match cells.iter().position(|k| *k == c) {
            Some(i) => {
                cells.truncate(i + 1);
                states.truncate(i + 1);
            }
            None => {
                cells.push(c);
                states.push(obs.clone());
            }
        }
    }
    states
}

/// Achievement test: same cell.
#[derive(Clone, Debug)]
pub struct SameCell {
    pub cell_size: f64,
}

impl GoalPredicate for SameCell {
    fn achieved_batch(&self, achieved: ArrayView2<'_, f64>, goals: ArrayView2<'_, f64>) -> Result<Vec<bool>> {
        if achieved.dim() != goals.dim() {
            return Err(Error::DimensionMismatch {
                context: "same-cell predicate",
                expected: achieved.ncols(),
                got: goals.ncols(),
            });
        }
        let s = self.cell_size;
        Ok(achieved
            .rows()
            .into_iter()
            .zip(goals.rows())
            .map(|(a, g)| a.iter().zip(g).all(|(x, y)| (x / s).floor() == (y / s).floor()))
            .collect())
    }
}

pub struct GoExploreSource {
    archive: CellArchive,
    predicate: SameCell,
    subgoals: Vec<Vec<f64>>,
    current: usize,
    rng: ChaCha8Rng,
    /// Archive size after every episode, when enabled.
    pub archive_sizes: Option<Vec<usize>>,
}

impl GoExploreSource {
    pub fn new(config: &GoExploreConfig, rng: ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            archive: CellArchive::new(config.cell_size)?,
            predicate: SameCell {
                cell_size: config.cell_size,
            },
            subgoals: Vec::new(),
            current: 0,
            rng,
            archive_sizes: None,
        })
    }

    pub fn archive(&self) -> &CellArchive {
        &self.archive
    }

    pub fn subgoals(&self) -> &[Vec<f64>] {
        &self.subgoals
    }
}

impl GoalSource for GoExploreSource {
    fn begin_episode(&mut self, _learner: &mut Learner, t: u64, trace: &mut Trace) -> Result<bool> {
        self.subgoals.clear();
        self.current = 0;
        if self.archive.is_empty() {
            return Ok(false);
        }
        let cell = self.archive.select(&mut self.rng)?;
        self.subgoals = self.archive.subgoals(&cell).expect("selected from archive");
        trace.push(TraceEvent::CellSelected {
            t,
            subgoals: self.subgoals.len(),
        });
        Ok(true)
    }

    fn current_goal(&self) -> &[f64] {
        &self.subgoals[self.current.min(self.subgoals.len() - 1)]
    }

    fn final_goal(&self) -> &[f64] {
        self.subgoals.last().expect("goal phase has subgoals")
    }

    fn observe(&mut self, next_obs: &[f64], t: u64, trace: &mut Trace) -> Result<GoalProgress> {
        if self.current < self.subgoals.len()
            && self.archive.cell_of(next_obs) == self.archive.cell_of(&self.subgoals[self.current])
        {
            trace.push(TraceEvent::SubgoalReached { t, index: self.current });
            self.current += 1;
        }
        Ok(if self.current >= self.subgoals.len() {
            GoalProgress::Complete
        } else {
            GoalProgress::Pursuing
        })
    }

    fn end_episode(&mut self, episode: &Episode) -> Result<()> {
        let trajectory: Vec<Vec<f64>> = (0..=episode.len()).map(|i| episode.observation(i).to_vec()).collect();
        self.archive.update(&trajectory);
        if let Some(sizes) = &mut self.archive_sizes {
            sizes.push(self.archive.len());
        }
        Ok(())
    }

    fn reward_predicate(&self) -> &dyn GoalPredicate {
        &self.predicate
    }
}
