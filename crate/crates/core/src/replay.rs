//! Episode-structured replay with hindsight relabeling.
//!
//! Episodes are stored whole and evicted whole, oldest first. Each
//! transition remembers the goal it was collected under; sampling may
//! replace that goal with an observation achieved later in the same
//! episode (the "future" strategy) and recomputes the sparse reward.
//!
//! Dump format (one row per stored observation):
//!
//! ```text
//! # lge-replay v1 obs_dim=<n>
//! episode,step,obs_0,...,obs_<n-1>
//! ```

use std::collections::VecDeque;
use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Matrix;

pub const SUCCESS_REWARD: f64 = 0.0;
pub const FAILURE_REWARD: f64 = -1.0;

pub fn goal_reward(achieved: bool) -> f64 {
    if achieved {
        SUCCESS_REWARD
    } else {
        FAILURE_REWARD
    }
}

/// Goal achievement test on `(achieved observation, goal observation)`
/// pairs, one pair per row.
pub trait GoalPredicate {
    fn achieved_batch(&self, achieved: ArrayView2<'_, f64>, goals: ArrayView2<'_, f64>) -> Result<Vec<bool>>;

    fn achieved(&self, achieved: &[f64], goal: &[f64]) -> Result<bool> {
        let a =
            ArrayView2::from_shape((1, achieved.len()), achieved).map_err(|e| Error::InvalidInput(e.to_string()))?;
        let g = ArrayView2::from_shape((1, goal.len()), goal).map_err(|e| Error::InvalidInput(e.to_string()))?;
        Ok(self.achieved_batch(a, g)?[0])
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HerConfig {
    pub relabel_probability: f64,
}

impl Default for HerConfig {
    fn default() -> Self {
        Self {
            relabel_probability: 0.8,
        }
    }
}

impl HerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.relabel_probability) {
            return Err(Error::Config(format!(
                "HER relabel probability must lie in [0, 1], got {}",
                self.relabel_probability
            )));
        }
        Ok(())
    }
}

/// Position of a stored observation: episode id and step within it
/// (0 is the reset observation).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ObsRef {
    pub episode: u64,
    pub step: usize,
}

#[derive(Clone, Debug)]
pub struct Episode {
    id: u64,
    obs_dim: usize,
    act_dim: usize,
    observations: Vec<f64>,
    actions: Vec<f64>,
    goals: Vec<f64>,
    has_goal: Vec<bool>,
    dones: Vec<bool>,
    closed: bool,
}

impl Episode {
    pub fn id(&self) -> u64 {
        self.id
    }

    /// Number of transitions.
    pub fn len(&self) -> usize {
        self.dones.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dones.is_empty()
    }

    pub fn is_closed(&self) -> bool {
        self.closed
    }

    /// Observation `step`, where `step` ranges over `0..=len()`.
    pub fn observation(&self, step: usize) -> &[f64] {
        &self.observations[step * self.obs_dim..(step + 1) * self.obs_dim]
    }

    pub fn action(&self, t: usize) -> &[f64] {
        &self.actions[t * self.act_dim..(t + 1) * self.act_dim]
    }

    pub fn goal(&self, t: usize) -> Option<&[f64]> {
        self.has_goal[t].then(|| &self.goals[t * self.obs_dim..(t + 1) * self.obs_dim])
    }

    pub fn done(&self, t: usize) -> bool {
        self.dones[t]
    }
}

/// One environment transition as handed to [`ReplayBuffer::append`].
#[derive(Clone, Copy, Debug)]
pub struct TransitionIn<'a> {
    pub action: &'a [f64],
    pub next_obs: &'a [f64],
    /// Goal pursued while collecting; `None` during goal-free exploration.
    pub goal: Option<&'a [f64]>,
    /// Bootstrapping cut-off stored for the critic target.
    pub done: bool,
    /// Closes the episode.
    pub terminal: bool,
}

/// Where a sampled row came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SampleSource {
    pub episode: u64,
    pub t: usize,
    /// Step of the observation used as relabeled goal.
    pub relabeled_from: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct Batch {
    pub obs: Matrix,
    pub actions: Matrix,
    pub next_obs: Matrix,
    pub goals: Matrix,
    pub rewards: Vec<f64>,
    pub dones: Vec<f64>,
    pub sources: Vec<SampleSource>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }
}

/// Plain `(s, a, s')` minibatch for representation learning.
#[derive(Clone, Debug)]
pub struct TransitionBatch {
    pub obs: Matrix,
    pub actions: Matrix,
    pub next_obs: Matrix,
}

#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    obs_dim: usize,
    act_dim: usize,
    capacity: usize,
    episodes: VecDeque<Episode>,
    /// Absolute index of each episode's first transition.
    offsets: VecDeque<usize>,
    transitions: usize,
    next_id: u64,
    latents: Vec<f64>,
    latent_dim: usize,
    cache_fresh: bool,
}

impl ReplayBuffer {
    pub fn new(obs_dim: usize, act_dim: usize, capacity: usize) -> Result<Self> {
        if obs_dim == 0 || act_dim == 0 || capacity == 0 {
            return Err(Error::Replay("dimensions and capacity must be positive".into()));
        }
        Ok(Self {
            obs_dim,
            act_dim,
            capacity,
            episodes: VecDeque::new(),
            offsets: VecDeque::new(),
            transitions: 0,
            next_id: 0,
            latents: Vec::new(),
            latent_dim: 0,
            cache_fresh: true,
        })
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    pub fn act_dim(&self) -> usize {
        self.act_dim
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Stored transitions.
    pub fn len(&self) -> usize {
        self.transitions
    }

    pub fn is_empty(&self) -> bool {
        self.transitions == 0
    }

    pub fn num_episodes(&self) -> usize {
        self.episodes.len()
    }

    /// Stored observations, reset observations included.
    pub fn observation_count(&self) -> usize {
        self.transitions + self.episodes.len()
    }

    pub fn episodes(&self) -> impl Iterator<Item = &Episode> {
        self.episodes.iter()
    }

    pub fn episode(&self, id: u64) -> Option<&Episode> {
        let first = self.episodes.front()?.id;
        let idx = usize::try_from(id.checked_sub(first)?).ok()?;
        self.episodes.get(idx)
    }

    pub fn observation(&self, r: ObsRef) -> Option<&[f64]> {
        let ep = self.episode(r.episode)?;
        (r.step <= ep.len()).then(|| ep.observation(r.step))
    }

    pub fn current_episode(&self) -> Option<&Episode> {
        self.episodes.back().filter(|e| !e.closed)
    }

    /// Open a new episode with its reset observation.
    pub fn begin_episode(&mut self, initial_obs: &[f64]) -> Result<u64> {
        self.check_obs(initial_obs)?;
        if let Some(last) = self.episodes.back() {
            if !last.closed {
                if last.is_empty() {
                    self.episodes.pop_back();
                    self.offsets.pop_back();
                } else {
                    return Err(Error::Replay("previous episode is still open".into()));
                }
            }
        }
        let id = self.next_id;
        self.next_id += 1;
        self.episodes.push_back(Episode {
            id,
            obs_dim: self.obs_dim,
            act_dim: self.act_dim,
            observations: initial_obs.to_vec(),
            actions: Vec::new(),
            goals: Vec::new(),
            has_goal: Vec::new(),
            dones: Vec::new(),
            closed: false,
        });
        let front = self.offsets.front().copied().unwrap_or(0);
        self.offsets.push_back(front + self.transitions);
        self.cache_fresh = false;
        Ok(id)
    }

    pub fn append(&mut self, tr: TransitionIn<'_>) -> Result<()> {
        if tr.action.len() != self.act_dim {
            return Err(Error::DimensionMismatch {
                context: "stored action",
                expected: self.act_dim,
                got: tr.action.len(),
            });
        }
        self.check_obs(tr.next_obs)?;
        if let Some(g) = tr.goal {
            self.check_obs(g)?;
        }
        let obs_dim = self.obs_dim;
        let ep = self
            .episodes
            .back_mut()
            .filter(|e| !e.closed)
            .ok_or_else(|| Error::Replay("append without an open episode".into()))?;
        ep.observations.extend_from_slice(tr.next_obs);
        ep.actions.extend_from_slice(tr.action);
        match tr.goal {
            Some(g) => ep.goals.extend_from_slice(g),
            None => ep.goals.extend(std::iter::repeat_n(0.0, obs_dim)),
        }
        ep.has_goal.push(tr.goal.is_some());
        ep.dones.push(tr.done);
        ep.closed = tr.terminal;
        self.transitions += 1;
        self.cache_fresh = false;
        self.evict();
        Ok(())
    }

    /// Close the open episode without appending.
    pub fn close_episode(&mut self) {
        if let Some(ep) = self.episodes.back_mut() {
            ep.closed = true;
        }
    }

    fn evict(&mut self) {
        while self.transitions > self.capacity && self.episodes.len() > 1 {
            let ep = self.episodes.pop_front().expect("nonempty");
            self.offsets.pop_front();
            self.transitions -= ep.len();
        }
    }

    fn check_obs(&self, obs: &[f64]) -> Result<()> {
        if obs.len() != self.obs_dim {
            return Err(Error::DimensionMismatch {
                context: "stored observation",
                expected: self.obs_dim,
                got: obs.len(),
            });
        }
        Ok(())
    }

    fn locate(&self, u: usize) -> (usize, usize) {
        let abs = self.offsets[0] + u;
        let idx = self.offsets.partition_point(|&o| o <= abs) - 1;
        (idx, abs - self.offsets[idx])
    }

    fn sample_location<R: Rng + ?Sized>(&self, rng: &mut R) -> (usize, usize) {
        self.locate(rng.random_range(0..self.transitions))
    }

    /// Uniform minibatch over stored transitions with hindsight relabeling
    /// and rewards from `predicate`. Transitions stored without a goal are
    /// always relabeled.
    pub fn sample_batch<R: Rng + ?Sized>(
        &self,
        n: usize,
        her: HerConfig,
        predicate: &dyn GoalPredicate,
        rng: &mut R,
    ) -> Result<Batch> {
        her.validate()?;
        if self.is_empty() {
            return Err(Error::Replay("cannot sample from an empty buffer".into()));
        }
        let (od, ad) = (self.obs_dim, self.act_dim);
        let mut obs = Vec::with_capacity(n * od);
        let mut actions = Vec::with_capacity(n * ad);
        let mut next_obs = Vec::with_capacity(n * od);
        let mut goals = Vec::with_capacity(n * od);
        let mut dones = Vec::with_capacity(n);
        let mut sources = Vec::with_capacity(n);
        for _ in 0..n {
            let (ei, t) = self.sample_location(rng);
            let ep = &self.episodes[ei];
            obs.extend_from_slice(ep.observation(t));
            actions.extend_from_slice(ep.action(t));
            next_obs.extend_from_slice(ep.observation(t + 1));
            let relabel = !ep.has_goal[t] || rng.random_bool(her.relabel_probability);
            let relabeled_from = if relabel {
                let step = rng.random_range(t + 1..=ep.len());
                goals.extend_from_slice(ep.observation(step));
                Some(step)
            } else {
                goals.extend_from_slice(ep.goal(t).expect("stored goal"));
                None
            };
            dones.push(if ep.done(t) { 1.0 } else { 0.0 });
            sources.push(SampleSource {
                episode: ep.id,
                t,
                relabeled_from,
            });
        }
        let to_m = |v: Vec<f64>, w: usize| Array2::from_shape_vec((n, w), v).expect("batch shape");
        let next_obs = to_m(next_obs, od);
        let goals = to_m(goals, od);
        let rewards = predicate
            .achieved_batch(next_obs.view(), goals.view())?
            .into_iter()
            .map(goal_reward)
            .collect();
        Ok(Batch {
            obs: to_m(obs, od),
            actions: to_m(actions, ad),
            next_obs,
            goals,
            rewards,
            dones,
            sources,
        })
    }

    pub fn sample_transitions<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<TransitionBatch> {
        if self.is_empty() {
            return Err(Error::Replay("cannot sample from an empty buffer".into()));
        }
        let (od, ad) = (self.obs_dim, self.act_dim);
        let mut obs = Vec::with_capacity(n * od);
        let mut actions = Vec::with_capacity(n * ad);
        let mut next_obs = Vec::with_capacity(n * od);
        for _ in 0..n {
            let (ei, t) = self.sample_location(rng);
            let ep = &self.episodes[ei];
            obs.extend_from_slice(ep.observation(t));
            actions.extend_from_slice(ep.action(t));
            next_obs.extend_from_slice(ep.observation(t + 1));
        }
        Ok(TransitionBatch {
            obs: Array2::from_shape_vec((n, od), obs).expect("shape"),
            actions: Array2::from_shape_vec((n, ad), actions).expect("shape"),
            next_obs: Array2::from_shape_vec((n, od), next_obs).expect("shape"),
        })
    }

    /// Every stored observation in storage order, with its reference.
    pub fn all_observations(&self) -> (Matrix, Vec<ObsRef>) {
        let n = self.observation_count();
        let mut data = Vec::with_capacity(n * self.obs_dim);
        let mut refs = Vec::with_capacity(n);
        for ep in &self.episodes {
            data.extend_from_slice(&ep.observations);
            refs.extend((0..=ep.len()).map(|step| ObsRef { episode: ep.id, step }));
        }
        (Array2::from_shape_vec((n, self.obs_dim), data).expect("shape"), refs)
    }

    /// Replace the latent cache; rows follow [`Self::all_observations`].
    pub fn set_latents(&mut self, latents: Matrix) -> Result<()> {
        if latents.nrows() != self.observation_count() {
            return Err(Error::DimensionMismatch {
                context: "latent cache rows",
                expected: self.observation_count(),
                got: latents.nrows(),
            });
        }
        self.latent_dim = latents.ncols();
        self.latents = latents.as_standard_layout().iter().copied().collect();
        self.cache_fresh = true;
        Ok(())
    }

    pub fn latent_cache_is_fresh(&self) -> bool {
        self.cache_fresh
    }

    /// Cached latents, if fresh.
    pub fn latents(&self) -> Option<ArrayView2<'_, f64>> {
        if !self.cache_fresh || self.latent_dim == 0 {
            return None;
        }
        ArrayView2::from_shape((self.latents.len() / self.latent_dim, self.latent_dim), &self.latents).ok()
    }

    pub fn dump_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# lge-replay v1 obs_dim={}", self.obs_dim);
        let cols: Vec<String> = (0..self.obs_dim).map(|i| format!("obs_{i}")).collect();
        let _ = writeln!(s, "episode,step,{}", cols.join(","));
        for ep in &self.episodes {
            for step in 0..=ep.len() {
                let vals: Vec<String> = ep.observation(step).iter().map(|v| format!("{v:?}")).collect();
                let _ = writeln!(s, "{},{},{}", ep.id, step, vals.join(","));
            }
        }
        s
    }

    pub fn dump(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.dump_text()).map_err(|e| Error::io(path, e))
    }
}
