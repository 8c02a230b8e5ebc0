//! Latent Go-Explore.
//!
//! Each episode samples a final goal among stored observations, favouring
//! low latent density, and follows the trajectory that first reached it,
//! thinned so consecutive subgoals are more than `d` apart in latent
//! space. After the final goal is reached the agent explores at random.
//! The encoder is retrained periodically and the density recomputed from
//! the refreshed latents.

use ndarray::{ArrayView1, ArrayView2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::density::{knn_log_density, DensityTable, GoalSampler};
use crate::error::{Error, Result};
use crate::latent::{Encoder, LatentModel};
use crate::replay::{Episode, GoalPredicate, ObsRef};
use crate::rollout::{GoalProgress, GoalSource, Learner, Trace, TraceEvent};
use crate::tensor::Matrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LgeConfig {
    pub latent_distance_threshold: f64,
    pub geometric_parameter: f64,
    /// Environment steps between density recomputations.
    pub density_update_frequency: u64,
    pub no_post_exploration: bool,
    pub uniform_goal_sampling: bool,
    pub no_subgoal_reduction: bool,
    /// Allow several subgoals to be passed in a single step.
    pub skip_ahead: bool,
}

impl Default for LgeConfig {
    fn default() -> Self {
        Self {
            latent_distance_threshold: 1.0,
            geometric_parameter: 0.05,
            density_update_frequency: 5000,
            no_post_exploration: false,
            uniform_goal_sampling: false,
            no_subgoal_reduction: false,
            skip_ahead: false,
        }
    }
}

impl LgeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.latent_distance_threshold > 0.0) || !self.latent_distance_threshold.is_finite() {
            return Err(Error::Config(format!(
                "latent distance threshold must be positive, got {}",
                self.latent_distance_threshold
            )));
        }
        if self.density_update_frequency == 0 {
            return Err(Error::Config("density update frequency must be positive".into()));
        }
        GoalSampler::new(self.geometric_parameter).map(|_| ())
    }
}

fn latent_distance(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Indices kept by the backward-greedy thinning: start from the last
/// point and keep a point whenever it lies more than `d` from the most
/// recently kept one. Returned in chronological order.
pub fn reduce_indices(latents: ArrayView2<'_, f64>, d: f64) -> Vec<usize> {
    let n = latents.nrows();
    if n == 0 {
        return Vec::new();
    }
    let mut kept = vec![n - 1];
    let mut last = n - 1;
    for i in (0..n - 1).rev() {
        if latent_distance(latents.row(i), latents.row(last)) > d {
            kept.push(i);
            last = i;
        }
    }
    kept.reverse();
    kept
}

#[derive(Clone, Debug, PartialEq)]
pub struct SubgoalPlan {
    /// Goal observations, one per row.
    pub goals: Matrix,
    pub latents: Matrix,
    /// Prefix rows the goals were taken from.
    pub steps: Vec<usize>,
    pub current: usize,
    pub source: ObsRef,
    pub encoder_version: u64,
}

impl SubgoalPlan {
    pub fn len(&self) -> usize {
        self.goals.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.goals.nrows() == 0
    }

    pub fn is_complete(&self) -> bool {
        self.current >= self.len()
    }

    /// Advance past subgoals within latent distance `d` of `z`: at most
    /// one unless `skip_ahead`. Returns the indices reached.
    pub fn advance(&mut self, z: &[f64], d: f64, skip_ahead: bool) -> Vec<usize> {
        let z = ArrayView1::from(z);
        let mut reached = Vec::new();
        while !self.is_complete() && latent_distance(z, self.latents.row(self.current)) < d {
            reached.push(self.current);
            self.current += 1;
            if !skip_ahead {
                break;
            }
        }
        reached
    }
}

/// Plan towards the observation `source` from the states that led to it.
/// `prefix_obs` and `prefix_latents` end with the goal state.
pub fn build_subgoal_plan(
    prefix_obs: ArrayView2<'_, f64>,
    prefix_latents: ArrayView2<'_, f64>,
    source: ObsRef,
    d: f64,
    reduce: bool,
    encoder_version: u64,
) -> Result<SubgoalPlan> {
    let n = prefix_obs.nrows();
    if n == 0 || prefix_latents.nrows() != n {
        return Err(Error::InvalidInput(format!(
            "plan prefix has {n} observations and {} latents",
            prefix_latents.nrows()
        )));
    }
    let steps: Vec<usize> = if reduce {
        reduce_indices(prefix_latents, d)
    } else {
        (0..n).collect()
    };
    Ok(SubgoalPlan {
        goals: prefix_obs.select(ndarray::Axis(0), &steps),
        latents: prefix_latents.select(ndarray::Axis(0), &steps),
        steps,
        current: 0,
        source,
        encoder_version,
    })
}

/// Achievement test `||phi(achieved) - phi(goal)|| < d`.
#[derive(Clone, Debug)]
pub struct LatentReach {
    pub encoder: Encoder,
    pub threshold: f64,
}

impl GoalPredicate for LatentReach {
    fn achieved_batch(&self, achieved: ArrayView2<'_, f64>, goals: ArrayView2<'_, f64>) -> Result<Vec<bool>> {
        let za = self.encoder.embed_batch(achieved)?;
        let zg = self.encoder.embed_batch(goals)?;
        Ok(za
            .rows()
            .into_iter()
            .zip(zg.rows())
            .map(|(a, g)| latent_distance(a, g) < self.threshold)
            .collect())
    }
}

/// Latents and density of the buffer at one point in time.
#[derive(Clone, Debug)]
pub struct DensitySnapshot {
    pub refs: Vec<ObsRef>,
    pub latents: Matrix,
    pub table: DensityTable,
    pub encoder_version: u64,
}

impl DensitySnapshot {
    /// Rows of `episode` steps `0..=step` within the snapshot.
    fn prefix_rows(&self, r: ObsRef) -> Option<std::ops::Range<usize>> {
        let start = self
            .refs
            .binary_search(&ObsRef {
                episode: r.episode,
                step: 0,
            })
            .ok()?;
        let end = start + r.step + 1;
        (end <= self.refs.len() && self.refs[end - 1] == r).then_some(start..end)
    }
}

pub struct LgeSource {
    config: LgeConfig,
    model: LatentModel,
    reach: LatentReach,
    sampler: GoalSampler,
    snapshot: Option<DensitySnapshot>,
    plan: Option<SubgoalPlan>,
    encoder_version: u64,
    goal_rng: ChaCha8Rng,
    encoder_rng: ChaCha8Rng,
    /// Every plan emitted, when enabled.
    pub plan_log: Option<Vec<SubgoalPlan>>,
}

impl LgeSource {
    pub fn new(config: LgeConfig, model: LatentModel, goal_rng: ChaCha8Rng, encoder_rng: ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let reach = LatentReach {
            encoder: model.encoder().clone(),
            threshold: config.latent_distance_threshold,
        };
        Ok(Self {
            sampler: GoalSampler::new(config.geometric_parameter)?,
            config,
            model,
            reach,
            snapshot: None,
            plan: None,
            encoder_version: 0,
            goal_rng,
            encoder_rng,
            plan_log: None,
        })
    }

    pub fn model(&self) -> &LatentModel {
        &self.model
    }

    pub fn snapshot(&self) -> Option<&DensitySnapshot> {
        self.snapshot.as_ref()
    }

    pub fn plan(&self) -> Option<&SubgoalPlan> {
        self.plan.as_ref()
    }

    /// Refresh the latent cache and recompute the density table.
    pub fn recompute_density(&mut self, learner: &mut Learner, t: u64, trace: &mut Trace) -> Result<()> {
        self.model.refresh_cache(&mut learner.buffer)?;
        let latents = learner.buffer.latents().expect("fresh cache").to_owned();
        if latents.nrows() < 2 {
            return Ok(());
        }
        let (_, refs) = learner.buffer.all_observations();
        let table = knn_log_density(latents.view())?;
        trace.push(TraceEvent::DensityRecomputed { t, points: refs.len() });
        self.snapshot = Some(DensitySnapshot {
            refs,
            latents,
            table,
            encoder_version: self.encoder_version,
        });
        Ok(())
    }

    fn train_encoder(&mut self, learner: &mut Learner, t: u64, trace: &mut Trace) -> Result<()> {
        if learner.buffer.len() >= self.model.config().batch_size {
            let loss = self.model.train_round(&learner.buffer, &mut self.encoder_rng)?;
            self.encoder_version += 1;
            self.reach.encoder = self.model.encoder().clone();
            trace.push(TraceEvent::EncoderRound { t, loss });
        }
        self.recompute_density(learner, t, trace)
    }

    fn sample_source(&mut self, t: u64, trace: &mut Trace) -> Option<(usize, ObsRef)> {
        let snap = self.snapshot.as_ref()?;
        let n = snap.refs.len();
        let (idx, rank) = if self.config.uniform_goal_sampling {
            (self.goal_rng.random_range(0..n), None)
        } else {
            let idx = self.sampler.sample(&snap.table, &mut self.goal_rng);
            (idx, Some(snap.table.rank[idx]))
        };
        trace.push(TraceEvent::GoalSampled {
            t,
            uniform: self.config.uniform_goal_sampling,
            rank,
        });
        Some((idx, snap.refs[idx]))
    }

    fn reembed_plan(&mut self) -> Result<()> {
        if let Some(plan) = &mut self.plan {
            if plan.encoder_version != self.encoder_version {
                plan.latents = self.model.encoder().embed_batch(plan.goals.view())?;
                plan.encoder_version = self.encoder_version;
            }
        }
        Ok(())
    }
}

impl GoalSource for LgeSource {
    fn begin_episode(&mut self, learner: &mut Learner, t: u64, trace: &mut Trace) -> Result<bool> {
        self.plan = None;
        if self.snapshot.is_none() && !learner.buffer.is_empty() {
            self.recompute_density(learner, t, trace)?;
        }
        // Goals whose episode has been evicted are redrawn.
        for _ in 0..100 {
            let Some((_, source)) = self.sample_source(t, trace) else {
                return Ok(false);
            };
            if learner.buffer.episode(source.episode).is_none() {
                continue;
            }
            let snap = self.snapshot.as_ref().expect("sampled from snapshot");
            let rows = snap.prefix_rows(source).ok_or_else(|| {
                Error::InvalidInput(format!("goal {source:?} has no intact prefix in the density snapshot"))
            })?;
            // Reached states only: the reset state is left out unless it is
            // the goal itself.
            let first = usize::from(source.step > 0);
            let rows = rows.start + first..rows.end;
            let ep = learner.buffer.episode(source.episode).expect("checked");
            let prefix = ndarray::Array2::from_shape_fn((rows.len(), learner.buffer.obs_dim()), |(i, j)| {
                ep.observation(i + first)[j]
            });
            let latents = snap.latents.slice(ndarray::s![rows, ..]);
            let plan = build_subgoal_plan(
                prefix.view(),
                latents,
                source,
                self.config.latent_distance_threshold,
                !self.config.no_subgoal_reduction,
                snap.encoder_version,
            )?;
            trace.push(TraceEvent::PlanBuilt {
                t,
                prefix_len: prefix.nrows(),
                plan_len: plan.len(),
                reduced: !self.config.no_subgoal_reduction,
            });
            if let Some(log) = &mut self.plan_log {
                log.push(plan.clone());
            }
            self.plan = Some(plan);
            self.reembed_plan()?;
            return Ok(true);
        }
        Ok(false)
    }

    fn current_goal(&self) -> &[f64] {
        let plan = self.plan.as_ref().expect("goal phase has a plan");
        let i = plan.current.min(plan.len() - 1);
        plan.goals.row(i).to_slice().expect("standard layout")
    }

    fn final_goal(&self) -> &[f64] {
        let plan = self.plan.as_ref().expect("goal phase has a plan");
        plan.goals.row(plan.len() - 1).to_slice().expect("standard layout")
    }

    fn observe(&mut self, next_obs: &[f64], t: u64, trace: &mut Trace) -> Result<GoalProgress> {
        self.reembed_plan()?;
        let z = self.model.embed(next_obs)?;
        let plan = self.plan.as_mut().expect("goal phase has a plan");
        for index in plan.advance(&z, self.config.latent_distance_threshold, self.config.skip_ahead) {
            trace.push(TraceEvent::SubgoalReached { t, index });
        }
        Ok(if plan.is_complete() {
            GoalProgress::Complete
        } else {
            GoalProgress::Pursuing
        })
    }

    fn after_step(&mut self, learner: &mut Learner, t: u64, trace: &mut Trace) -> Result<()> {
        if t.is_multiple_of(self.model.config().train_frequency) {
            self.train_encoder(learner, t, trace)?;
        } else if t.is_multiple_of(self.config.density_update_frequency) {
            self.recompute_density(learner, t, trace)?;
        }
        Ok(())
    }

    fn end_episode(&mut self, _episode: &Episode) -> Result<()> {
        Ok(())
    }

    fn reward_predicate(&self) -> &dyn GoalPredicate {
        &self.reach
    }
}
