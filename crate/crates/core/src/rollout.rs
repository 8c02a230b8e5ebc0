//! Episode loop shared by the return-then-explore algorithms.
//!
//! An episode is: reset, a goal phase in which the agent pursues a sequence
//! of subgoals, then (after reaching the last one) a short random
//! exploration phase. When the algorithm has no goal to offer, the whole
//! episode budget goes to exploration. Every environment step is stored,
//! logged for coverage and may trigger an agent update.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agent::Sac;
use crate::envsim::Environment;
use crate::error::{Error, Result};
use crate::metrics::CoverageRecorder;
use crate::replay::{Episode, GoalPredicate, HerConfig, ReplayBuffer, TransitionIn};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExplorationConfig {
    /// Random steps after the final goal is reached.
    pub post_exploration_steps: usize,
    pub repeat_action_probability: f64,
}

impl Default for ExplorationConfig {
    fn default() -> Self {
        Self {
            post_exploration_steps: 50,
            repeat_action_probability: 0.9,
        }
    }
}

impl ExplorationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.repeat_action_probability) {
            return Err(Error::Config(format!(
                "repeat action probability must lie in [0, 1], got {}",
                self.repeat_action_probability
            )));
        }
        Ok(())
    }
}

/// Uniform random actions that repeat the previous one with a fixed
/// probability.
#[derive(Clone, Debug)]
pub struct Explorer {
    repeat_probability: f64,
    bound: f64,
    dim: usize,
    previous: Option<Vec<f64>>,
    pub draws: u64,
    pub repeats: u64,
}

impl Explorer {
    pub fn new(dim: usize, bound: f64, repeat_probability: f64) -> Self {
        Self {
            repeat_probability,
            bound,
            dim,
            previous: None,
            draws: 0,
            repeats: 0,
        }
    }

    /// Forget the previous action; the next draw is fresh.
    pub fn reset(&mut self) {
        self.previous = None;
    }

    pub fn action<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Vec<f64> {
        self.draws += 1;
        if let Some(prev) = &self.previous {
            if rng.random_bool(self.repeat_probability) {
                self.repeats += 1;
                return prev.clone();
            }
        }
        let a: Vec<f64> = (0..self.dim)
            .map(|_| rng.random_range(-self.bound..=self.bound))
            .collect();
        self.previous = Some(a.clone());
        a
    }
}

/// Trace of notable events, recorded when enabled.
#[derive(Clone, Debug, PartialEq)]
pub enum TraceEvent {
    EpisodeStart {
        t: u64,
    },
    /// No goal available: the episode is spent exploring.
    ColdStart {
        t: u64,
    },
    GoalSampled {
        t: u64,
        uniform: bool,
        rank: Option<usize>,
    },
    PlanBuilt {
        t: u64,
        prefix_len: usize,
        plan_len: usize,
        reduced: bool,
    },
    SubgoalReached {
        t: u64,
        index: usize,
    },
    GoalPhaseEnd {
        t: u64,
        success: bool,
    },
    ExploreStep {
        t: u64,
    },
    EncoderRound {
        t: u64,
        loss: f64,
    },
    DensityRecomputed {
        t: u64,
        points: usize,
    },
    CellSelected {
        t: u64,
        subgoals: usize,
    },
}

#[derive(Clone, Debug, Default)]
pub struct Trace {
    pub enabled: bool,
    pub events: Vec<TraceEvent>,
}

impl Trace {
    pub fn push(&mut self, e: TraceEvent) {
        if self.enabled {
            self.events.push(e);
        }
    }
}

/// Agent, replay and the update schedule.
pub struct Learner {
    pub agent: Sac,
    pub buffer: ReplayBuffer,
    pub agent_rng: ChaCha8Rng,
    pub replay_rng: ChaCha8Rng,
    her: HerConfig,
}

impl Learner {
    pub fn new(agent: Sac, buffer: ReplayBuffer, agent_rng: ChaCha8Rng, replay_rng: ChaCha8Rng) -> Result<Self> {
        let her = HerConfig {
            relabel_probability: agent.config().her_sampling_probability,
        };
        her.validate()?;
        Ok(Self {
            agent,
            buffer,
            agent_rng,
            replay_rng,
            her,
        })
    }

    /// Agent updates due after environment step `t` (1-based).
    pub fn after_step(&mut self, t: u64, predicate: &dyn GoalPredicate) -> Result<()> {
        let cfg = self.agent.config();
        if t < cfg.learning_starts || !t.is_multiple_of(cfg.train_frequency) || self.buffer.is_empty() {
            return Ok(());
        }
        let (n, steps) = (cfg.batch_size, cfg.gradient_steps);
        for _ in 0..steps {
            let batch = self.buffer.sample_batch(n, self.her, predicate, &mut self.replay_rng)?;
            self.agent.update(&batch, &mut self.agent_rng)?;
        }
        Ok(())
    }
}

/// Progress of the subgoal sequence after one step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GoalProgress {
    Pursuing,
    /// The last subgoal has been reached.
    Complete,
}

/// Algorithm-specific pieces of the episode loop.
pub trait GoalSource {
    /// Prepare the goal sequence for a new episode. `false` means no goal
    /// is available and the episode is spent exploring.
    fn begin_episode(&mut self, learner: &mut Learner, t: u64, trace: &mut Trace) -> Result<bool>;

    /// Observation the agent is currently conditioned on.
    fn current_goal(&self) -> &[f64];

    /// Goal attached to exploration-phase transitions.
    fn final_goal(&self) -> &[f64];

    /// Update subgoal progress after observing `next_obs`.
    fn observe(&mut self, next_obs: &[f64], t: u64, trace: &mut Trace) -> Result<GoalProgress>;

    /// Hook run after each environment step and agent update.
    fn after_step(&mut self, _learner: &mut Learner, _t: u64, _trace: &mut Trace) -> Result<()> {
        Ok(())
    }

    fn end_episode(&mut self, _episode: &Episode) -> Result<()> {
        Ok(())
    }

    fn reward_predicate(&self) -> &dyn GoalPredicate;
}

pub struct LoopConfig {
    pub total_steps: u64,
    pub exploration: ExplorationConfig,
    /// Skip the exploration phase after success and reset at once.
    pub no_post_exploration: bool,
}

/// Bookkeeping for one environment step.
struct Stepper<'a, E: Environment> {
    env: &'a mut E,
    recorder: &'a mut CoverageRecorder,
    t: u64,
    total: u64,
}

impl<E: Environment> Stepper<'_, E> {
    fn out_of_budget(&self) -> bool {
        self.t >= self.total
    }

    fn step(&mut self, action: &[f64]) -> Result<(Vec<f64>, bool)> {
        let r = self.env.step(action)?;
        self.t += 1;
        self.recorder.record(&r.observation, self.t)?;
        Ok((r.observation, r.terminal))
    }
}

/// Run the episode loop for `cfg.total_steps` environment steps.
pub fn run_loop<E: Environment, G: GoalSource>(
    env: &mut E,
    source: &mut G,
    learner: &mut Learner,
    recorder: &mut CoverageRecorder,
    explore_rng: &mut ChaCha8Rng,
    cfg: &LoopConfig,
    trace: &mut Trace,
) -> Result<()> {
    cfg.exploration.validate()?;
    let mut explorer = Explorer::new(env.action_dim(), 1.0, cfg.exploration.repeat_action_probability);
    let mut st = Stepper {
        env,
        recorder,
        t: 0,
        total: cfg.total_steps,
    };
    while !st.out_of_budget() {
        let mut obs = st.env.reset();
        st.recorder.grid.visit(&obs);
        learner.buffer.begin_episode(&obs)?;
        trace.push(TraceEvent::EpisodeStart { t: st.t });
        let has_goal = source.begin_episode(learner, st.t, trace)?;
        let mut terminal = false;
        let mut explore = true;
        if has_goal {
            let mut success = false;
            while !terminal && !st.out_of_budget() {
                let goal = source.current_goal().to_vec();
                let action = learner.agent.act(&obs, &goal, false, &mut learner.agent_rng)?;
                let (next, term) = st.step(&action)?;
                let progress = source.observe(&next, st.t, trace)?;
                success = progress == GoalProgress::Complete;
                let ends_here = success && cfg.no_post_exploration;
                learner.buffer.append(TransitionIn {
                    action: &action,
                    next_obs: &next,
                    goal: Some(&goal),
                    done: ends_here,
                    terminal: term || ends_here,
                })?;
                terminal = term || ends_here;
                obs = next;
                learner.after_step(st.t, source.reward_predicate())?;
                source.after_step(learner, st.t, trace)?;
                if success {
                    break;
                }
            }
            trace.push(TraceEvent::GoalPhaseEnd { t: st.t, success });
            explore = success && !cfg.no_post_exploration;
        } else {
            trace.push(TraceEvent::ColdStart { t: st.t });
        }
        if explore {
            explorer.reset();
            let goal = has_goal.then(|| source.final_goal().to_vec());
            let budget = cfg.exploration.post_exploration_steps;
            let mut k = 0;
            while k < budget && !terminal && !st.out_of_budget() {
                let action = explorer.action(explore_rng);
                let (next, term) = st.step(&action)?;
                k += 1;
                let last = k == budget || term;
                learner.buffer.append(TransitionIn {
                    action: &action,
                    next_obs: &next,
                    goal: goal.as_deref(),
                    done: last,
                    terminal: last,
                })?;
                terminal = last;
                trace.push(TraceEvent::ExploreStep { t: st.t });
                learner.after_step(st.t, source.reward_predicate())?;
                source.after_step(learner, st.t, trace)?;
            }
        }
        learner.buffer.close_episode();
        if let Some(ep) = learner.buffer.episodes().last() {
            source.end_episode(ep)?;
        }
    }
    Ok(())
}

/// Uniform random actions with periodic resets; no learning.
pub fn run_random<E: Environment>(
    env: &mut E,
    recorder: &mut CoverageRecorder,
    rng: &mut ChaCha8Rng,
    total_steps: u64,
) -> Result<()> {
    let dim = env.action_dim();
    let mut t = 0;
    let obs = env.reset();
    recorder.grid.visit(&obs);
    while t < total_steps {
        let a: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..=1.0)).collect();
        let r = env.step(&a)?;
        t += 1;
        recorder.record(&r.observation, t)?;
        if r.terminal {
            let obs = env.reset();
            recorder.grid.visit(&obs);
        }
    }
    Ok(())
}
