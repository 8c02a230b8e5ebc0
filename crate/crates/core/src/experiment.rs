//! Run configuration and single-run dispatch.
//!
//! A [`RunConfig`] is read from TOML. Section and key names follow the
//! hyperparameter names of the method (`latent_distance_threshold`,
//! `geometric_parameter`, `polyak_update_coefficient`, ...). The config
//! hash covers every knob except the seed, plus the maze geometry, so runs
//! that differ only in seed share a hash.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::agent::{AgentConfig, Sac};
use crate::envsim::{EnvConfig, Environment, Maze};
use crate::error::{Error, Result};
use crate::goexplore::{GoExploreConfig, GoExploreSource};
use crate::latent::{EncoderConfig, LatentModel};
use crate::lge::{LgeConfig, LgeSource, SubgoalPlan};
use crate::metrics::{CoverageGrid, CoverageRecorder, RunLog};
use crate::replay::ReplayBuffer;
use crate::rollout::{run_loop, run_random, ExplorationConfig, Learner, LoopConfig, Trace};
use crate::seeding::{stream_rng, Stream};
use crate::tensor::Checkpoint;

/// Cell size of the coverage metric grid.
pub const METRIC_CELL_SIZE: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Lge,
    Goexplore,
    Random,
}

impl Algorithm {
    pub fn name(self) -> &'static str {
        match self {
            Self::Lge => "lge",
            Self::Goexplore => "goexplore",
            Self::Random => "random",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "lge" => Ok(Self::Lge),
            "goexplore" | "go-explore" => Ok(Self::Goexplore),
            "random" => Ok(Self::Random),
            _ => Err(Error::Config(format!("unknown algorithm '{s}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub algorithm: Algorithm,
    pub seed: u64,
    pub total_steps: u64,
    /// Overrides the label written to the run log.
    pub label: Option<String>,
    pub replay_capacity: usize,
    pub agent: AgentConfig,
    pub encoder: EncoderConfig,
    pub lge: LgeConfig,
    pub exploration: ExplorationConfig,
    pub goexplore: GoExploreConfig,
}

/// Target entropy used for maze runs. A positive target is unreachable for
/// a tanh-squashed 2-D action (its entropy is at most `2 ln 2`), which
/// drives the temperature up without bound.
pub const MAZE_TARGET_ENTROPY: f64 = -2.0;

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::Lge,
            seed: 0,
            total_steps: 100_000,
            label: None,
            replay_capacity: 1_000_000,
            agent: AgentConfig {
                target_entropy: MAZE_TARGET_ENTROPY,
                ..AgentConfig::default()
            },
            encoder: EncoderConfig::default(),
            lge: LgeConfig::default(),
            exploration: ExplorationConfig::default(),
            goexplore: GoExploreConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn new(algorithm: Algorithm) -> Self {
        Self {
            algorithm,
            ..Self::default()
        }
    }

    /// Smaller agent networks and batches so that a 100k-step run takes a
    /// minute or two on one core. All other knobs keep their defaults.
    pub fn desk(algorithm: Algorithm) -> Self {
        let mut cfg = Self::new(algorithm);
        cfg.agent.networks = vec![64, 64];
        cfg.agent.batch_size = 64;
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        if self.replay_capacity == 0 {
            return Err(Error::Config("replay capacity must be positive".into()));
        }
        self.exploration.validate()?;
        match self.algorithm {
            Algorithm::Lge => {
                self.agent.validate()?;
                self.encoder.validate()?;
                self.lge.validate()
            }
            Algorithm::Goexplore => {
                self.agent.validate()?;
                self.goexplore.validate()
            }
            Algorithm::Random => Ok(()),
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Name under which the run is logged and aggregated.
    pub fn label(&self) -> String {
        if let Some(l) = &self.label {
            return l.clone();
        }
        match self.algorithm {
            Algorithm::Lge => {
                let mut s = String::from("lge");
                if self.lge.no_post_exploration {
                    s.push_str("-no-post-exploration");
                }
                if self.lge.uniform_goal_sampling {
                    s.push_str("-uniform-goal-sampling");
                }
                if self.lge.no_subgoal_reduction {
                    s.push_str("-no-subgoal-reduction");
                }
                s
            }
            Algorithm::Goexplore => format!("goexplore-cell-{}", self.goexplore.cell_size),
            Algorithm::Random => "random".into(),
        }
    }

    /// Hex digest of the seed-free config and the maze.
    pub fn config_hash(&self, maze: &EnvConfig) -> String {
        let canonical = Self {
            seed: 0,
            ..self.clone()
        };
        let mut h = Sha256::new();
        h.update(canonical.to_toml().as_bytes());
        h.update(b"\n--\n");
        h.update(maze.to_text().as_bytes());
        h.finalize()[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub trace: bool,
    /// Keep every subgoal plan built by LGE.
    pub record_plans: bool,
}

pub struct RunOutput {
    pub log: RunLog,
    pub trace: Trace,
    /// Agent and encoder parameters at the end of the run.
    pub checkpoint: Option<Checkpoint>,
    pub buffer: Option<ReplayBuffer>,
    pub plans: Vec<SubgoalPlan>,
    /// Go-Explore archive size after each episode.
    pub archive_sizes: Vec<usize>,
}

/// Execute one run. Every random component draws from its own stream of
/// the run seed.
pub fn run(cfg: &RunConfig, maze: &EnvConfig, opts: &RunOptions) -> Result<RunOutput> {
    cfg.validate()?;
    let grid = CoverageGrid::new(maze, METRIC_CELL_SIZE)?;
    let log = RunLog::new(
        cfg.label(),
        cfg.seed,
        cfg.config_hash(maze),
        cfg.total_steps,
        grid.reachable_total(),
    );
    let mut recorder = CoverageRecorder::new(grid, log);
    let mut env = Maze::new(maze.clone())?;
    let mut trace = Trace {
        enabled: opts.trace,
        events: Vec::new(),
    };
    let seed = cfg.seed;
    let loop_cfg = LoopConfig {
        total_steps: cfg.total_steps,
        exploration: cfg.exploration.clone(),
        no_post_exploration: cfg.lge.no_post_exploration && cfg.algorithm == Algorithm::Lge,
    };
    let (obs_dim, act_dim) = (env.obs_dim(), env.action_dim());
    let learner = |agent_cfg: &AgentConfig| -> Result<Learner> {
        let agent = Sac::new(
            agent_cfg.clone(),
            obs_dim,
            act_dim,
            &mut stream_rng(seed, Stream::AgentInit),
        )?;
        Learner::new(
            agent,
            ReplayBuffer::new(obs_dim, act_dim, cfg.replay_capacity)?,
            stream_rng(seed, Stream::AgentSampling),
            stream_rng(seed, Stream::Replay),
        )
    };
    let mut explore_rng = stream_rng(seed, Stream::Exploration);
    let mut out = RunOutput {
        log: RunLog::new("", 0, "", 0, 0),
        trace: Trace::default(),
        checkpoint: None,
        buffer: None,
        plans: Vec::new(),
        archive_sizes: Vec::new(),
    };
    match cfg.algorithm {
        Algorithm::Random => run_random(&mut env, &mut recorder, &mut explore_rng, cfg.total_steps)?,
        Algorithm::Lge => {
            let mut learner = learner(&cfg.agent)?;
            let model = LatentModel::new(
                cfg.encoder.clone(),
                obs_dim,
                act_dim,
                &mut stream_rng(seed, Stream::EncoderInit),
            )?;
            let mut source = LgeSource::new(
                cfg.lge.clone(),
                model,
                stream_rng(seed, Stream::GoalSampling),
                stream_rng(seed, Stream::EncoderTraining),
            )?;
            if opts.record_plans {
                source.plan_log = Some(Vec::new());
            }
            run_loop(
                &mut env,
                &mut source,
                &mut learner,
                &mut recorder,
                &mut explore_rng,
                &loop_cfg,
                &mut trace,
            )?;
            let mut ck = learner.agent.to_checkpoint();
            ck.nets.extend(source.model().to_checkpoint().nets);
            out.checkpoint = Some(ck);
            out.plans = source.plan_log.take().unwrap_or_default();
            out.buffer = Some(learner.buffer);
        }
        Algorithm::Goexplore => {
            let mut learner = learner(&cfg.agent)?;
            let mut source = GoExploreSource::new(&cfg.goexplore, stream_rng(seed, Stream::GoalSampling))?;
            source.archive_sizes = Some(Vec::new());
            run_loop(
                &mut env,
                &mut source,
                &mut learner,
                &mut recorder,
                &mut explore_rng,
                &loop_cfg,
                &mut trace,
            )?;
            out.checkpoint = Some(learner.agent.to_checkpoint());
            out.archive_sizes = source.archive_sizes.take().unwrap_or_default();
            out.buffer = Some(learner.buffer);
        }
    }
    out.log = recorder.log;
    out.trace = trace;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip_and_partial_sections() {
        let cfg = RunConfig::desk(Algorithm::Goexplore);
        assert_eq!(RunConfig::parse(&cfg.to_toml()).unwrap(), cfg);
        let partial = RunConfig::parse("algorithm = \"lge\"\n[agent]\nbatch_size = 32\n").unwrap();
        assert_eq!(partial.agent.batch_size, 32);
        assert_eq!(partial.agent.networks, vec![300, 400]);
        assert!(RunConfig::parse("[agent]\nbogus = 1\n").is_err());
        assert!(RunConfig::parse("[lge]\nlatent_distance_threshold = -1.0\n").is_err());
    }

    #[test]
    fn hash_ignores_seed_only() {
        let maze = EnvConfig::default_maze();
        let a = RunConfig::new(Algorithm::Lge);
        let b = RunConfig { seed: 7, ..a.clone() };
        assert_eq!(a.config_hash(&maze), b.config_hash(&maze));
        assert_eq!(a.config_hash(&maze).len(), 16);
        let mut c = a.clone();
        c.lge.geometric_parameter = 0.01;
        assert_ne!(a.config_hash(&maze), c.config_hash(&maze));
        assert_ne!(a.config_hash(&maze), a.config_hash(&EnvConfig::open_arena(6.0)));
    }

    #[test]
    fn labels_name_ablations() {
        let mut cfg = RunConfig::new(Algorithm::Lge);
        assert_eq!(cfg.label(), "lge");
        cfg.lge.uniform_goal_sampling = true;
        assert_eq!(cfg.label(), "lge-uniform-goal-sampling");
        assert_eq!(RunConfig::new(Algorithm::Goexplore).label(), "goexplore-cell-2");
    }

    #[test]
    fn zero_steps_gives_empty_log() {
        let mut cfg = RunConfig::desk(Algorithm::Lge);
        cfg.total_steps = 0;
        let out = run(&cfg, &EnvConfig::default_maze(), &RunOptions::default()).unwrap();
        assert!(out.log.records.is_empty());
        let fresh = Sac::new(cfg.agent.clone(), 2, 2, &mut stream_rng(0, Stream::AgentInit)).unwrap();
        let ck = out.checkpoint.unwrap();
        assert_eq!(ck.net("actor").unwrap(), fresh.actor());
    }
}
