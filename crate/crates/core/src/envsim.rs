//! Continuous 2-D maze and the environment contract the explorers consume.
//!
//! The agent observes its own coordinates and moves by a clipped 2-D
//! displacement each step. A move whose straight path touches a wall is
//! rejected whole (the agent stays put); a move past the outer boundary is
//! clamped onto it.
//!
//! Maze files are line oriented:
//!
//! ```text
//! # comment
//! bounds 6.0                 # half-width of the square arena
//! start 0.0 0.0
//! max_episode_steps 100      # optional, default 100
//! action_clip 1.0            # optional, default 1.0
//! wall -2.0 -2.0 2.0 -2.0    # one axis-aligned segment x1 y1 x2 y2
//! ```

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Half-thickness given to every wall in the collision test.
pub const WALL_THICKNESS: f64 = 1e-9;

const DEFAULT_MAZE: &str = include_str!("../mazes/default.maze");

/// Interface every explorer in this crate drives.
pub trait Environment {
    fn obs_dim(&self) -> usize;
    fn action_dim(&self) -> usize;
    fn max_episode_steps(&self) -> usize;
    /// Starts a new episode and returns the initial observation.
    fn reset(&mut self) -> Vec<f64>;
    fn step(&mut self, action: &[f64]) -> Result<StepResult>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepResult {
    pub observation: Vec<f64>,
    /// Set on the `max_episode_steps`-th step; the maze never ends earlier.
    pub terminal: bool,
    pub collided: bool,
}

/// Axis-aligned wall from `(x1, y1)` to `(x2, y2)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WallSegment {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl WallSegment {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self { x1, y1, x2, y2 }
    }

    pub fn is_axis_aligned(&self) -> bool {
        self.x1 == self.x2 || self.y1 == self.y2
    }

    /// True when the segment `p -> q` touches the (slightly thickened) wall.
    pub fn blocks(&self, p: [f64; 2], q: [f64; 2]) -> bool {
        let lo = [
            self.x1.min(self.x2) - WALL_THICKNESS,
            self.y1.min(self.y2) - WALL_THICKNESS,
        ];
        let hi = [
            self.x1.max(self.x2) + WALL_THICKNESS,
            self.y1.max(self.y2) + WALL_THICKNESS,
        ];
        segment_hits_box(p, q, lo, hi)
    }
}

/// Slab test of the segment `p -> q` against the closed box `[lo, hi]`.
fn segment_hits_box(p: [f64; 2], q: [f64; 2], lo: [f64; 2], hi: [f64; 2]) -> bool {
    let mut t0 = 0.0f64;
    let mut t1 = 1.0f64;
    for axis in 0..2 {
        let d = q[axis] - p[axis];
        if d == 0.0 {
            if p[axis] < lo[axis] || p[axis] > hi[axis] {
                return false;
            }
        } else {
            let mut ta = (lo[axis] - p[axis]) / d;
            let mut tb = (hi[axis] - p[axis]) / d;
            if ta > tb {
                std::mem::swap(&mut ta, &mut tb);
            }
            t0 = t0.max(ta);
            t1 = t1.min(tb);
            if t0 > t1 {
                return false;
            }
        }
    }
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    pub walls: Vec<WallSegment>,
    /// The arena is the square `[-half_width, half_width]^2`.
    pub half_width: f64,
    pub start: [f64; 2],
    pub max_episode_steps: usize,
    pub action_clip: f64,
}

impl EnvConfig {
    pub fn open_arena(half_width: f64) -> Self {
        Self {
            walls: Vec::new(),
            half_width,
            start: [0.0, 0.0],
            max_episode_steps: 100,
            action_clip: 1.0,
        }
    }

    /// The maze layout shipped with the crate (`mazes/default.maze`).
    pub fn default_maze() -> Self {
        Self::parse(DEFAULT_MAZE).expect("shipped maze is valid")
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.half_width > 0.0) || !self.half_width.is_finite() {
            return Err(Error::Maze(format!(
                "bounds half-width must be positive, got {}",
                self.half_width
            )));
        }
        if self.max_episode_steps == 0 {
            return Err(Error::Maze("max_episode_steps must be at least 1".into()));
        }
        if !(self.action_clip > 0.0) || !self.action_clip.is_finite() {
            return Err(Error::Maze(format!(
                "action_clip must be positive, got {}",
                self.action_clip
            )));
        }
        let [sx, sy] = self.start;
        if !(sx.abs() < self.half_width && sy.abs() < self.half_width) {
            return Err(Error::Maze(format!(
                "start ({sx}, {sy}) is not strictly inside the bounds"
            )));
        }
        for (i, w) in self.walls.iter().enumerate() {
            if ![w.x1, w.y1, w.x2, w.y2].iter().all(|v| v.is_finite()) {
                return Err(Error::Maze(format!("wall {i} has non-finite coordinates")));
            }
            if !w.is_axis_aligned() {
                return Err(Error::Maze(format!(
                    "diagonal wall {i}: ({}, {})-({}, {}) is not axis-aligned",
                    w.x1, w.y1, w.x2, w.y2
                )));
            }
            if w.blocks(self.start, self.start) {
                return Err(Error::Maze(format!("wall {i} passes through the start position")));
            }
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = EnvConfig {
            walls: Vec::new(),
            half_width: f64::NAN,
            start: [f64::NAN, f64::NAN],
            max_episode_steps: 100,
            action_clip: 1.0,
        };
        let mut saw_bounds = false;
        let mut saw_start = false;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let mut fields = line.split_whitespace();
            let key = fields.next().unwrap_or_default();
            let rest: Vec<&str> = fields.collect();
            let err = |msg: &str| Error::Maze(format!("line {}: {msg}: {raw:?}", lineno + 1));
            let nums = |n: usize| -> Result<Vec<f64>> {
                if rest.len() != n {
                    return Err(err(&format!("expected {n} numbers")));
                }
                rest.iter()
                    .map(|s| s.parse::<f64>().map_err(|_| err("bad number")))
                    .collect()
            };
            match key {
                "bounds" => {
                    cfg.half_width = nums(1)?[0];
                    saw_bounds = true;
                }
                "start" => {
                    let v = nums(2)?;
                    cfg.start = [v[0], v[1]];
                    saw_start = true;
                }
                "max_episode_steps" => {
                    if rest.len() != 1 {
                        return Err(err("expected one integer"));
                    }
                    cfg.max_episode_steps = rest[0].parse().map_err(|_| err("bad integer"))?;
                }
                "action_clip" => cfg.action_clip = nums(1)?[0],
                "wall" => {
                    let v = nums(4)?;
                    cfg.walls.push(WallSegment::new(v[0], v[1], v[2], v[3]));
                }
                other => return Err(err(&format!("unknown key {other:?}"))),
            }
        }
        if !saw_bounds {
            return Err(Error::Maze("missing `bounds` entry".into()));
        }
        if !saw_start {
            return Err(Error::Maze("missing `start` entry".into()));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "bounds {}", self.half_width);
        let _ = writeln!(out, "start {} {}", self.start[0], self.start[1]);
        let _ = writeln!(out, "max_episode_steps {}", self.max_episode_steps);
        let _ = writeln!(out, "action_clip {}", self.action_clip);
        for w in &self.walls {
            let _ = writeln!(out, "wall {} {} {} {}", w.x1, w.y1, w.x2, w.y2);
        }
        out
    }

    /// Segment `p -> q` is free of walls.
    pub fn path_is_clear(&self, p: [f64; 2], q: [f64; 2]) -> bool {
        !self.walls.iter().any(|w| w.blocks(p, q))
    }
}

/// Reads and validates a maze file.
pub fn load_maze(path: impl AsRef<Path>) -> Result<EnvConfig> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    EnvConfig::parse(&text).map_err(|e| match e {
        Error::Maze(msg) => Error::Maze(format!("{}: {msg}", path.display())),
        other => other,
    })
}

#[derive(Clone, Debug)]
pub struct Maze {
    config: EnvConfig,
    pos: [f64; 2],
    steps: usize,
    episode_open: bool,
}

impl Maze {
    pub fn new(config: EnvConfig) -> Result<Self> {
        config.validate()?;
        let pos = config.start;
        Ok(Self {
            config,
            pos,
            steps: 0,
            episode_open: false,
        })
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn position(&self) -> [f64; 2] {
        self.pos
    }

    pub fn steps_taken(&self) -> usize {
        self.steps
    }

    pub fn reset_pos(&mut self) -> [f64; 2] {
        self.pos = self.config.start;
        self.steps = 0;
        self.episode_open = true;
        self.pos
    }

    pub fn step_pos(&mut self, action: [f64; 2]) -> Result<([f64; 2], bool, bool)> {
        if !self.episode_open {
            return Err(Error::InvalidInput(
                "step called without an open episode; call reset first".into(),
            ));
        }
        if !action.iter().all(|a| a.is_finite()) {
            return Err(Error::NonFinite("maze action"));
        }
        let clip = self.config.action_clip;
        let hw = self.config.half_width;
        let candidate = [
            (self.pos[0] + action[0].clamp(-clip, clip)).clamp(-hw, hw),
            (self.pos[1] + action[1].clamp(-clip, clip)).clamp(-hw, hw),
        ];
        let collided = !self.config.path_is_clear(self.pos, candidate);
        if !collided {
            self.pos = candidate;
        }
        self.steps += 1;
        let terminal = self.steps >= self.config.max_episode_steps;
        if terminal {
            self.episode_open = false;
        }
        Ok((self.pos, terminal, collided))
    }
}

impl Environment for Maze {
    fn obs_dim(&self) -> usize {
        2
    }

    fn action_dim(&self) -> usize {
        2
    }

    fn max_episode_steps(&self) -> usize {
        self.config.max_episode_steps
    }

    fn reset(&mut self) -> Vec<f64> {
        self.reset_pos().to_vec()
    }

    fn step(&mut self, action: &[f64]) -> Result<StepResult> {
        if action.len() != 2 {
            return Err(Error::DimensionMismatch {
                context: "maze action",
                expected: 2,
                got: action.len(),
            });
        }
        let (pos, terminal, collided) = self.step_pos([action[0], action[1]])?;
        Ok(StepResult {
            observation: pos.to_vec(),
            terminal,
            collided,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn open() -> Maze {
        Maze::new(EnvConfig::open_arena(6.0)).unwrap()
    }

    #[test]
    fn reset_returns_start() {
        let mut env = open();
        assert_eq!(env.reset(), vec![0.0, 0.0]);
        assert_eq!(env.reset(), vec![0.0, 0.0]);
        for _ in 0..50 {
            env.step(&[0.3, -0.2]).unwrap();
        }
        assert_eq!(env.steps_taken(), 50);
        assert_eq!(env.reset(), vec![0.0, 0.0]);
        assert_eq!(env.steps_taken(), 0);
    }

    #[test]
    fn free_motion_and_action_clip() {
        let mut env = open();
        env.reset();
        let r = env.step(&[1.0, 1.0]).unwrap();
        assert_eq!(r.observation, vec![1.0, 1.0]);
        assert!(!r.collided);
        env.reset();
        let r = env.step(&[3.0, 0.0]).unwrap();
        assert_eq!(r.observation, vec![1.0, 0.0]);
    }

    #[test]
    fn wall_rejects_whole_move() {
        let mut cfg = EnvConfig::open_arena(6.0);
        cfg.walls.push(WallSegment::new(0.5, -1.0, 0.5, 1.0));
        let mut env = Maze::new(cfg).unwrap();
        env.reset();
        let r = env.step(&[1.0, 0.0]).unwrap();
        assert_eq!(r.observation, vec![0.0, 0.0]);
        assert!(r.collided);
        // Moving parallel to the wall is fine.
        let r = env.step(&[0.0, 1.0]).unwrap();
        assert_eq!(r.observation, vec![0.0, 1.0]);
        assert!(!r.collided);
    }

    #[test]
    fn landing_exactly_on_wall_is_a_collision() {
        let mut cfg = EnvConfig::open_arena(6.0);
        cfg.walls.push(WallSegment::new(1.0, -1.0, 1.0, 1.0));
        let mut env = Maze::new(cfg).unwrap();
        env.reset();
        assert!(env.step(&[1.0, 0.0]).unwrap().collided);
    }

    #[test]
    fn boundary_clamps_without_collision() {
        let mut env = open();
        env.reset();
        for _ in 0..10 {
            env.step(&[1.0, 0.0]).unwrap();
        }
        let r = env.step(&[1.0, 0.5]).unwrap();
        assert_eq!(r.observation, vec![6.0, 0.5]);
        assert!(!r.collided);
    }

    #[test]
    fn terminal_on_last_step_only() {
        let mut env = open();
        env.reset();
        for i in 1..=100 {
            let r = env.step(&[0.0, 0.0]).unwrap();
            assert_eq!(r.terminal, i == 100);
        }
        assert!(env.step(&[0.0, 0.0]).is_err());
    }

    #[test]
    fn rejects_bad_actions() {
        let mut env = open();
        assert!(env.step(&[0.0, 0.0]).is_err(), "step before reset");
        env.reset();
        assert!(matches!(env.step(&[f64::NAN, 0.0]), Err(Error::NonFinite(_))));
        assert!(matches!(env.step(&[0.0]), Err(Error::DimensionMismatch { .. })));
        // A rejected action does not consume a step.
        assert_eq!(env.steps_taken(), 0);
    }

    #[test]
    fn parse_errors() {
        let diag = "bounds 6\nstart 0 0\nwall 0 0 1 1\n";
        assert!(matches!(EnvConfig::parse(diag), Err(Error::Maze(m)) if m.contains("diagonal")));
        let through_start = "bounds 6\nstart 0 0\nwall -1 0 1 0\n";
        assert!(matches!(EnvConfig::parse(through_start), Err(Error::Maze(m)) if m.contains("start")));
        assert!(EnvConfig::parse("start 0 0\n").is_err());
        assert!(EnvConfig::parse("bounds 6\nstart 0 0\nwall 1 2 3\n").is_err());
        assert!(EnvConfig::parse("bounds 6\nstart 7 0\n").is_err());
        assert!(EnvConfig::parse("bounds 6\nstart 0 0\nfoo 1\n").is_err());
    }

    #[test]
    fn empty_wall_list_is_an_open_arena() {
        let cfg = EnvConfig::parse("bounds 6\nstart 0 0\n").unwrap();
        assert!(cfg.walls.is_empty());
        assert_eq!(cfg, EnvConfig::open_arena(6.0));
    }

    #[test]
    fn default_maze_shape() {
        let cfg = EnvConfig::default_maze();
        assert_eq!(cfg.half_width, 6.0);
        assert_eq!(cfg.start, [0.0, 0.0]);
        assert_eq!(cfg.max_episode_steps, 100);
        assert!(!cfg.walls.is_empty());
        let reparsed = EnvConfig::parse(&cfg.to_text()).unwrap();
        assert_eq!(reparsed, cfg);
    }
}
