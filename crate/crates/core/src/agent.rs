//! Goal-conditioned soft actor-critic.
//!
//! The actor maps `obs ++ goal` to the mean and log-std of a Gaussian whose
//! samples are squashed by `tanh`. Twin critics score `obs ++ goal ++
//! action`; their slowly-moving copies provide bootstrap targets. The
//! entropy temperature is learned in log space.

use ndarray::{concatenate, s, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::replay::Batch;
use crate::tensor::{Activation, Adam, Checkpoint, Graph, Matrix, Mlp, NodeId};

pub const LOG_STD_MIN: f64 = -20.0;
pub const LOG_STD_MAX: f64 = 2.0;
const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;
const SQUASH_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgentConfig {
    /// Hidden widths of actor and critics.
    pub networks: Vec<usize>,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub discount_factor: f64,
    pub polyak_update_coefficient: f64,
    pub target_entropy: f64,
    /// Environment steps before the first update.
    pub learning_starts: u64,
    pub train_frequency: u64,
    pub gradient_steps: usize,
    pub her_sampling_probability: f64,
    /// Initial value of `ln(alpha)`.
    pub initial_log_temperature: f64,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            networks: vec![300, 400],
            learning_rate: 3e-4,
            batch_size: 256,
            discount_factor: 0.99,
            polyak_update_coefficient: 0.005,
            target_entropy: 2.0,
            learning_starts: 100,
            train_frequency: 1,
            gradient_steps: 1,
            her_sampling_probability: 0.8,
            initial_log_temperature: 0.0,
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.networks.is_empty() || self.networks.contains(&0) {
            return bad(format!(
                "agent networks must be nonempty positive widths, got {:?}",
                self.networks
            ));
        }
        if !(self.learning_rate > 0.0) {
            return bad(format!(
                "agent learning rate must be positive, got {}",
                self.learning_rate
            ));
        }
        if self.batch_size == 0 {
            return bad("agent batch size must be at least 1".into());
        }
        if !(self.discount_factor > 0.0 && self.discount_factor < 1.0) {
            return bad(format!(
                "discount factor must lie in (0, 1), got {}",
                self.discount_factor
            ));
        }
        let tau = self.polyak_update_coefficient;
        if !(tau > 0.0 && tau <= 1.0) {
            return bad(format!("polyak coefficient must lie in (0, 1], got {tau}"));
        }
        if !self.target_entropy.is_finite() || !self.initial_log_temperature.is_finite() {
            return bad("target entropy and initial temperature must be finite".into());
        }
        if self.train_frequency == 0 {
            return bad("train frequency must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.her_sampling_probability) {
            return bad(format!(
                "HER sampling probability must lie in [0, 1], got {}",
                self.her_sampling_probability
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UpdateStats {
    pub critic_loss: f64,
    pub actor_loss: f64,
    pub temperature_loss: f64,
    pub temperature: f64,
    pub mean_log_prob: f64,
}

/// Intermediate values of the critic target, exposed for inspection.
#[derive(Clone, Debug)]
pub struct TargetDetails {
    pub next_q1: Vec<f64>,
    pub next_q2: Vec<f64>,
    pub next_log_prob: Vec<f64>,
    pub target: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct Sac {
    config: AgentConfig,
    obs_dim: usize,
    act_dim: usize,
    actor: Mlp,
    critic1: Mlp,
    critic2: Mlp,
    target1: Mlp,
    target2: Mlp,
    log_alpha: f64,
    actor_opt: Adam,
    critic1_opt: Adam,
    critic2_opt: Adam,
    alpha_opt: Adam,
    updates: u64,
}

fn widths(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
    let mut w = vec![input];
    w.extend_from_slice(hidden);
    w.push(output);
    w
}

/// Squashed-Gaussian sample on a pure forward pass. Returns the action and
/// per-row log-probability.
fn squashed_sample(out: &Matrix, noise: &Matrix, act_dim: usize) -> (Matrix, Vec<f64>) {
    let mean = out.slice(s![.., ..act_dim]);
    let log_std = out.slice(s![.., act_dim..]).mapv(|v| v.clamp(LOG_STD_MIN, LOG_STD_MAX));
    let u = &mean + &(log_std.mapv(f64::exp) * noise);
    let a = u.mapv(f64::tanh);
    let mut logp = vec![0.0; out.nrows()];
    for (i, lp) in logp.iter_mut().enumerate() {
        for j in 0..act_dim {
            let e = noise[[i, j]];
            let ai = a[[i, j]];
            *lp += -0.5 * e * e - log_std[[i, j]] - HALF_LN_2PI - (1.0 - ai * ai + SQUASH_EPS).ln();
        }
    }
    (a, logp)
}

impl Sac {
    pub fn new<R: Rng + ?Sized>(config: AgentConfig, obs_dim: usize, act_dim: usize, rng: &mut R) -> Result<Self> {
        config.validate()?;
        if obs_dim == 0 || act_dim == 0 {
            return Err(Error::InvalidInput("agent dimensions must be positive".into()));
        }
        let goal_dim = obs_dim;
        let mut actor = Mlp::new(
            &widths(obs_dim + goal_dim, &config.networks, 2 * act_dim),
            Activation::Relu,
            rng,
        )?;
        actor.zero_output_layer();
        let cw = widths(obs_dim + goal_dim + act_dim, &config.networks, 1);
        let critic1 = Mlp::new(&cw, Activation::Relu, rng)?;
        let critic2 = Mlp::new(&cw, Activation::Relu, rng)?;
        let lr = config.learning_rate;
        Ok(Self {
            actor_opt: Adam::new(actor.params().len(), lr)?,
            critic1_opt: Adam::new(critic1.params().len(), lr)?,
            critic2_opt: Adam::new(critic2.params().len(), lr)?,
            alpha_opt: Adam::new(1, lr)?,
            target1: critic1.clone(),
            target2: critic2.clone(),
            log_alpha: config.initial_log_temperature,
            actor,
            critic1,
            critic2,
            config,
            obs_dim,
            act_dim,
            updates: 0,
        })
    }

    pub fn config(&self) -> &AgentConfig {
        &self.config
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    pub fn act_dim(&self) -> usize {
        self.act_dim
    }

    pub fn actor(&self) -> &Mlp {
        &self.actor
    }

    pub fn critics(&self) -> (&Mlp, &Mlp) {
        (&self.critic1, &self.critic2)
    }

    pub fn target_critics(&self) -> (&Mlp, &Mlp) {
        (&self.target1, &self.target2)
    }

    pub fn temperature(&self) -> f64 {
        self.log_alpha.exp()
    }

    pub fn log_temperature(&self) -> f64 {
        self.log_alpha
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    /// Action in `(-1, 1)^act_dim` for one observation and goal.
    pub fn act<R: Rng + ?Sized>(
        &self,
        obs: &[f64],
        goal: &[f64],
        deterministic: bool,
        rng: &mut R,
    ) -> Result<Vec<f64>> {
        for (name, v, want) in [("observation", obs, self.obs_dim), ("goal", goal, self.obs_dim)] {
            if v.len() != want {
                return Err(Error::DimensionMismatch {
                    context: if name == "goal" {
                        "agent goal"
                    } else {
                        "agent observation"
                    },
                    expected: want,
                    got: v.len(),
                });
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(if name == "goal" {
                    "agent goal"
                } else {
                    "agent observation"
                }));
            }
        }
        let mut input = obs.to_vec();
        input.extend_from_slice(goal);
        let out = self.actor.forward(&input)?;
        let a = (0..self.act_dim)
            .map(|j| {
                let mean = out[j];
                if deterministic {
                    mean.tanh()
                } else {
                    let log_std = out[self.act_dim + j].clamp(LOG_STD_MIN, LOG_STD_MAX);
                    let e: f64 = rng.sample(StandardNormal);
                    (mean + log_std.exp() * e).tanh()
                }
            })
            .collect();
        Ok(a)
    }

    fn check_batch(&self, batch: &Batch) -> Result<()> {
        let n = batch.len();
        if n == 0 {
            return Err(Error::InvalidInput("empty training batch".into()));
        }
        let checks = [
            ("batch observations", batch.obs.dim(), (n, self.obs_dim)),
            ("batch next observations", batch.next_obs.dim(), (n, self.obs_dim)),
            ("batch goals", batch.goals.dim(), (n, self.obs_dim)),
            ("batch actions", batch.actions.dim(), (n, self.act_dim)),
        ];
        for (context, got, want) in checks {
            if got != want {
                return Err(Error::DimensionMismatch {
                    context,
                    expected: want.0 * want.1,
                    got: got.0 * got.1,
                });
            }
        }
        if batch.dones.len() != n {
            return Err(Error::DimensionMismatch {
                context: "batch done flags",
                expected: n,
                got: batch.dones.len(),
            });
        }
        Ok(())
    }

    fn sample_noise<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Matrix {
        Array2::from_shape_simple_fn((n, self.act_dim), || rng.sample(StandardNormal))
    }

    /// Critic target `r + gamma (1 - done) (min(Q1', Q2') - alpha log pi)`
    /// for the next state under fixed noise.
    pub fn critic_target(&self, batch: &Batch, next_noise: &Matrix) -> Result<TargetDetails> {
        self.check_batch(batch)?;
        let x_next = concatenate(Axis(1), &[batch.next_obs.view(), batch.goals.view()])
            .map_err(|e| Error::InvalidInput(e.to_string()))?;
        let out = self.actor.forward_batch(x_next.view())?;
        let (a_next, logp) = squashed_sample(&out, next_noise, self.act_dim);
        let qin =
            concatenate(Axis(1), &[x_next.view(), a_next.view()]).map_err(|e| Error::InvalidInput(e.to_string()))?;
        let q1 = self.target1.forward_batch(qin.view())?.column(0).to_vec();
        let q2 = self.target2.forward_batch(qin.view())?.column(0).to_vec();
        let alpha = self.temperature();
        let gamma = self.config.discount_factor;
        let target = (0..batch.len())
            .map(|i| {
                let v = q1[i].min(q2[i]) - alpha * logp[i];
                batch.rewards[i] + gamma * (1.0 - batch.dones[i]) * v
            })
            .collect();
        Ok(TargetDetails {
            next_q1: q1,
            next_q2: q2,
            next_log_prob: logp,
            target,
        })
    }

    /// Record the squashed-Gaussian policy on `g`; returns action and
    /// per-row log-probability nodes.
    fn record_policy(
        &self,
        g: &mut Graph,
        x: NodeId,
        noise: &Matrix,
        trainable: bool,
    ) -> Result<(NodeId, NodeId, crate::tensor::MlpNodes)> {
        let a = self.act_dim;
        let nodes = self.actor.record(g, x, trainable)?;
        let mean = g.slice_cols(nodes.output, 0, a)?;
        let raw_log_std = g.slice_cols(nodes.output, a, 2 * a)?;
        let log_std = g.clamp(raw_log_std, LOG_STD_MIN, LOG_STD_MAX)?;
        let std = g.exp(log_std);
        let eps = g.constant(noise.clone());
        let spread = g.mul(std, eps)?;
        let u = g.add(mean, spread)?;
        let action = g.tanh(u);
        let gauss = g.constant(noise.mapv(|e| -0.5 * e * e - HALF_LN_2PI));
        let lp = g.sub(gauss, log_std)?;
        let sq = g.square(action);
        let one_minus = g.scale(sq, -1.0);
        let one_minus = g.add_scalar(one_minus, 1.0 + SQUASH_EPS);
        let log_jac = g.log(one_minus);
        let lp = g.sub(lp, log_jac)?;
        let logp = g.row_sum(lp);
        Ok((action, logp, nodes))
    }

    fn critic_step(critic: &Mlp, qin: ArrayView2<'_, f64>, y: &Matrix) -> Result<(f64, Vec<f64>)> {
        let mut g = Graph::new();
        let x = g.constant(qin.to_owned());
        let nodes = critic.record(&mut g, x, true)?;
        let yn = g.constant(y.clone());
        let diff = g.sub(nodes.output, yn)?;
        let sq = g.square(diff);
        let mse = g.mean(sq);
        let loss = g.scale(mse, 0.5);
        let grads = g.backward(loss)?;
        Ok((g.scalar(loss), critic.flat_grad(&nodes, &grads)?))
    }

    /// One gradient step on critics, actor and temperature, followed by the
    /// target-network update. On a non-finite loss or gradient the agent is
    /// left unchanged.
    pub fn update<R: Rng + ?Sized>(&mut self, batch: &Batch, rng: &mut R) -> Result<UpdateStats> {
        self.check_batch(batch)?;
        let n = batch.len();
        let noise = self.sample_noise(n, rng);
        let next_noise = self.sample_noise(n, rng);
        self.update_with_noise(batch, &noise, &next_noise)
    }

    /// [`Sac::update`] with caller-supplied policy noise.
    pub fn update_with_noise(&mut self, batch: &Batch, noise: &Matrix, next_noise: &Matrix) -> Result<UpdateStats> {
        self.check_batch(batch)?;
        let n = batch.len();
        for m in [noise, next_noise] {
            if m.dim() != (n, self.act_dim) {
                return Err(Error::DimensionMismatch {
                    context: "policy noise",
                    expected: n * self.act_dim,
                    got: m.len(),
                });
            }
        }
        let alpha = self.temperature();
        let x = concatenate(Axis(1), &[batch.obs.view(), batch.goals.view()])
            .map_err(|e| Error::InvalidInput(e.to_string()))?;

        // Policy sample on the current state, kept on the tape for the actor loss.
        let mut g = Graph::new();
        let xn = g.constant(x.clone());
        let (action, logp, actor_nodes) = self.record_policy(&mut g, xn, noise, true)?;
        let logp_vals = g.value(logp).column(0).to_vec();
        let mean_logp = logp_vals.iter().sum::<f64>() / n as f64;
        let temperature_loss = -self.log_alpha * (mean_logp + self.config.target_entropy);
        let alpha_grad = -(mean_logp + self.config.target_entropy);

        // Critics.
        let details = self.critic_target(batch, next_noise)?;
        let y = Array2::from_shape_vec((n, 1), details.target).expect("shape");
        let qin =
            concatenate(Axis(1), &[x.view(), batch.actions.view()]).map_err(|e| Error::InvalidInput(e.to_string()))?;
        let (l1, g1) = Self::critic_step(&self.critic1, qin.view(), &y)?;
        let (l2, g2) = Self::critic_step(&self.critic2, qin.view(), &y)?;
        let critic_loss = l1 + l2;
        if !critic_loss.is_finite() || !temperature_loss.is_finite() {
            return Err(Error::NonFinite("critic or temperature loss"));
        }
        let snapshot = (
            self.critic1.clone(),
            self.critic2.clone(),
            self.critic1_opt.clone(),
            self.critic2_opt.clone(),
        );
        let stepped = self
            .critic1_opt
            .step(self.critic1.params_mut(), &g1)
            .and_then(|_| self.critic2_opt.step(self.critic2.params_mut(), &g2));

        // Actor against the freshly updated critics.
        let actor_result = stepped.and_then(|_| {
            let qa = g.concat_cols(&[xn, action])?;
            let q1 = self.critic1.record(&mut g, qa, false)?.output;
            let q2 = self.critic2.record(&mut g, qa, false)?.output;
            let qmin = g.minimum(q1, q2)?;
            let ent = g.scale(logp, alpha);
            let diff = g.sub(ent, qmin)?;
            let loss = g.mean(diff);
            let actor_loss = g.scalar(loss);
            if !actor_loss.is_finite() {
                return Err(Error::NonFinite("actor loss"));
            }
            let grads = g.backward(loss)?;
            Ok((actor_loss, self.actor.flat_grad(&actor_nodes, &grads)?))
        });
        let (actor_loss, actor_grad) = match actor_result {
            Ok(v) => v,
            Err(e) => {
                (self.critic1, self.critic2, self.critic1_opt, self.critic2_opt) = snapshot;
                return Err(e);
            }
        };
        if let Err(e) = self.actor_opt.step(self.actor.params_mut(), &actor_grad) {
            (self.critic1, self.critic2, self.critic1_opt, self.critic2_opt) = snapshot;
            return Err(e);
        }
        let mut la = [self.log_alpha];
        self.alpha_opt.step(&mut la, &[alpha_grad])?;
        self.log_alpha = la[0];

        let tau = self.config.polyak_update_coefficient;
        self.target1.soft_update_from(&self.critic1, tau)?;
        self.target2.soft_update_from(&self.critic2, tau)?;
        self.updates += 1;
        Ok(UpdateStats {
            critic_loss,
            actor_loss,
            temperature_loss,
            temperature: alpha,
            mean_log_prob: mean_logp,
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::new()
            .with_net("actor", &self.actor)
            .with_net("critic1", &self.critic1)
            .with_net("critic2", &self.critic2)
            .with_net("target1", &self.target1)
            .with_net("target2", &self.target2)
            .with_scalar("log_temperature", self.log_alpha)
    }

    /// Restore network parameters and temperature. Optimizer moments are
    /// reset.
    pub fn load_checkpoint(&mut self, ckpt: &Checkpoint) -> Result<()> {
        let pick = |name: &str, like: &Mlp| -> Result<Mlp> {
            let net = ckpt.net(name)?;
            if net.widths() != like.widths() {
                return Err(Error::Checkpoint(format!(
                    "network '{name}' has widths {:?}, expected {:?}",
                    net.widths(),
                    like.widths()
                )));
            }
            Ok(net.clone())
        };
        let actor = pick("actor", &self.actor)?;
        let c1 = pick("critic1", &self.critic1)?;
        let c2 = pick("critic2", &self.critic2)?;
        let t1 = pick("target1", &self.target1)?;
        let t2 = pick("target2", &self.target2)?;
        let la = ckpt.scalar("log_temperature")?;
        let lr = self.config.learning_rate;
        self.actor_opt = Adam::new(actor.params().len(), lr)?;
        self.critic1_opt = Adam::new(c1.params().len(), lr)?;
        self.critic2_opt = Adam::new(c2.params().len(), lr)?;
        self.alpha_opt = Adam::new(1, lr)?;
        (
            self.actor,
            self.critic1,
            self.critic2,
            self.target1,
            self.target2,
            self.log_alpha,
        ) = (actor, c1, c2, t1, t2, la);
        Ok(())
    }
}
