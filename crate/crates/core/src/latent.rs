//! Learned latent representation.
//!
//! An encoder maps observations to `R^latent_dim`. It is trained jointly
//! with a dynamics head, either forward (predict the next observation from
//! the latent state and the action) or inverse (predict the action from two
//! consecutive latent states).

use ndarray::ArrayView2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::replay::{ReplayBuffer, TransitionBatch};
use crate::tensor::{Activation, Adam, Checkpoint, Graph, Matrix, Mlp};

/// Encoder and head gradients, flattened.
type GradPair = (Vec<f64>, Vec<f64>);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RepresentationMethod {
    ForwardDynamics,
    InverseDynamics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub method: RepresentationMethod,
    pub latent_dimension: usize,
    pub networks: Vec<usize>,
    /// Environment steps between training rounds.
    pub train_frequency: u64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub gradient_steps: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            method: RepresentationMethod::ForwardDynamics,
            latent_dimension: 16,
            networks: vec![64, 64],
            train_frequency: 5000,
            learning_rate: 1e-3,
            batch_size: 32,
            gradient_steps: 500,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dimension == 0
            || self.networks.contains(&0)
            || self.train_frequency == 0
            || self.batch_size == 0
            || self.gradient_steps == 0
            || !(self.learning_rate > 0.0)
        {
            return Err(Error::Config(format!("encoder settings must be positive: {self:?}")));
        }
        Ok(())
    }
}

fn widths(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
    let mut w = vec![input];
    w.extend_from_slice(hidden);
    w.push(output);
    w
}

/// Observation encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    net: Mlp,
}

impl Encoder {
    pub fn new(net: Mlp) -> Self {
        Self { net }
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn latent_dim(&self) -> usize {
        self.net.output_dim()
    }

    pub fn obs_dim(&self) -> usize {
        self.net.input_dim()
    }

    pub fn embed(&self, obs: &[f64]) -> Result<Vec<f64>> {
        self.net.forward(obs)
    }

    pub fn embed_batch(&self, obs: ArrayView2<'_, f64>) -> Result<Matrix> {
        self.net.forward_batch(obs)
    }
}

/// Encoder together with its dynamics head and optimizer state.
#[derive(Clone, Debug)]
pub struct LatentModel {
    config: EncoderConfig,
    encoder: Encoder,
    head: Mlp,
    encoder_opt: Adam,
    head_opt: Adam,
    act_dim: usize,
}

impl LatentModel {
    pub fn new<R: Rng + ?Sized>(config: EncoderConfig, obs_dim: usize, act_dim: usize, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.latent_dimension;
        let enc = Mlp::new(&widths(obs_dim, &config.networks, d), Activation::Relu, rng)?;
        let head_widths = match config.method {
            RepresentationMethod::ForwardDynamics => widths(d + act_dim, &config.networks, obs_dim),
            RepresentationMethod::InverseDynamics => widths(2 * d, &config.networks, act_dim),
        };
        let head = Mlp::new(&head_widths, Activation::Relu, rng)?;
        Self::from_parts(config, Encoder::new(enc), head)
    }

    /// Assemble from given networks; shapes must agree with `config`.
    pub fn from_parts(config: EncoderConfig, encoder: Encoder, head: Mlp) -> Result<Self> {
        config.validate()?;
        let d = encoder.latent_dim();
        if d != config.latent_dimension {
            return Err(Error::DimensionMismatch {
                context: "encoder output",
                expected: config.latent_dimension,
                got: d,
            });
        }
        let act_dim = match config.method {
            RepresentationMethod::ForwardDynamics => {
                if head.output_dim() != encoder.obs_dim() || head.input_dim() <= d {
                    return Err(Error::InvalidInput(
                        "forward head must map latent ++ action to an observation".into(),
                    ));
                }
                head.input_dim() - d
            }
            RepresentationMethod::InverseDynamics => {
                if head.input_dim() != 2 * d {
                    return Err(Error::InvalidInput("inverse head must take two latents".into()));
                }
                head.output_dim()
            }
        };
        Ok(Self {
            encoder_opt: Adam::new(encoder.net.params().len(), config.learning_rate)?,
            head_opt: Adam::new(head.params().len(), config.learning_rate)?,
            config,
            encoder,
            head,
            act_dim,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn head(&self) -> &Mlp {
        &self.head
    }

    pub fn embed(&self, obs: &[f64]) -> Result<Vec<f64>> {
        self.encoder.embed(obs)
    }

    fn check(&self, b: &TransitionBatch) -> Result<()> {
        let n = b.obs.nrows();
        let od = self.encoder.obs_dim();
        if n == 0 || b.obs.ncols() != od || b.next_obs.dim() != (n, od) || b.actions.dim() != (n, self.act_dim) {
            return Err(Error::InvalidInput(format!(
                "transition batch shapes {:?} {:?} {:?} do not fit the model",
                b.obs.dim(),
                b.actions.dim(),
                b.next_obs.dim()
            )));
        }
        Ok(())
    }

    /// Loss and, when `with_grad`, the encoder and head gradients.
    fn loss_and_grads(&self, b: &TransitionBatch, with_grad: bool) -> Result<(f64, Option<GradPair>)> {
        self.check(b)?;
        let mut g = Graph::new();
        let s = g.constant(b.obs.clone());
        let enc = self.encoder.net.record(&mut g, s, with_grad)?;
        let mut encoders = vec![];
        let (head, target) = match self.config.method {
            RepresentationMethod::ForwardDynamics => {
                let a = g.constant(b.actions.clone());
                let inp = g.concat_cols(&[enc.output, a])?;
                let head = self.head.record(&mut g, inp, with_grad)?;
                (head, g.constant(b.next_obs.clone()))
            }
            RepresentationMethod::InverseDynamics => {
                // Both states go through the same encoder; the two gradient
                // contributions are summed below.
                let s2 = g.constant(b.next_obs.clone());
                let enc2 = self.encoder.net.record(&mut g, s2, with_grad)?;
                let inp = g.concat_cols(&[enc.output, enc2.output])?;
                let head = self.head.record(&mut g, inp, with_grad)?;
                encoders.push(enc2);
                (head, g.constant(b.actions.clone()))
            }
        };
        encoders.push(enc);

        let diff = g.sub(target, head.output)?;
        let sq = g.square(diff);
        let per_row = g.row_sum(sq);
        let mean = g.mean(per_row);
        let loss = g.scale(mean, 0.5);
        let value = g.scalar(loss);
        if !with_grad {
            return Ok((value, None));
        }
        let grads = g.backward(loss)?;
        let mut enc_grad = vec![0.0; self.encoder.net.params().len()];
        for e in &encoders {
            for (acc, v) in enc_grad.iter_mut().zip(self.encoder.net.flat_grad(e, &grads)?) {
                *acc += v;
            }
        }
        let head_grad = self.head.flat_grad(&head, &grads)?;
        Ok((value, Some((enc_grad, head_grad))))
    }

    /// Dynamics loss on a batch: `0.5 * mean ||target - prediction||^2`.
    pub fn loss(&self, b: &TransitionBatch) -> Result<f64> {
        Ok(self.loss_and_grads(b, false)?.0)
    }

    /// Encoder and head gradients of [`Self::loss`].
    pub fn gradients(&self, b: &TransitionBatch) -> Result<(Vec<f64>, Vec<f64>)> {
        Ok(self.loss_and_grads(b, true)?.1.expect("requested gradients"))
    }

    /// One joint optimizer step; returns the pre-step loss.
    pub fn train_step(&mut self, b: &TransitionBatch) -> Result<f64> {
        let (loss, grads) = self.loss_and_grads(b, true)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite("representation loss"));
        }
        let (ge, gh) = grads.expect("requested gradients");
        let enc_backup = (self.encoder.clone(), self.encoder_opt.clone());
        self.encoder_opt.step(self.encoder.net.params_mut(), &ge)?;
        if let Err(e) = self.head_opt.step(self.head.params_mut(), &gh) {
            (self.encoder, self.encoder_opt) = enc_backup;
            return Err(e);
        }
        Ok(loss)
    }

    /// `gradient_steps` updates on uniform minibatches from `buffer`.
    /// Returns the mean pre-step loss. A non-finite loss aborts the round
    /// and restores the model.
    pub fn train_round<R: Rng + ?Sized>(&mut self, buffer: &ReplayBuffer, rng: &mut R) -> Result<f64> {
        if buffer.len() < self.config.batch_size {
            return Err(Error::InsufficientData(format!(
                "encoder training needs {} transitions, buffer holds {}",
                self.config.batch_size,
                buffer.len()
            )));
        }
        let backup = self.clone();
        let mut total = 0.0;
        for _ in 0..self.config.gradient_steps {
            let b = buffer.sample_transitions(self.config.batch_size, rng)?;
            match self.train_step(&b) {
                Ok(l) => total += l,
                Err(e) => {
                    *self = backup;
                    return Err(e);
                }
            }
        }
        Ok(total / self.config.gradient_steps as f64)
    }

    /// Recompute the latent of every stored observation.
    pub fn refresh_cache(&self, buffer: &mut ReplayBuffer) -> Result<()> {
        let (obs, _) = buffer.all_observations();
        let latents = if obs.nrows() == 0 {
            Matrix::zeros((0, self.config.latent_dimension))
        } else {
            self.encoder.embed_batch(obs.view())?
        };
        buffer.set_latents(latents)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::new()
            .with_net("encoder", &self.encoder.net)
            .with_net("head", &self.head)
    }
}
