use ndarray::{ArrayView1, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Gradients, Graph, Matrix, NodeId};
use crate::error::{Error, Result};

/// Hidden-layer nonlinearity. The output layer is always linear.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            other => Err(Error::InvalidInput(format!("unknown activation '{other}'"))),
        }
    }

    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }
}

/// Fully-connected network with a flat parameter vector.
///
/// Layer `l` occupies `widths[l] * widths[l + 1]` weights stored row-major
/// as an `in x out` matrix, followed by `widths[l + 1]` biases.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    widths: Vec<usize>,
    activation: Activation,
    params: Vec<f64>,
}

/// Tape handles produced by [`Mlp::record`].
#[derive(Clone, Debug)]
pub struct MlpNodes {
    pub output: NodeId,
    /// `(weight, bias)` per layer; present only when recorded as trainable.
    pub params: Vec<(NodeId, NodeId)>,
}

impl Mlp {
    pub fn param_count(widths: &[usize]) -> usize {
        widths.windows(2).map(|w| (w[0] + 1) * w[1]).sum()
    }

    fn check_widths(widths: &[usize]) -> Result<()> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::InvalidInput(format!(
                "network widths must have at least two positive entries, got {widths:?}"
            )));
        }
        Ok(())
    }

    /// Every parameter zero.
    pub fn zeros(widths: &[usize], activation: Activation) -> Result<Self> {
        Self::check_widths(widths)?;
        Ok(Self {
            widths: widths.to_vec(),
            activation,
            params: vec![0.0; Self::param_count(widths)],
        })
    }

    /// Weights and biases uniform in `±1/sqrt(fan_in)`.
    pub fn new<R: Rng + ?Sized>(widths: &[usize], activation: Activation, rng: &mut R) -> Result<Self> {
        let mut net = Self::zeros(widths, activation)?;
        let mut offset = 0;
        for w in widths.windows(2) {
            let bound = 1.0 / (w[0] as f64).sqrt();
            let n = (w[0] + 1) * w[1];
            for p in &mut net.params[offset..offset + n] {
                *p = rng.random_range(-bound..bound);
            }
            offset += n;
        }
        Ok(net)
    }

    pub fn from_params(widths: &[usize], activation: Activation, params: Vec<f64>) -> Result<Self> {
        Self::check_widths(widths)?;
        let expected = Self::param_count(widths);
        if params.len() != expected {
            return Err(Error::DimensionMismatch {
                context: "network parameters",
                expected,
                got: params.len(),
            });
        }
        Ok(Self {
            widths: widths.to_vec(),
            activation,
            params,
        })
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().expect("validated widths")
    }

    pub fn num_layers(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn layer_offset(&self, layer: usize) -> usize {
        Self::param_count(&self.widths[..=layer])
    }

    /// Weight matrix (`in x out`) and bias of one layer.
    pub fn layer(&self, layer: usize) -> (ArrayView2<'_, f64>, ArrayView1<'_, f64>) {
        let (i, o) = (self.widths[layer], self.widths[layer + 1]);
        let start = self.layer_offset(layer);
        let w = ArrayView2::from_shape((i, o), &self.params[start..start + i * o]).expect("layer shape");
        let b = ArrayView1::from(&self.params[start + i * o..start + (i + 1) * o]);
        (w, b)
    }

    /// Zero the weights and biases of the last layer.
    pub fn zero_output_layer(&mut self) {
        let start = self.layer_offset(self.num_layers() - 1);
        self.params[start..].iter_mut().for_each(|p| *p = 0.0);
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        let x = ArrayView2::from_shape((1, input.len()), input).map_err(|e| Error::InvalidInput(e.to_string()))?;
        Ok(self.forward_batch(x)?.into_raw_vec_and_offset().0)
    }

    /// Row-wise evaluation of a batch without recording a tape.
    pub fn forward_batch(&self, x: ArrayView2<'_, f64>) -> Result<Matrix> {
        if x.ncols() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                context: "network input",
                expected: self.input_dim(),
                got: x.ncols(),
            });
        }
        let last = self.num_layers() - 1;
        let mut h: Matrix = x.to_owned();
        for l in 0..=last {
            let (w, b) = self.layer(l);
            h = h.dot(&w) + b;
            if l < last {
                let act = self.activation;
                h.mapv_inplace(|v| act.apply(v));
            }
        }
        Ok(h)
    }

    /// Record the forward pass on `g`. With `trainable` the parameters are
    /// tape variables whose gradients can be gathered by [`Mlp::flat_grad`].
    pub fn record(&self, g: &mut Graph, input: NodeId, trainable: bool) -> Result<MlpNodes> {
        let last = self.num_layers() - 1;
        let mut h = input;
        let mut params = Vec::new();
        for l in 0..=last {
            let (w, b) = self.layer(l);
            let w = w.to_owned();
            let b = b.to_owned().insert_axis(ndarray::Axis(0));
            let (wn, bn) = if trainable {
                (g.variable(w), g.variable(b))
            } else {
                (g.constant(w), g.constant(b))
            };
            if trainable {
                params.push((wn, bn));
            }
            h = g.affine(h, wn, bn)?;
            if l < last {
                h = match self.activation {
                    Activation::Relu => g.relu(h),
                    Activation::Tanh => g.tanh(h),
                };
            }
        }
        Ok(MlpNodes { output: h, params })
    }

    /// Gather the parameter gradient into the flat layout.
    pub fn flat_grad(&self, nodes: &MlpNodes, grads: &Gradients) -> Result<Vec<f64>> {
        if nodes.params.len() != self.num_layers() {
            return Err(Error::InvalidInput("network was not recorded as trainable".into()));
        }
        let mut out = Vec::with_capacity(self.params.len());
        for (l, &(wn, bn)) in nodes.params.iter().enumerate() {
            let (i, o) = (self.widths[l], self.widths[l + 1]);
            match grads.get(wn) {
                Some(gw) => out.extend(gw.iter()),
                None => out.extend(std::iter::repeat_n(0.0, i * o)),
            }
            match grads.get(bn) {
                Some(gb) => out.extend(gb.iter()),
                None => out.extend(std::iter::repeat_n(0.0, o)),
            }
        }
        Ok(out)
    }

    /// `self <- (1 - tau) * self + tau * source`.
    pub fn soft_update_from(&mut self, source: &Mlp, tau: f64) -> Result<()> {
        if source.widths != self.widths {
            return Err(Error::InvalidInput("soft update between different shapes".into()));
        }
        for (t, s) in self.params.iter_mut().zip(&source.params) {
            *t = (1.0 - tau) * *t + tau * s;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn parameter_count() {
        assert_eq!(Mlp::param_count(&[2, 64, 64, 16]), 3 * 64 + 65 * 64 + 65 * 16);
        let net = Mlp::zeros(&[4, 300, 400, 1], Activation::Relu).unwrap();
        assert_eq!(net.params().len(), 5 * 300 + 301 * 400 + 401);
    }

    #[test]
    fn bad_widths_rejected() {
        assert!(Mlp::zeros(&[3], Activation::Relu).is_err());
        assert!(Mlp::zeros(&[3, 0, 1], Activation::Relu).is_err());
        assert!(Mlp::from_params(&[1, 1], Activation::Relu, vec![0.0]).is_err());
    }

    #[test]
    fn zero_net_outputs_zero() {
        let net = Mlp::zeros(&[3, 8, 2], Activation::Tanh).unwrap();
        assert_eq!(net.forward(&[1.0, -4.0, 9.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn identity_net() {
        let net = Mlp::from_params(&[1, 1], Activation::Relu, vec![1.0, 0.0]).unwrap();
        assert_eq!(net.forward(&[2.0]).unwrap(), vec![2.0]);
        assert_eq!(net.forward(&[-2.0]).unwrap(), vec![-2.0]);
    }

    #[test]
    fn input_width_checked() {
        let net = Mlp::zeros(&[3, 2], Activation::Relu).unwrap();
        assert!(net.forward(&[1.0]).is_err());
    }

    #[test]
    fn hand_rolled_two_three_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let net = Mlp::new(&[2, 3, 1], Activation::Relu, &mut rng).unwrap();
        let p = net.params();
        // layout: W1 (2x3 row-major), b1 (3), W2 (3x1), b2 (1)
        let x = [0.4, -1.3];
        let mut out = p[12];
        for j in 0..3 {
            let pre = x[0] * p[j] + x[1] * p[3 + j] + p[6 + j];
            out += pre.max(0.0) * p[9 + j];
        }
        let got = net.forward(&x).unwrap()[0];
        assert!((got - out).abs() < 1e-12);
    }

    #[test]
    fn init_is_bounded_and_seeded() {
        let a = Mlp::new(&[16, 8, 4], Activation::Relu, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = Mlp::new(&[16, 8, 4], Activation::Relu, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(a, b);
        let (w, bias) = a.layer(0);
        assert!(w.iter().chain(bias.iter()).all(|v| v.abs() <= 0.25));
        let (w, _) = a.layer(1);
        assert!(w.iter().all(|v| v.abs() <= 1.0 / 8f64.sqrt()));
    }

    #[test]
    fn tape_matches_pure_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net = Mlp::new(&[3, 7, 5, 2], Activation::Tanh, &mut rng).unwrap();
        let x = Array2::from_shape_fn((4, 3), |(i, j)| (i as f64 - j as f64) * 0.3);
        let mut g = Graph::new();
        let xn = g.constant(x.clone());
        let nodes = net.record(&mut g, xn, false).unwrap();
        assert_eq!(g.value(nodes.output), &net.forward_batch(x.view()).unwrap());
    }

    #[test]
    fn zero_output_layer_gives_zero_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut net = Mlp::new(&[2, 6, 3], Activation::Relu, &mut rng).unwrap();
        net.zero_output_layer();
        assert_eq!(net.forward(&[0.3, 0.2]).unwrap(), vec![0.0; 3]);
        assert!(net.layer(0).0.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn soft_update_interpolates() {
        let mut t = Mlp::from_params(&[1, 1], Activation::Relu, vec![1.0, 2.0]).unwrap();
        let s = Mlp::from_params(&[1, 1], Activation::Relu, vec![3.0, 6.0]).unwrap();
        t.soft_update_from(&s, 0.25).unwrap();
        assert_eq!(t.params(), &[1.5, 3.0]);
    }
}
