//! Dense function approximation: a reverse-mode tape over 2-D `f64`
//! matrices, fully-connected networks and an Adam optimizer.
//!
//! The tape supports a fixed primitive set (affine maps, relu, tanh, exp,
//! log, square, sums, means and element products, plus column concat/slice
//! to assemble network inputs). Nodes are appended in evaluation order, so
//! the reverse pass is a single backwards sweep.

mod checkpoint;
mod mlp;
mod optim;

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint};
pub use mlp::{Activation, Mlp, MlpNodes};
pub use optim::Adam;

use ndarray::{Array2, Axis, Zip};

use crate::error::{Error, Result};

pub type Matrix = Array2<f64>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    /// `x + b` with the `1 x m` row `b` broadcast over the rows of `x`.
    AddBias(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    /// Element product; either side may be `1 x 1` and broadcast.
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    Relu(NodeId),
    Tanh(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Square(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    /// Sum across columns: `n x m -> n x 1`.
    RowSum(NodeId),
    ConcatCols(Vec<NodeId>),
    SliceCols(NodeId, usize, usize),
}

#[derive(Clone, Debug)]
struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

/// A recorded computation.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Result of [`Graph::backward`]: one gradient per node that requires it.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Matrix> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    /// Scalar value of a `1 x 1` node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        self.nodes[id.0].value[[0, 0]]
    }

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn shape(&self, id: NodeId) -> (usize, usize) {
        self.nodes[id.0].value.dim()
    }

    /// Leaf that receives no gradient.
    pub fn constant(&mut self, value: Matrix) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf whose gradient is tracked.
    pub fn variable(&mut self, value: Matrix) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (_, k) = self.shape(a);
        let (k2, _) = self.shape(b);
        if k != k2 {
            return Err(Error::DimensionMismatch {
                context: "matmul inner dimension",
                expected: k,
                got: k2,
            });
        }
        let v = self.value(a).dot(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::MatMul(a, b), rg))
    }

    pub fn add_bias(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let (_, m) = self.shape(x);
        if self.shape(b) != (1, m) {
            return Err(Error::DimensionMismatch {
                context: "bias width",
                expected: m,
                got: self.shape(b).1,
            });
        }
        let v = self.value(x) + self.value(b);
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(v, Op::AddBias(x, b), rg))
    }

    /// `x W + b`.
    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let h = self.matmul(x, w)?;
        self.add_bias(h, b)
    }

    fn same_shape(&self, a: NodeId, b: NodeId, context: &'static str) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::DimensionMismatch {
                context,
                expected: sa.0 * sa.1,
                got: sb.0 * sb.1,
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "add")?;
        let v = self.value(a) + self.value(b);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "sub")?;
        let v = self.value(a) - self.value(b);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let v = if sa == sb {
            self.value(a) * self.value(b)
        } else if sb == (1, 1) {
            self.value(a) * self.value(b)[[0, 0]]
        } else if sa == (1, 1) {
            self.value(b) * self.value(a)[[0, 0]]
        } else {
            return Err(Error::DimensionMismatch {
                context: "element product",
                expected: sa.0 * sa.1,
                got: sb.0 * sb.1,
            });
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let v = self.value(x) * c;
        let rg = self.rg(x);
        self.push(v, Op::Scale(x, c), rg)
    }

    pub fn add_scalar(&mut self, x: NodeId, c: f64) -> NodeId {
        let v = self.value(x) + c;
        let rg = self.rg(x);
        self.push(v, Op::AddScalar(x), rg)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).mapv(|e| e.max(0.0));
        let rg = self.rg(x);
        self.push(v, Op::Relu(x), rg)
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).mapv(f64::tanh);
        let rg = self.rg(x);
        self.push(v, Op::Tanh(x), rg)
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).mapv(f64::exp);
        let rg = self.rg(x);
        self.push(v, Op::Exp(x), rg)
    }

    pub fn log(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).mapv(f64::ln);
        let rg = self.rg(x);
        self.push(v, Op::Log(x), rg)
    }

    pub fn square(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).mapv(|e| e * e);
        let rg = self.rg(x);
        self.push(v, Op::Square(x), rg)
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let v = Array2::from_elem((1, 1), self.value(x).sum());
        let rg = self.rg(x);
        self.push(v, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let m = self.value(x);
        let v = Array2::from_elem((1, 1), m.sum() / m.len() as f64);
        let rg = self.rg(x);
        self.push(v, Op::Mean(x), rg)
    }

    pub fn row_sum(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).sum_axis(Axis(1)).insert_axis(Axis(1));
        let rg = self.rg(x);
        self.push(v, Op::RowSum(x), rg)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let rows = parts.first().map(|&p| self.shape(p).0).unwrap_or(0);
        for &p in parts {
            if self.shape(p).0 != rows {
                return Err(Error::DimensionMismatch {
                    context: "concat rows",
                    expected: rows,
                    got: self.shape(p).0,
                });
            }
        }
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).map_err(|e| Error::InvalidInput(format!("concat: {e}")))?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(v, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let (_, m) = self.shape(x);
        if start >= end || end > m {
            return Err(Error::InvalidInput(format!("column slice {start}..{end} of width {m}")));
        }
        let v = self.value(x).slice(ndarray::s![.., start..end]).to_owned();
        let rg = self.rg(x);
        Ok(self.push(v, Op::SliceCols(x, start, end), rg))
    }

    /// Element-wise minimum. The selection mask is taken from the current
    /// values and enters the tape as a constant, so the gradient flows to
    /// whichever input was smaller.
    pub fn minimum(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "minimum")?;
        let mask = Zip::from(self.value(a))
            .and(self.value(b))
            .map_collect(|&x, &y| if x <= y { 1.0 } else { 0.0 });
        let inv = mask.mapv(|m| 1.0 - m);
        let mask = self.constant(mask);
        let inv = self.constant(inv);
        let pa = self.mul(a, mask)?;
        let pb = self.mul(b, inv)?;
        self.add(pa, pb)
    }

    /// Clamp into `[lo, hi]`; the gradient is zero where clamping applies.
    pub fn clamp(&mut self, x: NodeId, lo: f64, hi: f64) -> Result<NodeId> {
        let inside = self.value(x).mapv(|e| if e >= lo && e <= hi { 1.0 } else { 0.0 });
        let outside = self.value(x).mapv(|e| {
            if e < lo {
                lo
            } else if e > hi {
                hi
            } else {
                0.0
            }
        });
        let inside = self.constant(inside);
        let outside = self.constant(outside);
        let kept = self.mul(x, inside)?;
        self.add(kept, outside)
    }

    /// Gradients of the scalar `loss` with respect to every node that
    /// requires one.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if self.shape(loss) != (1, 1) {
            let (r, c) = self.shape(loss);
            return Err(Error::InvalidInput(format!(
                "backward needs a scalar loss, got a {r}x{c} node"
            )));
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Array2::ones((1, 1)));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        for (g, n) in grads.iter_mut().zip(&self.nodes) {
            if !n.requires_grad {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let mut acc = |id: NodeId, delta: Matrix| {
            if !self.nodes[id.0].requires_grad {
                return;
            }
            match &mut grads[id.0] {
                Some(existing) => *existing += &delta,
                slot @ None => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.rg(*a) {
                    acc(*a, g.dot(&self.value(*b).t()));
                }
                if self.rg(*b) {
                    acc(*b, self.value(*a).t().dot(g));
                }
            }
            Op::AddBias(x, b) => {
                if self.rg(*b) {
                    acc(*b, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                acc(*x, g.clone());
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                if self.rg(*b) {
                    acc(*b, -g);
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                for (target, other, target_val) in [(*a, vb, va), (*b, va, vb)] {
                    if !self.rg(target) {
                        continue;
                    }
                    let full = if other.dim() == g.dim() {
                        g * other
                    } else {
                        g * other[[0, 0]]
                    };
                    if target_val.dim() == (1, 1) && g.dim() != (1, 1) {
                        acc(target, Array2::from_elem((1, 1), full.sum()));
                    } else {
                        acc(target, full);
                    }
                }
            }
            Op::Scale(x, c) => acc(*x, g * *c),
            Op::AddScalar(x) => acc(*x, g.clone()),
            Op::Relu(x) => {
                let d = Zip::from(g)
                    .and(self.value(*x))
                    .map_collect(|&gi, &xi| if xi > 0.0 { gi } else { 0.0 });
                acc(*x, d);
            }
            Op::Tanh(x) => {
                let d = Zip::from(g)
                    .and(&node.value)
                    .map_collect(|&gi, &yi| gi * (1.0 - yi * yi));
                acc(*x, d);
            }
            Op::Exp(x) => acc(*x, g * &node.value),
            Op::Log(x) => acc(*x, g / self.value(*x)),
            Op::Square(x) => acc(*x, g * self.value(*x) * 2.0),
            Op::Sum(x) => acc(*x, Array2::from_elem(self.shape(*x), g[[0, 0]])),
            Op::Mean(x) => {
                let (r, c) = self.shape(*x);
                acc(*x, Array2::from_elem((r, c), g[[0, 0]] / (r * c) as f64));
            }
            Op::RowSum(x) => {
                let (r, c) = self.shape(*x);
                let d = Array2::from_shape_fn((r, c), |(i, _)| g[[i, 0]]);
                acc(*x, d);
            }
            Op::ConcatCols(parts) => {
                let mut col = 0;
                for &p in parts {
                    let w = self.shape(p).1;
                    if self.rg(p) {
                        acc(p, g.slice(ndarray::s![.., col..col + w]).to_owned());
                    }
                    col += w;
                }
            }
            Op::SliceCols(x, start, end) => {
                let (r, c) = self.shape(*x);
                let mut d = Array2::zeros((r, c));
                d.slice_mut(ndarray::s![.., *start..*end]).assign(g);
                acc(*x, d);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn square_gradient() {
        let mut g = Graph::new();
        let theta = g.variable(array![[3.0]]);
        let loss = g.square(theta);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(theta).unwrap()[[0, 0]], 6.0);
    }

    #[test]
    fn dead_relu_has_zero_gradient() {
        let mut g = Graph::new();
        let theta = g.variable(array![[-1.0]]);
        let loss = g.relu(theta);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(theta).unwrap()[[0, 0]], 0.0);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::new();
        let x = g.variable(array![[1.0, 2.0]]);
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut g = Graph::new();
        let x = g.variable(array![[2.0]]);
        let c = g.constant(array![[5.0]]);
        let y = g.mul(x, c).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap()[[0, 0]], 5.0);
        assert!(grads.get(c).is_none());
    }

    #[test]
    fn shared_node_accumulates() {
        // loss = sum(x * x + x) => d/dx = 2x + 1
        let mut g = Graph::new();
        let x = g.variable(array![[1.0, -2.0]]);
        let xx = g.mul(x, x).unwrap();
        let y = g.add(xx, x).unwrap();
        let loss = g.sum(y);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap(), &array![[3.0, -3.0]]);
    }

    #[test]
    fn broadcast_scalar_product() {
        // loss = mean(alpha * v) with alpha 1x1 => d/dalpha = mean(v)
        let mut g = Graph::new();
        let alpha = g.variable(array![[0.5]]);
        let v = g.constant(array![[1.0], [2.0], [6.0]]);
        let p = g.mul(v, alpha).unwrap();
        let loss = g.mean(p);
        let grads = g.backward(loss).unwrap();
        assert!((grads.get(alpha).unwrap()[[0, 0]] - 3.0).abs() < 1e-15);
    }

    #[test]
    fn minimum_and_clamp_route_gradients() {
        let mut g = Graph::new();
        let a = g.variable(array![[1.0, 5.0]]);
        let b = g.variable(array![[2.0, 3.0]]);
        let m = g.minimum(a, b).unwrap();
        assert_eq!(g.value(m), &array![[1.0, 3.0]]);
        let c = g.clamp(a, 0.0, 2.0).unwrap();
        assert_eq!(g.value(c), &array![[1.0, 2.0]]);
        let s = g.add(m, c).unwrap();
        let loss = g.sum(s);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(a).unwrap(), &array![[2.0, 0.0]]);
        assert_eq!(grads.get(b).unwrap(), &array![[0.0, 1.0]]);
    }

    #[test]
    fn concat_and_slice_round_trip_gradients() {
        let mut g = Graph::new();
        let a = g.variable(array![[1.0], [2.0]]);
        let b = g.variable(array![[3.0, 4.0], [5.0, 6.0]]);
        let c = g.concat_cols(&[a, b]).unwrap();
        let right = g.slice_cols(c, 1, 3).unwrap();
        let sq = g.square(right);
        let loss = g.sum(sq);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(a).unwrap(), &array![[0.0], [0.0]]);
        assert_eq!(grads.get(b).unwrap(), &(g.value(b) * 2.0));
    }

    /// Central finite differences on every primitive through a composite
    /// scalar function of two small matrices.
    #[test]
    fn primitives_match_finite_differences() {
        let x0 = array![[0.3, -0.7, 1.1], [0.5, 0.2, -0.4]];
        let w0 = array![[0.2, -0.1], [0.4, 0.3], [-0.5, 0.6]];
        let f = |x: &Matrix, w: &Matrix| -> (f64, Option<(Matrix, Matrix)>) {
            let mut g = Graph::new();
            let xn = g.variable(x.clone());
            let wn = g.variable(w.clone());
            let b = g.constant(array![[0.1, -0.2]]);
            let h = g.affine(xn, wn, b).unwrap();
            let t = g.tanh(h);
            let r = g.relu(h);
            let e = g.exp(t);
            let l = g.add_scalar(e, 1.0);
            let l = g.log(l);
            let sq = g.square(r);
            let p = g.mul(l, sq).unwrap();
            let d = g.sub(p, t).unwrap();
            let rs = g.row_sum(d);
            let s = g.scale(rs, 0.7);
            let loss = g.mean(s);
            let grads = g.backward(loss).unwrap();
            (
                g.scalar(loss),
                Some((grads.get(xn).unwrap().clone(), grads.get(wn).unwrap().clone())),
            )
        };
        let (_, Some((gx, gw))) = f(&x0, &w0) else {
            unreachable!()
        };
        let eps = 1e-6;
        for ((i, j), &analytic) in gx.indexed_iter() {
            let mut xp = x0.clone();
            xp[[i, j]] += eps;
            let mut xm = x0.clone();
            xm[[i, j]] -= eps;
            let fd = (f(&xp, &w0).0 - f(&xm, &w0).0) / (2.0 * eps);
            assert!((fd - analytic).abs() < 1e-8, "x[{i},{j}] {fd} vs {analytic}");
        }
        for ((i, j), &analytic) in gw.indexed_iter() {
            let mut wp = w0.clone();
            wp[[i, j]] += eps;
            let mut wm = w0.clone();
            wm[[i, j]] -= eps;
            let fd = (f(&x0, &wp).0 - f(&x0, &wm).0) / (2.0 * eps);
            assert!((fd - analytic).abs() < 1e-8, "w[{i},{j}] {fd} vs {analytic}");
        }
    }
}
