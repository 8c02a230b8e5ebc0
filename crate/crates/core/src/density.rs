//! Particle-based density over latent points and rank-skewed goal sampling.
//!
//! For `n` points in `R^d` the estimate at `s_i` is
//! `f(s_i) = k / (n C_d) * D_k(s_i)^(-d)`, with `D_k` the distance to the
//! `k`-th nearest other point, `k = round(2 n^(1/d))` clamped to `[1, n-1]`
//! and `C_d` the volume of the unit `d`-ball. Everything is kept in log
//! space. Ranks order points by increasing density (rank 1 is the most
//! isolated); goals are drawn with probability proportional to
//! `(1-p)^(rank-1) p`.
//!
//! Density dump format: header `index,log_density,rank`, one row per point.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::fmt::Write as _;

use ndarray::ArrayView2;
use rand::Rng;

use crate::error::{Error, Result};

/// Above this many points the k-d tree is used.
pub const BRUTE_FORCE_LIMIT: usize = 2048;

/// Volume of the unit ball in `R^d`, `pi^(d/2) / Gamma(d/2 + 1)`.
pub fn unit_ball_volume(d: usize) -> Result<f64> {
    if d == 0 {
        return Err(Error::InvalidInput("dimension must be at least 1".into()));
    }
    // C_d = C_{d-2} * 2 pi / d with C_0 = 1, C_1 = 2.
    let mut c = if d.is_multiple_of(2) { 1.0 } else { 2.0 };
    let mut m = if d.is_multiple_of(2) { 2 } else { 3 };
    while m <= d {
        c *= 2.0 * std::f64::consts::PI / m as f64;
        m += 2;
    }
    Ok(c)
}

/// `ln C_d`, accumulated in log space so large `d` does not underflow.
pub fn log_unit_ball_volume(d: usize) -> Result<f64> {
    if d == 0 {
        return Err(Error::InvalidInput("dimension must be at least 1".into()));
    }
    let mut c: f64 = if d.is_multiple_of(2) { 0.0 } else { 2f64.ln() };
    let mut m = if d.is_multiple_of(2) { 2 } else { 3 };
    while m <= d {
        c += (2.0 * std::f64::consts::PI / m as f64).ln();
        m += 2;
    }
    Ok(c)
}

/// Neighbour rank used for `n` points in dimension `d`.
pub fn neighbour_count(n: usize, d: usize) -> usize {
    let raw = 2.0 * (n as f64).powf(1.0 / d as f64);
    let k = (raw + 0.5).floor() as usize;
    k.clamp(1, n.saturating_sub(1).max(1))
}

#[derive(Clone, Debug, PartialEq)]
pub struct DensityTable {
    /// `ln f` per point; `+inf` where `D_k = 0`.
    pub log_density: Vec<f64>,
    /// 1-based rank per point.
    pub rank: Vec<usize>,
    /// Point indices in rank order.
    pub order: Vec<usize>,
    pub k: usize,
    pub n: usize,
    pub dim: usize,
}

impl DensityTable {
    pub fn to_text(&self) -> String {
        let mut s = String::from("index,log_density,rank\n");
        for i in 0..self.n {
            let _ = writeln!(s, "{},{:?},{}", i, self.log_density[i], self.rank[i]);
        }
        s
    }
}

#[inline]
fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn validate(points: ArrayView2<'_, f64>) -> Result<(usize, usize)> {
    let (n, d) = points.dim();
    if n < 2 {
        return Err(Error::InsufficientData(format!(
            "density needs at least 2 points, got {n}"
        )));
    }
    if d == 0 {
        return Err(Error::InvalidInput("points have zero dimension".into()));
    }
    if points.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("density input"));
    }
    Ok((n, d))
}

fn rows(points: ArrayView2<'_, f64>) -> Vec<f64> {
    points.as_standard_layout().iter().copied().collect()
}

/// Squared distance from every point to its `k`-th nearest other point,
/// by exhaustive search.
pub fn kth_sq_distances_brute(points: ArrayView2<'_, f64>, k: usize) -> Result<Vec<f64>> {
    let (n, d) = validate(points)?;
    if k == 0 || k >= n {
        return Err(Error::InvalidInput(format!("k = {k} outside [1, {}]", n - 1)));
    }
    let flat = rows(points);
    let mut buf = Vec::with_capacity(n - 1);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        buf.clear();
        let pi = &flat[i * d..(i + 1) * d];
        for j in (0..n).filter(|&j| j != i) {
            buf.push(sq_dist(pi, &flat[j * d..(j + 1) * d]));
        }
        let (_, kth, _) = buf.select_nth_unstable_by(k - 1, f64::total_cmp);
        out.push(*kth);
    }
    Ok(out)
}

#[derive(Clone, Copy, PartialEq)]
struct MaxDist(f64);

impl Eq for MaxDist {}

impl PartialOrd for MaxDist {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for MaxDist {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0)
    }
}

enum KdNode {
    Leaf {
        start: usize,
        end: usize,
    },
    Split {
        axis: usize,
        value: f64,
        left: Box<KdNode>,
        right: Box<KdNode>,
    },
}

struct KdTree<'a> {
    flat: &'a [f64],
    d: usize,
    idx: Vec<usize>,
    root: KdNode,
}

const LEAF_SIZE: usize = 16;

impl<'a> KdTree<'a> {
    fn build(flat: &'a [f64], d: usize) -> Self {
        let n = flat.len() / d;
        let mut idx: Vec<usize> = (0..n).collect();
        let root = Self::build_node(flat, d, &mut idx, 0);
        Self { flat, d, idx, root }
    }

    fn build_node(flat: &[f64], d: usize, idx: &mut [usize], start: usize) -> KdNode {
        let n = idx.len();
        if n <= LEAF_SIZE {
            return KdNode::Leaf { start, end: start + n };
        }
        let mut best = (0, -1.0);
        for a in 0..d {
            let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
            for &i in idx.iter() {
                let v = flat[i * d + a];
                lo = lo.min(v);
                hi = hi.max(v);
            }
            if hi - lo > best.1 {
                best = (a, hi - lo);
            }
        }
        let axis = best.0;
        if best.1 <= 0.0 {
            return KdNode::Leaf { start, end: start + n };
        }
        let mid = n / 2;
        idx.select_nth_unstable_by(mid, |&x, &y| flat[x * d + axis].total_cmp(&flat[y * d + axis]));
        let value = flat[idx[mid] * d + axis];
        // Left holds coordinates <= value, right holds >= value.
        let (l, r) = idx.split_at_mut(mid);
        KdNode::Split {
            axis,
            value,
            left: Box::new(Self::build_node(flat, d, l, start)),
            right: Box::new(Self::build_node(flat, d, r, start + mid)),
        }
    }

    fn kth(&self, q: usize, k: usize, heap: &mut BinaryHeap<MaxDist>) -> f64 {
        heap.clear();
        self.search(&self.root, q, k, heap);
        heap.peek().expect("k >= 1 neighbours").0
    }

    fn search(&self, node: &KdNode, q: usize, k: usize, heap: &mut BinaryHeap<MaxDist>) {
        let d = self.d;
        let qp = &self.flat[q * d..(q + 1) * d];
        match node {
            KdNode::Leaf { start, end } => {
                for &j in &self.idx[*start..*end] {
                    if j == q {
                        continue;
                    }
                    let dist = sq_dist(qp, &self.flat[j * d..(j + 1) * d]);
                    if heap.len() < k {
                        heap.push(MaxDist(dist));
                    } else if dist < heap.peek().expect("full heap").0 {
                        heap.pop();
                        heap.push(MaxDist(dist));
                    }
                }
            }
            KdNode::Split {
                axis,
                value,
                left,
                right,
            } => {
                let diff = qp[*axis] - value;
                let (near, far) = if diff <= 0.0 { (left, right) } else { (right, left) };
                self.search(near, q, k, heap);
                // Every point across the split differs on `axis` by at least
                // |diff|, and a floating-point sum of squares is never
                // smaller than one of its terms, so this prune is exact.
                if heap.len() < k || diff * diff <= heap.peek().expect("full heap").0 {
                    self.search(far, q, k, heap);
                }
            }
        }
    }
}

/// [`kth_sq_distances_brute`] computed with a k-d tree. The result is
/// bitwise identical.
pub fn kth_sq_distances_tree(points: ArrayView2<'_, f64>, k: usize) -> Result<Vec<f64>> {
    let (n, d) = validate(points)?;
    if k == 0 || k >= n {
        return Err(Error::InvalidInput(format!("k = {k} outside [1, {}]", n - 1)));
    }
    let flat = rows(points);
    let tree = KdTree::build(&flat, d);
    let mut heap = BinaryHeap::with_capacity(k + 1);
    Ok((0..n).map(|q| tree.kth(q, k, &mut heap)).collect())
}

/// Density table from `k`-th neighbour squared distances.
pub fn table_from_kth(kth_sq: &[f64], k: usize, dim: usize) -> Result<DensityTable> {
    let n = kth_sq.len();
    let log_c = log_unit_ball_volume(dim)?;
    let constant = (k as f64).ln() - (n as f64).ln() - log_c;
    let log_density: Vec<f64> = kth_sq
        .iter()
        .map(|&sq| {
            if sq == 0.0 {
                f64::INFINITY
            } else {
                constant - dim as f64 * 0.5 * sq.ln()
            }
        })
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| log_density[a].total_cmp(&log_density[b]).then(a.cmp(&b)));
    let mut rank = vec![0; n];
    for (pos, &i) in order.iter().enumerate() {
        rank[i] = pos + 1;
    }
    Ok(DensityTable {
        log_density,
        rank,
        order,
        k,
        n,
        dim,
    })
}

/// Log-density and ranks for every row of `points`.
pub fn knn_log_density(points: ArrayView2<'_, f64>) -> Result<DensityTable> {
    let (n, d) = validate(points)?;
    let k = neighbour_count(n, d);
    let kth = if n <= BRUTE_FORCE_LIMIT {
        kth_sq_distances_brute(points, k)?
    } else {
        kth_sq_distances_tree(points, k)?
    };
    table_from_kth(&kth, k, d)
}

/// Truncated geometric distribution over ranks `1..=n`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GoalSampler {
    p: f64,
}

impl GoalSampler {
    pub fn new(p: f64) -> Result<Self> {
        if !(p > 0.0 && p <= 1.0) {
            return Err(Error::Config(format!(
                "geometric parameter must lie in (0, 1], got {p}"
            )));
        }
        Ok(Self { p })
    }

    pub fn p(&self) -> f64 {
        self.p
    }

    /// `P(R = r)` for `r` in `1..=n`.
    pub fn rank_probability(&self, r: usize, n: usize) -> f64 {
        if r == 0 || r > n {
            return 0.0;
        }
        if self.p == 1.0 {
            return if r == 1 { 1.0 } else { 0.0 };
        }
        let lq = (-self.p).ln_1p();
        let norm = -(n as f64 * lq).exp_m1();
        ((r - 1) as f64 * lq).exp() * self.p / norm
    }

    /// Draw a rank in `1..=n` by inverting the truncated CDF.
    pub fn sample_rank<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> usize {
        assert!(n >= 1, "cannot sample from zero ranks");
        if self.p == 1.0 || n == 1 {
            return 1;
        }
        let lq = (-self.p).ln_1p();
        let mass = -(n as f64 * lq).exp_m1();
        let u: f64 = rng.random();
        let r = ((-u * mass).ln_1p() / lq).ceil();
        (r.max(1.0) as usize).min(n)
    }

    /// Index of the sampled point in `table`.
    pub fn sample<R: Rng + ?Sized>(&self, table: &DensityTable, rng: &mut R) -> usize {
        table.order[self.sample_rank(table.n, rng) - 1]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn ball_volumes() {
        assert_eq!(unit_ball_volume(1).unwrap(), 2.0);
        assert!((unit_ball_volume(2).unwrap() - std::f64::consts::PI).abs() < 1e-15);
        assert!((unit_ball_volume(3).unwrap() - 4.0 * std::f64::consts::PI / 3.0).abs() < 1e-14);
        assert!(unit_ball_volume(0).is_err());
        for d in 1..30 {
            let a = unit_ball_volume(d).unwrap().ln();
            assert!((a - log_unit_ball_volume(d).unwrap()).abs() < 1e-12);
        }
    }

    #[test]
    fn k_rounding() {
        assert_eq!(neighbour_count(4, 1), 3);
        assert_eq!(neighbour_count(100_000, 16), 4);
        assert_eq!(neighbour_count(2, 16), 1);
        assert_eq!(neighbour_count(39, 2), 12);
        // 2 * 5.0625^(1/2) = 4.5 rounds up
        assert_eq!(neighbour_count(81, 4), 6);
        assert_eq!(neighbour_count(1000, 2), 63);
    }

    #[test]
    fn four_points_on_a_line() {
        let pts = array![[0.0], [1.0], [2.0], [10.0]];
        let t = knn_log_density(pts.view()).unwrap();
        assert_eq!(t.k, 3);
        let f0 = t.log_density[0].exp();
        assert!((f0 - 0.0375).abs() < 1e-15);
        assert!((t.log_density[1].exp() - 3.0 / 8.0 / 9.0).abs() < 1e-15);
        assert!((t.log_density[2].exp() - 3.0 / 8.0 / 8.0).abs() < 1e-15);
        assert_eq!(t.log_density[0], t.log_density[3]);
        assert_eq!(t.rank, vec![1, 3, 4, 2]);
    }

    #[test]
    fn identical_points_tie_by_index() {
        let pts = Array2::from_elem((5, 3), 1.5);
        let t = knn_log_density(pts.view()).unwrap();
        assert!(t.log_density.iter().all(|v| *v == f64::INFINITY));
        assert_eq!(t.rank, vec![1, 2, 3, 4, 5]);
    }

    #[test]
    fn input_errors() {
        assert!(knn_log_density(array![[1.0]].view()).is_err());
        assert!(knn_log_density(array![[1.0], [f64::NAN]].view()).is_err());
    }

    #[test]
    fn tree_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for &(n, d) in &[(300, 1), (500, 2), (400, 4), (300, 16), (40, 3)] {
            let pts = Array2::from_shape_simple_fn((n, d), || rng.random_range(-2.0..2.0));
            for k in [1, 2, neighbour_count(n, d)] {
                assert_eq!(
                    kth_sq_distances_tree(pts.view(), k).unwrap(),
                    kth_sq_distances_brute(pts.view(), k).unwrap(),
                    "n={n} d={d} k={k}"
                );
            }
        }
        // Heavy duplication exercises zero-spread leaves.
        let pts = Array2::from_shape_fn((200, 2), |(i, j)| ((i / 50) + j) as f64);
        assert_eq!(
            kth_sq_distances_tree(pts.view(), 60).unwrap(),
            kth_sq_distances_brute(pts.view(), 60).unwrap()
        );
    }

    #[test]
    fn two_point_sampler() {
        let s = GoalSampler::new(0.5).unwrap();
        assert!((s.rank_probability(1, 2) - 2.0 / 3.0).abs() < 1e-15);
        assert!((s.rank_probability(2, 2) - 1.0 / 3.0).abs() < 1e-15);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let draws = 60_000;
        let ones = (0..draws).filter(|_| s.sample_rank(2, &mut rng) == 1).count();
        let p = 2.0 / 3.0;
        let sigma = (p * (1.0 - p) / draws as f64).sqrt();
        assert!((ones as f64 / draws as f64 - p).abs() < 3.0 * sigma);
    }

    #[test]
    fn p_one_always_picks_rank_one() {
        let s = GoalSampler::new(1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        assert!((0..1000).all(|_| s.sample_rank(50, &mut rng) == 1));
        let t = knn_log_density(array![[0.0], [1.0], [2.0], [10.0]].view()).unwrap();
        assert_eq!(s.sample(&t, &mut rng), 0);
        assert!(GoalSampler::new(0.0).is_err());
        assert!(GoalSampler::new(1.5).is_err());
    }

    #[test]
    fn probabilities_sum_to_one() {
        let s = GoalSampler::new(0.05).unwrap();
        for n in [1, 2, 10, 1000] {
            let total: f64 = (1..=n).map(|r| s.rank_probability(r, n)).sum();
            assert!((total - 1.0).abs() < 1e-12, "n={n}: {total}");
        }
    }

    #[test]
    fn sampled_ranks_stay_in_range() {
        let s = GoalSampler::new(0.3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for n in [1, 3, 7] {
            for _ in 0..2000 {
                let r = s.sample_rank(n, &mut rng);
                assert!((1..=n).contains(&r));
            }
        }
    }

    #[test]
    fn dump_has_one_row_per_point() {
        let t = knn_log_density(array![[0.0], [1.0], [3.0]].view()).unwrap();
        let text = t.to_text();
        assert_eq!(text.lines().count(), 4);
        assert!(text.starts_with("index,log_density,rank\n0,"));
    }
}
