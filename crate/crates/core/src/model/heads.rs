//! Decision layers: a linear layer over similarity scores, and a soft binary
//! tree routing on them.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct LinearHead {
    /// `[K, P]`
    pub weights: Array2<f64>,
}

impl LinearHead {
    /// +1 on each prototype's own class, −0.5 elsewhere.
    pub fn init(num_classes: usize, class_of: &[usize]) -> Self {
        let weights = Array2::from_shape_fn((num_classes, class_of.len()), |(k, p)| {
            if class_of[p] == k {
                1.0
            } else {
                -0.5
            }
        });
        LinearHead { weights }
    }

    fn check(&self, scores: &ArrayView2<f64>) -> Result<()> {
        if scores.dim().1 != self.weights.dim().1 {
            return Err(Error::ShapeMismatch(format!(
                "linear head expects {} prototypes, got {}",
                self.weights.dim().1,
                scores.dim().1
            )));
        }
        Ok(())
    }

    /// `scores · weightsᵀ`, ignoring inactive prototypes.
    pub fn forward(&self, scores: ArrayView2<f64>, active: &[bool]) -> Result<Array2<f64>> {
        self.check(&scores)?;
        if active.iter().all(|a| *a) {
            return Ok(scores.dot(&self.weights.t()));
        }
        let mut masked = scores.to_owned();
        for (p, a) in active.iter().enumerate() {
            if !a {
                masked.column_mut(p).fill(0.0);
            }
        }
        Ok(masked.dot(&self.weights.t()))
    }

    /// Gradients w.r.t. scores and weights.
    pub fn backward(&self, scores: ArrayView2<f64>, grad_out: ArrayView2<f64>, active: &[bool]) -> (Array2<f64>, Array2<f64>) {
        let mut masked = scores.to_owned();
        for (p, a) in active.iter().enumerate() {
            if !a {
                masked.column_mut(p).fill(0.0);
            }
        }
        let mut g_scores = grad_out.dot(&self.weights);
        for (p, a) in active.iter().enumerate() {
            if !a {
                g_scores.column_mut(p).fill(0.0);
            }
        }
        let g_weights = grad_out.t().dot(&masked);
        (g_scores, g_weights)
    }
}

/// Soft decision tree in heap layout: node `j` has children `2j+1` (left)
/// and `2j+2` (right); internal nodes are `0 .. 2^depth - 1`, leaf `l` is
/// node `2^depth - 1 + l`, leaves numbered left to right.
///
/// At internal node `j` a sample goes right with probability equal to the
/// similarity score of prototype `node_to_prototype[j]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TreeHead {
    pub depth: usize,
    /// `[2^depth, K]`; leaf distributions are their row-wise softmax.
    pub leaf_logits: Array2<f64>,
    pub node_to_prototype: Vec<usize>,
    /// Per heap node, whether pruning removed it.
    pub removed: Vec<bool>,
}

/// Pruning/structure state that is not a trainable tensor.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TreeStructure {
    pub node_to_prototype: Vec<usize>,
    pub removed: Vec<bool>,
}

impl TreeHead {
    /// Uniform leaves, identity node map.
    pub fn init(depth: usize, num_classes: usize) -> Self {
        let leaves = 1usize << depth;
        TreeHead {
            depth,
            leaf_logits: Array2::zeros((leaves, num_classes)),
            node_to_prototype: (0..leaves - 1).collect(),
            removed: vec![false; 2 * leaves - 1],
        }
    }

    pub fn num_internal(&self) -> usize {
        (1usize << self.depth) - 1
    }

    pub fn num_leaves(&self) -> usize {
        1usize << self.depth
    }

    pub fn structure(&self) -> TreeStructure {
        TreeStructure {
            node_to_prototype: self.node_to_prototype.clone(),
            removed: self.removed.clone(),
        }
    }

    pub fn set_structure(&mut self, s: TreeStructure) -> Result<()> {
        let mut seen = vec![false; self.num_internal()];
        if s.node_to_prototype.len() != self.num_internal() || s.removed.len() != 2 * self.num_leaves() - 1 {
            return Err(Error::ShapeMismatch("tree structure does not match depth".into()));
        }
        for &p in &s.node_to_prototype {
            if p >= seen.len() || std::mem::replace(&mut seen[p], true) {
                return Err(Error::ShapeMismatch("node_to_prototype is not a bijection".into()));
            }
        }
        self.node_to_prototype = s.node_to_prototype;
        self.removed = s.removed;
        Ok(())
    }

    /// Softmax of each leaf's logits.
    pub fn leaf_distributions(&self) -> Array2<f64> {
        let mut out = self.leaf_logits.clone();
        for mut row in out.rows_mut() {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|v| (v - m).exp());
            let s = row.sum();
            row /= s;
        }
        out
    }

    /// Right-branch probability at internal node `j`; `None` when a removed
    /// child forces the route.
    fn route(&self, j: usize, scores: &[f64]) -> (f64, bool) {
        if self.removed[2 * j + 1] {
            (1.0, true)
        } else if self.removed[2 * j + 2] {
            (0.0, true)
        } else {
            (scores[self.node_to_prototype[j]], false)
        }
    }

    /// Whether internal node `j` still routes on its prototype.
    pub fn node_active(&self, j: usize) -> bool {
        !self.removed[j] && !self.removed[2 * j + 1] && !self.removed[2 * j + 2]
    }

    /// Reach probability of every heap node for one sample.
    fn reach(&self, scores: &[f64]) -> Vec<f64> {
        let total = 2 * self.num_leaves() - 1;
        let mut mu = vec![0.0; total];
        mu[0] = 1.0;
        for j in 0..self.num_internal() {
            let (r, _) = self.route(j, scores);
            mu[2 * j + 1] = mu[j] * (1.0 - r);
            mu[2 * j + 2] = mu[j] * r;
        }
        mu
    }

    /// Probability of reaching each leaf, left to right.
    pub fn path_probabilities(&self, scores: &[f64]) -> Vec<f64> {
        let mu = self.reach(scores);
        mu[self.num_internal()..].to_vec()
    }

    fn check(&self, scores: &ArrayView2<f64>) -> Result<()> {
        if scores.dim().1 != self.num_internal() {
            return Err(Error::ShapeMismatch(format!(
                "tree head expects {} prototypes, got {}",
                self.num_internal(),
                scores.dim().1
            )));
        }
        if let Some(v) = scores.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::ValueOutOfRange(format!(
                "tree routing score {v} outside [0, 1]"
            )));
        }
        Ok(())
    }

    /// Mixture of leaf distributions weighted by path probability.
    pub fn forward(&self, scores: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check(&scores)?;
        let dist = self.leaf_distributions();
        let (n, k) = (scores.dim().0, dist.dim().1);
        let mut out = Array2::zeros((n, k));
        for ni in 0..n {
            let row = scores.row(ni).to_vec();
            let pi = self.path_probabilities(&row);
            let mut o = out.row_mut(ni);
            for (l, &p) in pi.iter().enumerate() {
                if p != 0.0 {
                    o.scaled_add(p, &dist.row(l));
                }
            }
        }
        Ok(out)
    }

    /// Gradients w.r.t. routing scores and leaf logits.
    pub fn backward(&self, scores: ArrayView2<f64>, grad_out: ArrayView2<f64>) -> (Array2<f64>, Array2<f64>) {
        let dist = self.leaf_distributions();
        let internal = self.num_internal();
        let mut g_scores = Array2::zeros(scores.dim());
        let mut g_logits = Array2::zeros(self.leaf_logits.dim());
        for ni in 0..scores.dim().0 {
            let row = scores.row(ni).to_vec();
            let g = grad_out.row(ni);
            let mu = self.reach(&row);
            // Bottom-up conditional values: V_leaf = dL/dπ_leaf.
            let mut v = vec![0.0; mu.len()];
            for l in 0..self.num_leaves() {
                let d = dist.row(l);
                let gp: f64 = d.dot(&g);
                v[internal + l] = gp;
                let pi = mu[internal + l];
                if pi != 0.0 {
                    // d softmax: σ_j (g_j − Σ_k σ_k g_k), scaled by path probability.
                    for (j, &s) in d.iter().enumerate() {
                        g_logits[[l, j]] += pi * s * (g[j] - gp);
                    }
                }
            }
            for j in (0..internal).rev() {
                let (r, forced) = self.route(j, &row);
                v[j] = r * v[2 * j + 2] + (1.0 - r) * v[2 * j + 1];
                if !forced {
                    g_scores[[ni, self.node_to_prototype[j]]] += mu[j] * (v[2 * j + 2] - v[2 * j + 1]);
                }
            }
        }
        (g_scores, g_logits)
    }

    /// Derivative-free leaf update: each leaf distribution becomes the
    /// normalized sum over the batch of `onehot(y) ⊙ σ_leaf ⊙ π_leaf / ŷ_y`.
    pub fn leaf_em_update(&mut self, scores: ArrayView2<f64>, labels: &[usize], class_scores: ArrayView2<f64>) {
        let dist = self.leaf_distributions();
        let mut acc = Array2::<f64>::zeros(dist.dim());
        for (ni, &y) in labels.iter().enumerate() {
            let row = scores.row(ni).to_vec();
            let pi = self.path_probabilities(&row);
            let yhat = class_scores[[ni, y]].max(1e-12);
            for (l, &p) in pi.iter().enumerate() {
                acc[[l, y]] += dist[[l, y]] * p / yhat;
            }
        }
        for (l, row) in acc.rows().into_iter().enumerate() {
            let s = row.sum();
            if s > 0.0 {
                for (k, v) in row.iter().enumerate() {
                    self.leaf_logits[[l, k]] = (v / s).max(1e-12).ln();
                }
            }
        }
    }

    /// Prototype indices whose node still routes.
    pub fn active_prototypes(&self) -> Vec<bool> {
        let mut active = vec![false; self.num_internal()];
        for j in 0..self.num_internal() {
            if self.node_active(j) {
                active[self.node_to_prototype[j]] = true;
            }
        }
        active
    }

    /// Remove every subtree whose leaves all have maximum class probability
    /// below `threshold`; the parent then routes straight to the sibling.
    /// Returns the number of subtrees removed.
    pub fn prune(&mut self, threshold: f64) -> Result<usize> {
        let dist = self.leaf_distributions();
        let internal = self.num_internal();
        let total = 2 * self.num_leaves() - 1;
        // weak[j]: every (non-removed) leaf under j is below the threshold.
        let mut weak = vec![false; total];
        for j in (0..total).rev() {
            weak[j] = if j >= internal {
                let m = dist.row(j - internal).iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                m < threshold
            } else {
                weak[2 * j + 1] && weak[2 * j + 2]
            };
        }
        if weak[0] {
            return Err(Error::AllPruned);
        }
        let mut removed = 0;
        let mut stack = vec![0usize];
        while let Some(j) = stack.pop() {
            if j >= internal || self.removed[j] {
                continue;
            }
            for child in [2 * j + 1, 2 * j + 2] {
                if weak[child] && !self.removed[child] {
                    self.remove_subtree(child);
                    removed += 1;
                } else {
                    stack.push(child);
                }
            }
        }
        Ok(removed)
    }

    fn remove_subtree(&mut self, root: usize) {
        let mut stack = vec![root];
        while let Some(j) = stack.pop() {
            if j >= self.removed.len() {
                continue;
            }
            self.removed[j] = true;
            stack.push(2 * j + 1);
            stack.push(2 * j + 2);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::repro::Rng;
    use ndarray::array;
    use rand::{Rng as _, SeedableRng};

    #[test]
    fn linear_init_pattern() {
        let class_of: Vec<usize> = (0..20).map(|p| p / 2).collect();
        let head = LinearHead::init(10, &class_of);
        assert_eq!(head.weights.dim(), (10, 20));
        assert_eq!(head.weights.iter().filter(|w| **w == 1.0).count(), 20);
        assert_eq!(head.weights.iter().filter(|w| **w == -0.5).count(), 180);
    }

    #[test]
    fn linear_identity_and_zero() {
        let head = LinearHead {
            weights: Array2::eye(3),
        };
        let s = array![[0.2, 0.5, 0.9]];
        assert_eq!(head.forward(s.view(), &[true; 3]).unwrap(), s);
        let z = Array2::zeros((2, 3));
        assert_eq!(head.forward(z.view(), &[true; 3]).unwrap(), Array2::<f64>::zeros((2, 3)));
    }

    #[test]
    fn half_scores_average_leaves() {
        let mut tree = TreeHead::init(2, 3);
        let mut rng = Rng::seed_from_u64(2);
        tree.leaf_logits.mapv_inplace(|_| rng.gen_range(-2.0..2.0));
        let out = tree.forward(Array2::from_elem((1, 3), 0.5).view()).unwrap();
        let mean = tree.leaf_distributions().mean_axis(ndarray::Axis(0)).unwrap();
        for (a, b) in out.row(0).iter().zip(mean.iter()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn ones_route_to_rightmost_leaf() {
        let mut tree = TreeHead::init(3, 4);
        let mut rng = Rng::seed_from_u64(3);
        tree.leaf_logits.mapv_inplace(|_| rng.gen_range(-2.0..2.0));
        let out = tree.forward(Array2::from_elem((1, 7), 1.0).view()).unwrap();
        assert_eq!(out.row(0), tree.leaf_distributions().row(7));
    }

    #[test]
    fn out_of_range_scores_rejected() {
        let tree = TreeHead::init(1, 2);
        assert!(matches!(
            tree.forward(array![[1.5]].view()),
            Err(Error::ValueOutOfRange(_))
        ));
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = Rng::seed_from_u64(4);
        let mut tree = TreeHead::init(3, 3);
        tree.leaf_logits.mapv_inplace(|_| rng.gen_range(-1.0..1.0));
        let scores = Array2::from_shape_fn((2, 7), |_| rng.gen_range(0.1..0.9));
        let g = Array2::from_shape_fn((2, 3), |_| rng.gen_range(-1.0..1.0));
        let loss = |t: &TreeHead, s: &Array2<f64>| (t.forward(s.view()).unwrap() * &g).sum();
        let (gs, gl) = tree.backward(scores.view(), g.view());
        let h = 1e-6;
        for idx in [(0, 0), (1, 4), (0, 6)] {
            let mut sp = scores.clone();
            sp[idx] += h;
            let mut sm = scores.clone();
            sm[idx] -= h;
            let fd = (loss(&tree, &sp) - loss(&tree, &sm)) / (2.0 * h);
            assert!((fd - gs[idx]).abs() < 1e-7);
        }
        for idx in [(0, 0), (5, 2)] {
            let mut tp = tree.clone();
            tp.leaf_logits[idx] += h;
            let mut tm = tree.clone();
            tm.leaf_logits[idx] -= h;
            let fd = (loss(&tp, &scores) - loss(&tm, &scores)) / (2.0 * h);
            assert!((fd - gl[idx]).abs() < 1e-7);
        }
    }

    #[test]
    fn zero_threshold_prunes_nothing() {
        let mut tree = TreeHead::init(3, 2);
        assert_eq!(tree.prune(0.0).unwrap(), 0);
        assert!(tree.active_prototypes().iter().all(|a| *a));
    }

    #[test]
    fn all_weak_refuses() {
        let mut tree = TreeHead::init(2, 128);
        assert!(matches!(tree.prune(0.01), Err(Error::AllPruned)));
    }
}
