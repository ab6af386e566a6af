use ndarray::{Array2, Array4, ArrayView2};

use crate::config::LossSpec;
use crate::model::Forward;

/// Probability floor for the tree negative log-likelihood.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossTerms {
    pub total: f64,
    pub cross_entropy: f64,
    pub cluster: f64,
    pub separation: f64,
}

/// Loss value with gradients w.r.t. the class scores and, for the linear
/// head, the squared distances.
#[derive(Debug, Clone)]
pub struct LossOutput {
    pub terms: LossTerms,
    pub grad_class: Array2<f64>,
    pub grad_d2: Option<Array4<f64>>,
}

/// Row-wise `log softmax`.
pub fn log_softmax(logits: ArrayView2<f64>) -> Array2<f64> {
    let mut out = logits.to_owned();
    for mut row in out.rows_mut() {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

/// Mean cross-entropy over logits.
pub fn cross_entropy(logits: ArrayView2<f64>, labels: &[usize]) -> (f64, Array2<f64>) {
    let n = labels.len() as f64;
    let logp = log_softmax(logits);
    let mut grad = logp.mapv(f64::exp);
    let mut loss = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        loss -= logp[[i, y]];
        grad[[i, y]] -= 1.0;
    }
    (loss / n, grad / n)
}

/// Mean negative log-likelihood of class probabilities, floored at [`PROB_FLOOR`].
pub fn nll(probs: ArrayView2<f64>, labels: &[usize]) -> (f64, Array2<f64>) {
    let n = labels.len() as f64;
    let mut grad = Array2::zeros(probs.dim());
    let mut loss = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let p = probs[[i, y]];
        loss -= p.max(PROB_FLOOR).ln();
        if p > PROB_FLOOR {
            grad[[i, y]] = -1.0 / (p * n);
        }
    }
    (loss / n, grad)
}

/// Cross-entropy plus cluster and separation costs.
///
/// The cluster cost is the mean over samples of the smallest squared
/// distance between the sample's latent patches and its own class's
/// prototypes; the separation cost is the same quantity for other classes
/// and enters with a negative sign.
pub fn linear_head_loss(
    fwd: &Forward,
    labels: &[usize],
    classes: &[Option<usize>],
    active: &[bool],
    spec: &LossSpec,
) -> LossOutput {
    let (ce, grad_class) = cross_entropy(fwd.class_scores.view(), labels);
    let d2 = &fwd.similarity.d2;
    let (n, p, h, w) = d2.dim();
    let mut grad_d2 = Array4::zeros(d2.dim());
    let (mut cluster, mut separation) = (0.0, 0.0);
    let (mut n_cluster, mut n_sep) = (0usize, 0usize);
    for (ni, &y) in labels.iter().enumerate() {
        let mut own: Option<(f64, usize, usize, usize)> = None;
        let mut other: Option<(f64, usize, usize, usize)> = None;
        for pi in 0..p {
            if !active[pi] {
                continue;
            }
            let slot = if classes[pi] == Some(y) { &mut own } else { &mut other };
            for yy in 0..h {
                for xx in 0..w {
                    let v = d2[[ni, pi, yy, xx]];
                    if slot.map_or(true, |(b, ..)| v < b) {
                        *slot = Some((v, pi, yy, xx));
                    }
                }
            }
        }
        if let Some((v, pi, yy, xx)) = own {
            cluster += v;
            n_cluster += 1;
            grad_d2[[ni, pi, yy, xx]] += spec.cluster / n as f64;
        }
        if let Some((v, pi, yy, xx)) = other {
            separation += v;
            n_sep += 1;
            grad_d2[[ni, pi, yy, xx]] -= spec.separation / n as f64;
        }
    }
    let cluster = if n_cluster > 0 { cluster / n as f64 } else { 0.0 };
    let separation = if n_sep > 0 { separation / n as f64 } else { 0.0 };
    LossOutput {
        terms: LossTerms {
            total: ce + spec.cluster * cluster - spec.separation * separation,
            cross_entropy: ce,
            cluster,
            separation,
        },
        grad_class,
        grad_d2: Some(grad_d2),
    }
}

pub fn tree_head_loss(fwd: &Forward, labels: &[usize]) -> LossOutput {
    let (loss, grad_class) = nll(fwd.class_scores.view(), labels);
    LossOutput {
        terms: LossTerms {
            total: loss,
            cross_entropy: loss,
            ..LossTerms::default()
        },
        grad_class,
        grad_d2: None,
    }
}

/// Index of the largest score in each row (first one on ties).
pub fn predictions(class_scores: ArrayView2<f64>) -> Vec<usize> {
    class_scores
        .rows()
        .into_iter()
        .map(|r| crate::model::similarity::argmax_first(r.iter()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn cross_entropy_matches_finite_differences() {
        let logits = array![[1.0, -2.0, 0.5], [0.2, 0.1, 3.0]];
        let labels = [2, 0];
        let (_, g) = cross_entropy(logits.view(), &labels);
        let h = 1e-6;
        for ((i, j), gv) in g.indexed_iter() {
            let mut a = logits.clone();
            a[[i, j]] += h;
            let mut b = logits.clone();
            b[[i, j]] -= h;
            let fd = (cross_entropy(a.view(), &labels).0 - cross_entropy(b.view(), &labels).0) / (2.0 * h);
            assert!((fd - gv).abs() < 1e-8);
        }
    }

    #[test]
    fn log_softmax_is_stable() {
        let l = log_softmax(array![[1000.0, 0.0]].view());
        assert!(l.iter().all(|v| v.is_finite()));
        assert!(l[[0, 0]].abs() < 1e-12);
    }

    #[test]
    fn nll_floor_keeps_loss_finite() {
        let (loss, g) = nll(array![[0.0, 1.0]].view(), &[0]);
        assert!((loss + PROB_FLOOR.ln()).abs() < 1e-9);
        assert_eq!(g[[0, 0]], 0.0);
    }
}
