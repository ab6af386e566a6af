use ndarray::{Array2, Array4, ArrayView2, ArrayView4, Axis};
use serde::{Deserialize, Serialize};

use crate::config::SimilarityKind;
use crate::error::{Error, Result};

/// Operation variants: `Compatibility` reproduces the legacy operation order
/// (expanded-form distances clamped at zero, log of a ratio); `Default` uses
/// the direct difference form and a split logarithm.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Default,
    Compatibility,
}

impl Mode {
    pub fn from_flag(compatibility: bool) -> Self {
        if compatibility {
            Mode::Compatibility
        } else {
            Mode::Default
        }
    }
}

/// Similarity at every latent location and its spatial maximum.
#[derive(Debug, Clone)]
pub struct SimilarityMap {
    /// Squared distances `[N, P, H, W]`.
    pub d2: Array4<f64>,
    /// Similarities `[N, P, H, W]`.
    pub data: Array4<f64>,
    /// `[N, P]` spatial maxima.
    pub scores: Array2<f64>,
    /// Flat spatial index `h * W + w` of each maximum (lowest index on ties).
    pub argmax: Array2<usize>,
}

impl SimilarityMap {
    pub fn argmax_hw(&self, n: usize, p: usize) -> (usize, usize) {
        let w = self.data.dim().3;
        let i = self.argmax[[n, p]];
        (i / w, i % w)
    }
}

/// Squared L2 distance between every latent vector and every prototype.
pub fn squared_distances(latent: ArrayView4<f64>, prototypes: ArrayView2<f64>, mode: Mode) -> Result<Array4<f64>> {
    let (n, d, h, w) = latent.dim();
    let (p, pd) = prototypes.dim();
    if d != pd {
        return Err(Error::ShapeMismatch(format!(
            "latent dimension {d} differs from prototype dimension {pd}"
        )));
    }
    let hw = h * w;
    // [N*H*W, D]
    let z = latent
        .permuted_axes([0, 2, 3, 1])
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((n * hw, d))
        .unwrap();
    let mut out = Array4::<f64>::zeros((n, p, h, w));
    match mode {
        Mode::Default => {
            for ni in 0..n {
                for pi in 0..p {
                    let proto = prototypes.row(pi);
                    for loc in 0..hw {
                        let zr = z.row(ni * hw + loc);
                        let mut acc = 0.0;
                        for (a, b) in zr.iter().zip(proto.iter()) {
                            let diff = a - b;
                            acc += diff * diff;
                        }
                        out[[ni, pi, loc / w, loc % w]] = acc;
                    }
                }
            }
        }
        Mode::Compatibility => {
            let zz = z.map_axis(Axis(1), |r| r.dot(&r));
            let pp = prototypes.map_axis(Axis(1), |r| r.dot(&r));
            let zp = z.dot(&prototypes.t());
            for ni in 0..n {
                for pi in 0..p {
                    for loc in 0..hw {
                        let row = ni * hw + loc;
                        let v = zz[row] - 2.0 * zp[[row, pi]] + pp[pi];
                        out[[ni, pi, loc / w, loc % w]] = v.max(0.0);
                    }
                }
            }
        }
    }
    Ok(out)
}

pub fn similarity_value(d2: f64, kind: SimilarityKind, epsilon: f64, mode: Mode) -> f64 {
    match (kind, mode) {
        (SimilarityKind::ProtopnetLog, Mode::Compatibility) => ((d2 + 1.0) / (d2 + epsilon)).ln(),
        (SimilarityKind::ProtopnetLog, Mode::Default) => d2.ln_1p() - (d2 + epsilon).ln(),
        (SimilarityKind::ExpNegL2, _) => (-d2).exp(),
    }
}

/// Derivative of the similarity w.r.t. the squared distance.
pub fn similarity_slope(d2: f64, kind: SimilarityKind, epsilon: f64) -> f64 {
    match kind {
        SimilarityKind::ProtopnetLog => 1.0 / (d2 + 1.0) - 1.0 / (d2 + epsilon),
        SimilarityKind::ExpNegL2 => -(-d2).exp(),
    }
}

/// The similarity of a vector with itself.
pub fn max_similarity(kind: SimilarityKind, epsilon: f64) -> f64 {
    match kind {
        SimilarityKind::ProtopnetLog => (1.0 / epsilon).ln(),
        SimilarityKind::ExpNegL2 => 1.0,
    }
}

/// Index of the largest value, first one on ties.
pub fn argmax_first<'a>(values: impl IntoIterator<Item = &'a f64>) -> usize {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (i, &v) in values.into_iter().enumerate() {
        if v > best_v {
            best = i;
            best_v = v;
        }
    }
    best
}

pub fn similarity(
    latent: ArrayView4<f64>,
    prototypes: ArrayView2<f64>,
    kind: SimilarityKind,
    epsilon: f64,
    mode: Mode,
) -> Result<SimilarityMap> {
    let d2 = squared_distances(latent, prototypes, mode)?;
    let data = d2.mapv(|v| similarity_value(v, kind, epsilon, mode));
    let (n, p, _, _) = data.dim();
    let mut scores = Array2::zeros((n, p));
    let mut argmax = Array2::zeros((n, p));
    for ni in 0..n {
        for pi in 0..p {
            let plane = data.slice(ndarray::s![ni, pi, .., ..]);
            let i = argmax_first(plane.iter());
            argmax[[ni, pi]] = i;
            scores[[ni, pi]] = *plane.iter().nth(i).unwrap();
        }
    }
    Ok(SimilarityMap {
        d2,
        data,
        scores,
        argmax,
    })
}

/// Backpropagate a gradient on the squared distances to latent vectors and prototypes.
pub fn distance_backward(
    latent: ArrayView4<f64>,
    prototypes: ArrayView2<f64>,
    d2: &Array4<f64>,
    grad_d2: &Array4<f64>,
    mode: Mode,
) -> (Array4<f64>, Array2<f64>) {
    let (n, d, h, w) = latent.dim();
    let p = prototypes.dim().0;
    let mut g_latent = Array4::<f64>::zeros((n, d, h, w));
    let mut g_protos = Array2::<f64>::zeros((p, d));
    for ((ni, pi, y, x), &g) in grad_d2.indexed_iter() {
        // The clamp in compatibility mode has zero slope where it is active.
        if g == 0.0 || (mode == Mode::Compatibility && d2[[ni, pi, y, x]] <= 0.0) {
            continue;
        }
        for di in 0..d {
            let diff = latent[[ni, di, y, x]] - prototypes[[pi, di]];
            g_latent[[ni, di, y, x]] += 2.0 * g * diff;
            g_protos[[pi, di]] -= 2.0 * g * diff;
        }
    }
    (g_latent, g_protos)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::repro::Rng;
    use rand::{Rng as _, SeedableRng};

    #[test]
    fn zero_distance_log_similarity() {
        for mode in [Mode::Default, Mode::Compatibility] {
            let s = similarity_value(0.0, SimilarityKind::ProtopnetLog, 1e-4, mode);
            assert!((s - 9.210340371976184).abs() < 1e-12);
        }
        assert_eq!(similarity_value(0.0, SimilarityKind::ExpNegL2, 1e-4, Mode::Default), 1.0);
    }

    #[test]
    fn similarity_decreases_with_distance() {
        let mut rng = Rng::seed_from_u64(5);
        for kind in [SimilarityKind::ProtopnetLog, SimilarityKind::ExpNegL2] {
            let mut d2: Vec<f64> = (0..200).map(|_| rng.gen_range(0.0..20.0)).collect();
            d2.sort_by(f64::total_cmp);
            let s: Vec<f64> = d2
                .iter()
                .map(|&v| similarity_value(v, kind, 1e-4, Mode::Default))
                .collect();
            assert!(s.windows(2).all(|w| w[0] >= w[1]));
        }
    }

    #[test]
    fn modes_agree() {
        let mut rng = Rng::seed_from_u64(6);
        let latent = Array4::from_shape_fn((2, 5, 3, 3), |_| rng.gen::<f64>());
        let protos = Array2::from_shape_fn((4, 5), |_| rng.gen::<f64>());
        let a = similarity(latent.view(), protos.view(), SimilarityKind::ProtopnetLog, 1e-4, Mode::Default).unwrap();
        let b = similarity(latent.view(), protos.view(), SimilarityKind::ProtopnetLog, 1e-4, Mode::Compatibility).unwrap();
        for (x, y) in a.data.iter().zip(b.data.iter()) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn argmax_prefers_first() {
        assert_eq!(argmax_first(&[1.0, 3.0, 3.0, 2.0]), 1);
    }
}
