//! Explanation-quality benchmarks: local and dual perturbation drops, and
//! the hit- and energy-based pointing game.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array2, Array3, ArrayView2, Axis};
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::attribution::{self, AttributionMap};
use crate::config::{AttributionSpec, PerturbationKind, VizSpec};
use crate::data::{hsv_to_rgb, Dataset, Pipeline};
use crate::error::{Error, Result};
use crate::model::similarity::argmax_first;
use crate::model::CbrModel;
use crate::repro::{self, ReproContext, Rng};

pub fn parse_kind(name: &str) -> Result<PerturbationKind> {
    PerturbationKind::from_name(name).ok_or_else(|| Error::UnknownKind(name.to_string()))
}

/// Mask of the `⌈q·H·W⌉` (at least one) highest-valued pixels, ties to the
/// lowest row-major index.
pub fn relevance_mask(map: ArrayView2<f64>, q: f64) -> Result<Array2<bool>> {
    if !(q > 0.0 && q < 1.0) {
        return Err(Error::ValueOutOfRange(format!("mask fraction q = {q} must lie in (0, 1)")));
    }
    let (h, w) = map.dim();
    let k = ((q * (h * w) as f64).ceil() as usize).clamp(1, h * w);
    let values: Vec<f64> = map.iter().cloned().collect();
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    let mut mask = Array2::from_elem((h, w), false);
    for &i in &order[..k] {
        mask[[i / w, i % w]] = true;
    }
    Ok(mask)
}

/// Apply `kind` at pixels where `mask` holds; `image` is `[3, H, W]` in `[0, 1]`.
///
/// Noise is drawn for every pixel in row-major order whatever the mask,
/// so perturbing complementary masks with clones of one generator composes
/// to the global perturbation.
pub fn perturb(
    image: &Array3<f64>,
    mask: &Array2<bool>,
    kind: PerturbationKind,
    magnitude: f64,
    rng: &mut Rng,
) -> Result<Array3<f64>> {
    let (c, h, w) = image.dim();
    if mask.dim() != (h, w) || c != 3 {
        return Err(Error::ShapeMismatch(format!(
            "mask {:?} does not fit image {:?}",
            mask.dim(),
            image.dim()
        )));
    }
    let mut out = image.clone();
    match kind {
        PerturbationKind::HueShift => {
            for ((y, x), &m) in mask.indexed_iter() {
                if m {
                    let rgb = hue_rotate([image[[0, y, x]], image[[1, y, x]], image[[2, y, x]]], magnitude);
                    for k in 0..3 {
                        out[[k, y, x]] = rgb[k];
                    }
                }
            }
        }
        PerturbationKind::GaussianBlur => {
            let blurred = gaussian_blur(image, magnitude);
            for ((y, x), &m) in mask.indexed_iter() {
                if m {
                    for k in 0..3 {
                        out[[k, y, x]] = blurred[[k, y, x]];
                    }
                }
            }
        }
        PerturbationKind::GaussianNoise => {
            let noise = Array3::from_shape_simple_fn((c, h, w), || StandardNormal.sample(rng));
            for ((k, y, x), v) in out.indexed_iter_mut() {
                if mask[[y, x]] {
                    let n: f64 = noise[[k, y, x]];
                    *v = (*v + magnitude * n).clamp(0.0, 1.0);
                }
            }
        }
        PerturbationKind::Brightness => {
            for ((_, y, x), v) in out.indexed_iter_mut() {
                if mask[[y, x]] {
                    *v = (*v * (1.0 + magnitude)).clamp(0.0, 1.0);
                }
            }
        }
    }
    Ok(out)
}

/// Rotate the hue of one RGB pixel by `degrees`.
pub fn hue_rotate(rgb: [f64; 3], degrees: f64) -> [f64; 3] {
    let max = rgb.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = rgb.iter().cloned().fold(f64::INFINITY, f64::min);
    let chroma = max - min;
    if chroma == 0.0 || degrees.rem_euclid(360.0) == 0.0 {
        return rgb;
    }
    let [r, g, b] = rgb;
    let sector = if max == r {
        ((g - b) / chroma).rem_euclid(6.0)
    } else if max == g {
        (b - r) / chroma + 2.0
    } else {
        (r - g) / chroma + 4.0
    };
    let out = hsv_to_rgb(sector * 60.0 + degrees, chroma / max, max);
    out.map(|v| v.clamp(0.0, 1.0))
}

/// Separable Gaussian blur with radius `⌈3σ⌉` and replicated edges.
pub fn gaussian_blur(image: &Array3<f64>, sigma: f64) -> Array3<f64> {
    if sigma <= 0.0 {
        return image.clone();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let weights: Vec<f64> = (-radius..=radius).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = weights.iter().sum();
    let weights: Vec<f64> = weights.iter().map(|w| w / total).collect();
    let (c, h, w) = image.dim();
    let at = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    let tmp = Array3::from_shape_fn((c, h, w), |(k, y, x)| {
        weights
            .iter()
            .enumerate()
            .map(|(j, wt)| wt * image[[k, y, at(x as isize + j as isize - radius, w)]])
            .sum::<f64>()
    });
    Array3::from_shape_fn((c, h, w), |(k, y, x)| {
        weights
            .iter()
            .enumerate()
            .map(|(j, wt)| wt * tmp[[k, at(y as isize + j as isize - radius, h), x]])
            .sum::<f64>()
    })
}

/// Similarity scores `[N, P]` of raw images.
pub trait Scorer {
    fn scores(&self, images: &[Array3<f64>]) -> Result<Array2<f64>>;
}

/// A trained model behind its input normalization.
pub struct ModelScorer<'a> {
    pub model: &'a CbrModel,
    pub pipeline: &'a Pipeline,
}

impl Scorer for ModelScorer<'_> {
    fn scores(&self, images: &[Array3<f64>]) -> Result<Array2<f64>> {
        let normalized: Vec<_> = images.iter().map(|i| self.pipeline.normalize(i)).collect();
        let views: Vec<_> = normalized.iter().map(|a| a.view()).collect();
        let batch = ndarray::stack(Axis(0), &views).map_err(|e| Error::ShapeMismatch(e.to_string()))?;
        Ok(self.model.forward(batch.view())?.similarity.scores)
    }
}

impl<F: Fn(&Array3<f64>) -> Vec<f64>> Scorer for F {
    fn scores(&self, images: &[Array3<f64>]) -> Result<Array2<f64>> {
        let rows: Vec<Vec<f64>> = images.iter().map(self).collect();
        let p = rows.first().map_or(0, Vec::len);
        Array2::from_shape_vec((rows.len(), p), rows.concat()).map_err(|e| Error::ShapeMismatch(e.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Drops {
    pub s_orig: f64,
    pub s_local: f64,
    pub s_dual: f64,
}

/// Score of prototype `p` on the image, its mask-perturbed copy and its
/// complement-perturbed copy. Both perturbations start from the same `rng` state.
pub fn perturbation_scores(
    scorer: &dyn Scorer,
    image: &Array3<f64>,
    mask: &Array2<bool>,
    p: usize,
    kind: PerturbationKind,
    magnitude: f64,
    rng: &Rng,
) -> Result<Drops> {
    let local = perturb(image, mask, kind, magnitude, &mut rng.clone())?;
    let dual = perturb(image, &mask.mapv(|m| !m), kind, magnitude, &mut rng.clone())?;
    let s = scorer.scores(&[image.clone(), local, dual])?;
    Ok(Drops {
        s_orig: s[[0, p]],
        s_local: s[[1, p]],
        s_dual: s[[2, p]],
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PerturbationResult {
    pub method: String,
    pub image_id: String,
    pub prototype_index: usize,
    pub perturbation_kind: PerturbationKind,
    pub s_orig: f64,
    pub s_local: f64,
    pub s_dual: f64,
    pub drop_local: f64,
    pub drop_dual: f64,
    pub mask_fraction: f64,
}

/// The `k` most similar active prototypes, highest first, ties to the lowest index.
pub fn top_prototypes(scores: &[f64], active: &[bool], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).filter(|&i| active[i]).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Attribution generator for benchmark task `task`, with its own substream.
fn task_map(
    model: &CbrModel,
    pipeline: &Pipeline,
    ctx: &ReproContext,
    spec: &AttributionSpec,
    image: &Array3<f64>,
    image_id: &str,
    p: usize,
    task: u64,
) -> Result<AttributionMap> {
    let mut rng = match spec {
        AttributionSpec::Randgrads(r) => repro::substream(r.seed, &format!("{}/{task}", repro::RANDGRADS)),
        AttributionSpec::Smoothgrad(_) => ctx.child(repro::SMOOTHGRAD, task),
        _ => ctx.child("attribution", task),
    };
    attribution::explain_image(model, pipeline, image, image_id, p, spec, &mut rng)
}

/// Local and dual perturbation drops for every image, its top-k prototypes
/// and every configured kind. Items are processed in dataset order.
pub fn perturbation_benchmark(
    model: &CbrModel,
    pipeline: &Pipeline,
    ds: &Dataset,
    viz: &VizSpec,
    ctx: &ReproContext,
) -> Result<Vec<PerturbationResult>> {
    let bench = &viz.benchmark;
    let scorer = ModelScorer { model, pipeline };
    let active = model.active_prototypes();
    let mut out = Vec::new();
    let mut task = 0u64;
    for item in &ds.items {
        let scores = scorer.scores(std::slice::from_ref(&item.image))?;
        for p in top_prototypes(scores.row(0).as_slice().expect("contiguous"), &active, bench.top_k) {
            let map = task_map(model, pipeline, ctx, &viz.attribution, &item.image, &item.image_id, p, task)?;
            let mask = relevance_mask(map.data.view(), bench.q)?;
            let fraction = mask.iter().filter(|m| **m).count() as f64 / mask.len() as f64;
            for (ki, &kind) in bench.kinds.iter().enumerate() {
                let rng = ctx.child("perturb", task * PerturbationKind::ALL.len() as u64 + ki as u64);
                let d = perturbation_scores(&scorer, &item.image, &mask, p, kind, bench.magnitudes.get(kind), &rng)?;
                out.push(PerturbationResult {
                    method: map.method.clone(),
                    image_id: item.image_id.clone(),
                    prototype_index: p,
                    perturbation_kind: kind,
                    s_orig: d.s_orig,
                    s_local: d.s_local,
                    s_dual: d.s_dual,
                    drop_local: d.s_orig - d.s_local,
                    drop_dual: d.s_orig - d.s_dual,
                    mask_fraction: fraction,
                });
            }
            task += 1;
        }
    }
    Ok(out)
}

/// Whether the map's argmax (lowest row-major index on ties) lies in the mask.
pub fn pointing_hit(map: ArrayView2<f64>, mask: &Array2<bool>) -> bool {
    let i = argmax_first(map.iter());
    let w = map.dim().1;
    mask[[i / w, i % w]]
}

/// Share of the (nonnegative part of the) map inside the mask; 0 for an all-zero map.
pub fn pointing_energy(map: ArrayView2<f64>, mask: &Array2<bool>) -> f64 {
    let mut inside = 0.0;
    let mut total = 0.0;
    for (v, m) in map.iter().zip(mask.iter()) {
        let v = v.max(0.0);
        total += v;
        if *m {
            inside += v;
        }
    }
    if total > 0.0 {
        (inside / total).min(1.0)
    } else {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PointingRecord {
    pub method: String,
    pub image_id: String,
    pub prototype_index: usize,
    pub hit: bool,
    pub energy: f64,
    pub mask_fraction: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointingResult {
    pub records: Vec<PointingRecord>,
    pub hit_rate: f64,
    pub mean_energy: f64,
}

impl PointingResult {
    pub fn from_records(records: Vec<PointingRecord>) -> Self {
        let n = records.len().max(1) as f64;
        let hit_rate = records.iter().filter(|r| r.hit).count() as f64 / n;
        let mean_energy = records.iter().map(|r| r.energy).sum::<f64>() / n;
        PointingResult {
            records,
            hit_rate,
            mean_energy,
        }
    }
}

pub fn pointing_game(
    model: &CbrModel,
    pipeline: &Pipeline,
    ds: &Dataset,
    viz: &VizSpec,
    ctx: &ReproContext,
) -> Result<PointingResult> {
    if let Some(item) = ds.items.iter().find(|i| i.mask.is_none()) {
        return Err(Error::MissingMask(item.image_id.clone()));
    }
    let scorer = ModelScorer { model, pipeline };
    let active = model.active_prototypes();
    let mut records = Vec::new();
    let mut task = 0u64;
    for item in &ds.items {
        let mask = item.mask.as_ref().expect("checked above");
        let scores = scorer.scores(std::slice::from_ref(&item.image))?;
        for p in top_prototypes(scores.row(0).as_slice().expect("contiguous"), &active, viz.benchmark.top_k) {
            let map = task_map(model, pipeline, ctx, &viz.attribution, &item.image, &item.image_id, p, task)?;
            records.push(PointingRecord {
                method: map.method.clone(),
                image_id: item.image_id.clone(),
                prototype_index: p,
                hit: pointing_hit(map.data.view(), mask),
                energy: pointing_energy(map.data.view(), mask),
                mask_fraction: mask.iter().filter(|m| **m).count() as f64 / mask.len() as f64,
            });
            task += 1;
        }
    }
    Ok(PointingResult::from_records(records))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct PerturbationSummary {
    pub count: usize,
    pub mean_drop_local: f64,
    pub mean_drop_dual: f64,
    /// Mean of `drop / s_orig` over results with a nonzero original score.
    pub mean_relative_drop_local: f64,
    pub mean_relative_drop_dual: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct PointingSummary {
    pub count: usize,
    pub hit_rate: f64,
    pub mean_energy: f64,
}

/// Aggregates keyed by method, then perturbation kind.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Summary {
    pub perturbation: BTreeMap<String, BTreeMap<String, PerturbationSummary>>,
    pub pointing: BTreeMap<String, PointingSummary>,
}

pub fn summarize(perturbation: &[PerturbationResult], pointing: &[PointingRecord]) -> Summary {
    let mut summary = Summary::default();
    let mut groups: BTreeMap<(String, String), Vec<&PerturbationResult>> = BTreeMap::new();
    for r in perturbation {
        groups
            .entry((r.method.clone(), r.perturbation_kind.name().to_string()))
            .or_default()
            .push(r);
    }
    for ((method, kind), rs) in groups {
        let n = rs.len() as f64;
        let rel: Vec<(f64, f64)> = rs
            .iter()
            .filter(|r| r.s_orig != 0.0)
            .map(|r| (r.drop_local / r.s_orig, r.drop_dual / r.s_orig))
            .collect();
        let rn = rel.len().max(1) as f64;
        summary.perturbation.entry(method).or_default().insert(
            kind,
            PerturbationSummary {
                count: rs.len(),
                mean_drop_local: rs.iter().map(|r| r.drop_local).sum::<f64>() / n,
                mean_drop_dual: rs.iter().map(|r| r.drop_dual).sum::<f64>() / n,
                mean_relative_drop_local: rel.iter().map(|r| r.0).sum::<f64>() / rn,
                mean_relative_drop_dual: rel.iter().map(|r| r.1).sum::<f64>() / rn,
            },
        );
    }
    let mut by_method: BTreeMap<String, Vec<&PointingRecord>> = BTreeMap::new();
    for r in pointing {
        by_method.entry(r.method.clone()).or_default().push(r);
    }
    for (method, rs) in by_method {
        let n = rs.len() as f64;
        summary.pointing.insert(
            method,
            PointingSummary {
                count: rs.len(),
                hit_rate: rs.iter().filter(|r| r.hit).count() as f64 / n,
                mean_energy: rs.iter().map(|r| r.energy).sum::<f64>() / n,
            },
        );
    }
    summary
}

pub const RESULTS_HEADER: &str = "record,method,image_id,prototype_index,perturbation_kind,s_orig,s_local,s_dual,drop_local,drop_dual,mask_fraction,hit,energy";

/// One CSV row per perturbation result, then one per pointing record.
pub fn results_csv(perturbation: &[PerturbationResult], pointing: &[PointingRecord]) -> String {
    let mut s = String::from(RESULTS_HEADER);
    s.push('\n');
    for r in perturbation {
        let _ = writeln!(
            s,
            "perturbation,{},{},{},{},{},{},{},{},{},{},,",
            r.method,
            r.image_id,
            r.prototype_index,
            r.perturbation_kind.name(),
            r.s_orig,
            r.s_local,
            r.s_dual,
            r.drop_local,
            r.drop_dual,
            r.mask_fraction
        );
    }
    for r in pointing {
        let _ = writeln!(
            s,
            "pointing,{},{},{},,,,,,,{},{},{}",
            r.method, r.image_id, r.prototype_index, r.mask_fraction, r.hit, r.energy
        );
    }
    s
}

/// Write `results.csv` and `summary.json` into `dir`.
pub fn write_results(dir: &Path, perturbation: &[PerturbationResult], pointing: &[PointingRecord]) -> Result<Summary> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let csv = dir.join("results.csv");
    std::fs::write(&csv, results_csv(perturbation, pointing)).map_err(|e| Error::io(&csv, e))?;
    let summary = summarize(perturbation, pointing);
    let json = dir.join("summary.json");
    let text = serde_json::to_string_pretty(&summary).expect("summary serializes") + "\n";
    std::fs::write(&json, text).map_err(|e| Error::io(&json, e))?;
    Ok(summary)
}
