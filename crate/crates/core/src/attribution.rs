//! Per-pixel relevance maps locating a prototype in an image, and the views
//! used to display them.
//!
//! Every method takes a normalized input image `[3, H, W]` (as fed to the
//! model) and returns a nonnegative `[H, W]` map scaled so its maximum is 1.

use std::path::Path;

use ndarray::{s, Array2, Array3, Array4, ArrayView2, ArrayView3, Axis};
use rand::Rng as _;
use serde::Serialize;

use crate::config::{AttributionSpec, ViewKind, ViewSpec};
use crate::data::{write_png, Pipeline};
use crate::error::{Error, Result};
use crate::model::CbrModel;
use crate::nn::{self, InputBounds, LayerRelevance, LRP_STABILIZER};
use crate::repro::Rng;

/// Catmull-Rom cubic convolution parameter.
pub const BICUBIC_A: f64 = -0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct AttributionMap {
    pub data: Array2<f64>,
    pub method: String,
    pub prototype_index: usize,
    pub image_id: String,
    /// Maximum of the raw map before scaling; 0 for an all-zero map.
    pub normalization_max: f64,
}

impl AttributionMap {
    fn from_raw(raw: Array2<f64>, method: &str, prototype_index: usize, image_id: &str) -> Self {
        let (data, normalization_max) = max_normalize(raw);
        AttributionMap {
            data,
            method: method.to_string(),
            prototype_index,
            image_id: image_id.to_string(),
            normalization_max,
        }
    }
}

/// Divide by the maximum. All-zero maps are returned unchanged.
pub fn max_normalize(mut raw: Array2<f64>) -> (Array2<f64>, f64) {
    let max = raw.iter().cloned().fold(0.0, f64::max);
    if max > 0.0 {
        raw.mapv_inplace(|v| v / max);
    }
    (raw, max)
}

fn check_prototype(model: &CbrModel, p: usize) -> Result<()> {
    let count = model.num_prototypes();
    if p >= count {
        return Err(Error::ValueOutOfRange(format!("prototype index {p} (model has {count})")));
    }
    if !model.prototypes.records[p].active {
        return Err(Error::InactivePrototype(p));
    }
    Ok(())
}

fn single(image: ArrayView3<f64>) -> Array4<f64> {
    image.insert_axis(Axis(0)).to_owned()
}

/// Run the method named by `spec`.
///
/// `image` is normalized. Stochastic methods draw from `rng`, which should
/// be the matching named substream.
pub fn attribute(
    model: &CbrModel,
    image: ArrayView3<f64>,
    image_id: &str,
    p: usize,
    spec: &AttributionSpec,
    bounds: InputBounds,
    rng: &mut Rng,
) -> Result<AttributionMap> {
    let raw = match spec {
        AttributionSpec::Upsampling(_) => upsampling_raw(model, image, p)?,
        AttributionSpec::Backprop(_) => channel_abs_sum(&gradient(model, image, p)?),
        AttributionSpec::Smoothgrad(sg) => smoothgrad_raw(model, image, p, sg.num_samples, sg.noise_ratio, rng)?,
        AttributionSpec::Prp(_) => prp_raw(model, image, p, bounds)?.0,
        AttributionSpec::Randgrads(_) => {
            check_prototype(model, p)?;
            let (_, h, w) = image.dim();
            randgrads_raw(h, w, rng)
        }
    };
    Ok(AttributionMap::from_raw(raw, spec.name(), p, image_id))
}

/// Bicubic upsampling of similarity channel `p`, clamped at 0.
pub fn attr_upsampling(model: &CbrModel, image: ArrayView3<f64>, p: usize) -> Result<AttributionMap> {
    Ok(AttributionMap::from_raw(upsampling_raw(model, image, p)?, "upsampling", p, ""))
}

fn upsampling_raw(model: &CbrModel, image: ArrayView3<f64>, p: usize) -> Result<Array2<f64>> {
    check_prototype(model, p)?;
    let (_, h, w) = image.dim();
    let latent = model.extract(single(image).view())?;
    let sim = model.similarity(latent.view())?;
    let channel = sim.data.slice(s![0, p, .., ..]);
    Ok(bicubic_resize(channel, h, w).mapv(|v| v.max(0.0)))
}

fn cubic_weight(t: f64) -> f64 {
    let a = BICUBIC_A;
    let t = t.abs();
    if t <= 1.0 {
        ((a + 2.0) * t - (a + 3.0)) * t * t + 1.0
    } else if t < 2.0 {
        ((a * t - 5.0 * a) * t + 8.0 * a) * t - 4.0 * a
    } else {
        0.0
    }
}

/// Source taps and weights for one output coordinate, with half-pixel
/// centers and edge replication.
fn taps(out: usize, out_len: usize, in_len: usize) -> [(usize, f64); 4] {
    let src = (out as f64 + 0.5) * in_len as f64 / out_len as f64 - 0.5;
    let base = src.floor();
    let t = src - base;
    let clamp = |i: f64| i.clamp(0.0, (in_len - 1) as f64) as usize;
    [
        (clamp(base - 1.0), cubic_weight(t + 1.0)),
        (clamp(base), cubic_weight(t)),
        (clamp(base + 1.0), cubic_weight(1.0 - t)),
        (clamp(base + 2.0), cubic_weight(2.0 - t)),
    ]
}

/// Separable cubic convolution resize (Catmull-Rom, a = −0.5).
pub fn bicubic_resize(map: ArrayView2<f64>, out_h: usize, out_w: usize) -> Array2<f64> {
    let (in_h, in_w) = map.dim();
    let rows: Vec<_> = (0..out_h).map(|y| taps(y, out_h, in_h)).collect();
    let cols: Vec<_> = (0..out_w).map(|x| taps(x, out_w, in_w)).collect();
    let mut tmp = Array2::<f64>::zeros((in_h, out_w));
    for i in 0..in_h {
        for (x, tx) in cols.iter().enumerate() {
            tmp[[i, x]] = tx.iter().map(|&(j, wt)| wt * map[[i, j]]).sum();
        }
    }
    Array2::from_shape_fn((out_h, out_w), |(y, x)| rows[y].iter().map(|&(i, wt)| wt * tmp[[i, x]]).sum())
}

/// Gradient of `scores[p]` w.r.t. every image in a normalized batch.
pub fn gradient_batch(model: &CbrModel, images: ndarray::ArrayView4<f64>, p: usize) -> Result<Array4<f64>> {
    check_prototype(model, p)?;
    let traced = model.forward_traced(images)?;
    let mut grad_scores = Array2::zeros(traced.forward.similarity.scores.dim());
    grad_scores.column_mut(p).fill(1.0);
    let (_, g) = model.backward(&traced, grad_scores.view(), None, None, &|_| false, true);
    Ok(g.expect("input gradient requested"))
}

/// Signed gradient `[3, H, W]` of `scores[p]` w.r.t. the input.
pub fn gradient(model: &CbrModel, image: ArrayView3<f64>, p: usize) -> Result<Array3<f64>> {
    Ok(gradient_batch(model, single(image).view(), p)?.index_axis_move(Axis(0), 0))
}

/// Per-pixel absolute value summed over channels.
pub fn channel_abs_sum(g: &Array3<f64>) -> Array2<f64> {
    g.mapv(f64::abs).sum_axis(Axis(0))
}

pub fn attr_backprop(model: &CbrModel, image: ArrayView3<f64>, p: usize) -> Result<AttributionMap> {
    let raw = channel_abs_sum(&gradient(model, image, p)?);
    Ok(AttributionMap::from_raw(raw, "backprop", p, ""))
}

pub fn attr_smoothgrad(
    model: &CbrModel,
    image: ArrayView3<f64>,
    p: usize,
    num_samples: usize,
    noise_ratio: f64,
    rng: &mut Rng,
) -> Result<AttributionMap> {
    let raw = smoothgrad_raw(model, image, p, num_samples, noise_ratio, rng)?;
    Ok(AttributionMap::from_raw(raw, "smoothgrad", p, ""))
}

/// Signed gradients are averaged over noisy copies before the absolute value.
fn smoothgrad_raw(
    model: &CbrModel,
    image: ArrayView3<f64>,
    p: usize,
    num_samples: usize,
    noise_ratio: f64,
    rng: &mut Rng,
) -> Result<Array2<f64>> {
    if num_samples == 0 {
        return Err(Error::ValueOutOfRange("smoothgrad num_samples must be at least 1".into()));
    }
    if !(noise_ratio >= 0.0 && noise_ratio.is_finite()) {
        return Err(Error::ValueOutOfRange(format!("smoothgrad noise_ratio {noise_ratio}")));
    }
    let max = image.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = image.iter().cloned().fold(f64::INFINITY, f64::min);
    let sigma = noise_ratio * (max - min);
    // Noise is drawn even when sigma is 0 so the substream advances the same way.
    let noisy: Vec<Array3<f64>> = (0..num_samples)
        .map(|_| {
            let mut x = image.to_owned();
            x.iter_mut().for_each(|v| *v += sigma * rng.sample::<f64, _>(rand_distr::StandardNormal));
            x
        })
        .collect();
    if sigma == 0.0 {
        // Every copy equals the input, so the mean is the plain gradient.
        return Ok(channel_abs_sum(&gradient(model, image, p)?));
    }
    let mut mean = Array3::<f64>::zeros(image.dim());
    for x in &noisy {
        mean += &gradient(model, x.view(), p)?;
    }
    mean /= num_samples as f64;
    Ok(channel_abs_sum(&mean))
}

/// Relevance propagation, with per-layer conservation sums.
pub fn attr_prp(
    model: &CbrModel,
    image: ArrayView3<f64>,
    p: usize,
    bounds: InputBounds,
) -> Result<(AttributionMap, Vec<LayerRelevance>)> {
    let (raw, layers) = prp_raw(model, image, p, bounds)?;
    Ok((AttributionMap::from_raw(raw, "prp", p, ""), layers))
}

/// Relevance `[3, H, W]` at the input before channel summation and clamping.
pub fn prp_relevance(
    model: &CbrModel,
    image: ArrayView3<f64>,
    p: usize,
    bounds: InputBounds,
) -> Result<(Array3<f64>, Vec<LayerRelevance>)> {
    check_prototype(model, p)?;
    let traced = model.forward_traced(single(image).view())?;
    let sim = &traced.forward.similarity;
    let (y, x) = sim.argmax_hw(0, p);
    let r0 = sim.scores[[0, p]];
    let latent = &traced.forward.latent;
    let proto = model.prototypes.vectors.row(p);
    let d = proto.len();

    // Split the score over latent dimensions in proportion to each one's
    // share of the squared distance.
    let diffs: Vec<f64> = (0..d).map(|k| (latent[[0, k, y, x]] - proto[k]).powi(2)).collect();
    let d2: f64 = diffs.iter().sum();
    let mut r = Array4::zeros(latent.dim());
    for (k, dk) in diffs.iter().enumerate() {
        r[[0, k, y, x]] = r0 * (dk + LRP_STABILIZER / d as f64) / (d2 + LRP_STABILIZER);
    }
    let (r_in, report) = nn::relevance_backward(&model.layers, &traced.trace, r, Some(bounds))?;
    Ok((r_in.index_axis_move(Axis(0), 0), report))
}

fn prp_raw(
    model: &CbrModel,
    image: ArrayView3<f64>,
    p: usize,
    bounds: InputBounds,
) -> Result<(Array2<f64>, Vec<LayerRelevance>)> {
    let (r, report) = prp_relevance(model, image, p, bounds)?;
    Ok((r.sum_axis(Axis(0)).mapv(|v| v.max(0.0)), report))
}

/// Random baseline: i.i.d. uniform `[0, 1)` values, row-major.
pub fn attr_randgrads(h: usize, w: usize, rng: &mut Rng) -> AttributionMap {
    AttributionMap::from_raw(randgrads_raw(h, w, rng), "randgrads", 0, "")
}

fn randgrads_raw(h: usize, w: usize, rng: &mut Rng) -> Array2<f64> {
    Array2::from_shape_simple_fn((h, w), || rng.gen::<f64>())
}

/// Bounding box `(h0, w0, h1, w1)`, end-exclusive.
pub type BBox = (usize, usize, usize, usize);

#[derive(Debug, Clone)]
pub struct PatchView {
    pub kind: ViewKind,
    pub bbox: Option<BBox>,
    /// Rendered RGB image in `[0, 1]`.
    pub image: Array3<f64>,
    /// Set when the map was all zero and the box fell back to the full image.
    pub degenerate: bool,
}

/// Value at percentile `q` (0..=100), linear interpolation between order statistics.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    let mut v: Vec<f64> = values.to_vec();
    v.sort_by(f64::total_cmp);
    if v.is_empty() {
        return 0.0;
    }
    let pos = (q / 100.0).clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

/// Tightest box around nonzero pixels at or above the percentile threshold.
/// Returns the full image and `true` for an all-zero map.
pub fn bbox(map: ArrayView2<f64>, q: f64) -> (BBox, bool) {
    let (h, w) = map.dim();
    if map.iter().all(|v| *v == 0.0) {
        return ((0, 0, h, w), true);
    }
    let values: Vec<f64> = map.iter().cloned().collect();
    let threshold = percentile(&values, q);
    let (mut h0, mut w0, mut h1, mut w1) = (h, w, 0, 0);
    for ((y, x), &v) in map.indexed_iter() {
        if v >= threshold && v > 0.0 {
            h0 = h0.min(y);
            w0 = w0.min(x);
            h1 = h1.max(y + 1);
            w1 = w1.max(x + 1);
        }
    }
    ((h0, w0, h1, w1), false)
}

/// Jet-like color map for `t` in `[0, 1]`.
pub fn colormap(t: f64) -> [f64; 3] {
    let t = t.clamp(0.0, 1.0);
    let ch = |c: f64| (1.5 - (4.0 * t - c).abs()).clamp(0.0, 1.0);
    [ch(3.0), ch(2.0), ch(1.0)]
}

/// Render `map` over `image` (`[3, H, W]` in `[0, 1]`).
pub fn render_view(map: &AttributionMap, image: &Array3<f64>, view: &ViewSpec) -> Result<PatchView> {
    let (_, h, w) = image.dim();
    if map.data.dim() != (h, w) {
        return Err(Error::ShapeMismatch(format!(
            "map {:?} does not match image {h}x{w}",
            map.data.dim()
        )));
    }
    let (b, degenerate) = bbox(map.data.view(), view.params.percentile);
    let (h0, w0, h1, w1) = b;
    let rendered = match view.kind {
        ViewKind::Heatmap => {
            let mut out = image.clone();
            for ((y, x), &v) in map.data.indexed_iter() {
                let c = colormap(v);
                for k in 0..3 {
                    out[[k, y, x]] = 0.5 * image[[k, y, x]] + 0.5 * c[k];
                }
            }
            out
        }
        ViewKind::Crop => image.slice(s![.., h0..h1, w0..w1]).to_owned(),
        ViewKind::Bbox => {
            let mut out = image.clone();
            for y in h0..h1 {
                for x in w0..w1 {
                    if y == h0 || y + 1 == h1 || x == w0 || x + 1 == w1 {
                        out[[0, y, x]] = 1.0;
                        out[[1, y, x]] = 1.0;
                        out[[2, y, x]] = 0.0;
                    }
                }
            }
            out
        }
    };
    Ok(PatchView {
        kind: view.kind,
        bbox: Some(b),
        image: rendered,
        degenerate,
    })
}

#[derive(Debug, Serialize)]
struct Sidecar<'a> {
    method: &'a str,
    prototype_index: usize,
    image_id: &'a str,
    view: ViewKind,
    bbox: Option<[usize; 4]>,
    normalization_max: f64,
    degenerate: bool,
}

/// Write `<stem>.png` and `<stem>.json` into `dir`.
pub fn write_view(dir: &Path, stem: &str, map: &AttributionMap, view: &PatchView) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_png(&dir.join(format!("{stem}.png")), &view.image)?;
    let sidecar = Sidecar {
        method: &map.method,
        prototype_index: map.prototype_index,
        image_id: &map.image_id,
        view: view.kind,
        bbox: view.bbox.map(|(a, b, c, d)| [a, b, c, d]),
        normalization_max: map.normalization_max,
        degenerate: view.degenerate,
    };
    let path = dir.join(format!("{stem}.json"));
    let json = serde_json::to_string_pretty(&sidecar).expect("sidecar serializes");
    std::fs::write(&path, json + "\n").map_err(|e| Error::io(path, e))
}

/// Normalize a raw `[0, 1]` image and attribute prototype `p`.
pub fn explain_image(
    model: &CbrModel,
    pipeline: &Pipeline,
    image: &Array3<f64>,
    image_id: &str,
    p: usize,
    spec: &AttributionSpec,
    rng: &mut Rng,
) -> Result<AttributionMap> {
    let x = pipeline.normalize(image);
    attribute(model, x.view(), image_id, p, spec, pipeline.bounds(), rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{ModelSpec, ViewParams};
    use crate::model::build_model;
    use crate::repro::substream;
    use ndarray::Array1;
    use rand::SeedableRng;

    fn model() -> CbrModel {
        let spec = ModelSpec::default();
        let mut rng = Rng::seed_from_u64(3);
        build_model(&spec, 3, &mut rng).unwrap()
    }

    fn image(seed: u64) -> Array3<f64> {
        let mut rng = Rng::seed_from_u64(seed);
        Array3::from_shape_simple_fn((3, 32, 32), || rng.gen_range(-1.5..1.5))
    }

    fn bounds() -> InputBounds {
        InputBounds {
            low: [-2.0; 3],
            high: [2.0; 3],
        }
    }

    #[test]
    fn bicubic_constant_stays_constant() {
        let m = Array2::from_elem((4, 4), 0.7);
        let up = bicubic_resize(m.view(), 32, 32);
        assert!(up.iter().all(|v| (v - 0.7).abs() < 1e-12));
    }

    #[test]
    fn bicubic_same_size_is_identity() {
        let mut rng = Rng::seed_from_u64(1);
        let m = Array2::from_shape_simple_fn((6, 5), || rng.gen::<f64>());
        assert_eq!(bicubic_resize(m.view(), 6, 5), m);
    }

    #[test]
    fn bicubic_peak_stays_in_its_cell() {
        for (py, px) in [(0, 0), (1, 2), (3, 3)] {
            let mut m = Array2::zeros((4, 4));
            m[[py, px]] = 1.0;
            let up = bicubic_resize(m.view(), 32, 32);
            let (mut best, mut at) = (f64::NEG_INFINITY, (0, 0));
            for ((y, x), &v) in up.indexed_iter() {
                if v > best {
                    best = v;
                    at = (y, x);
                }
            }
            assert_eq!((at.0 / 8, at.1 / 8), (py, px));
        }
    }

    #[test]
    fn catmull_rom_weights_sum_to_one() {
        for i in 0..20 {
            let t = i as f64 / 20.0;
            let s = cubic_weight(t + 1.0) + cubic_weight(t) + cubic_weight(1.0 - t) + cubic_weight(2.0 - t);
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn upsampling_rejects_inactive_prototype() {
        let mut m = model();
        m.prototypes.records[1].active = false;
        let err = attr_upsampling(&m, image(0).view(), 1).unwrap_err();
        assert!(matches!(err, Error::InactivePrototype(1)));
    }

    #[test]
    fn upsampling_is_normalized() {
        let a = attr_upsampling(&model(), image(0).view(), 2).unwrap();
        assert_eq!(a.data.dim(), (32, 32));
        let max = a.data.iter().cloned().fold(0.0, f64::max);
        assert!((max - 1.0).abs() < 1e-12);
        assert!(a.data.iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let m = model();
        let x = image(5);
        let p = 4;
        let g = gradient(&m, x.view(), p).unwrap();
        let score = |x: &Array3<f64>| m.forward(x.view().insert_axis(Axis(0))).unwrap().similarity.scores[[0, p]];
        let h = 1e-5;
        let mut checked = 0;
        for (c, y, xx) in [(0, 10, 10), (1, 16, 3), (2, 30, 29), (0, 5, 22), (1, 20, 20), (2, 0, 0)] {
            let mut a = x.clone();
            a[[c, y, xx]] += h;
            let mut b = x.clone();
            b[[c, y, xx]] -= h;
            let fd = (score(&a) - score(&b)) / (2.0 * h);
            let an = g[[c, y, xx]];
            let scale = fd.abs().max(an.abs()).max(1e-6);
            assert!((fd - an).abs() / scale < 1e-2, "({c},{y},{xx}): fd {fd} vs {an}");
            checked += 1;
        }
        assert_eq!(checked, 6);
    }

    #[test]
    fn duplicate_in_batch_leaves_map_unchanged() {
        let m = model();
        let x = image(2);
        let one = gradient(&m, x.view(), 0).unwrap();
        let both = ndarray::stack(Axis(0), &[x.view(), x.view()]).unwrap();
        let g = gradient_batch(&m, both.view(), 0).unwrap();
        for n in 0..2 {
            let diff = (&g.index_axis(Axis(0), n) - &one).mapv(f64::abs).sum();
            assert!(diff < 1e-12);
        }
    }

    #[test]
    fn zero_map_is_not_normalized() {
        let (z, max) = max_normalize(Array2::zeros((3, 3)));
        assert_eq!(max, 0.0);
        assert!(z.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn smoothgrad_without_noise_equals_backprop() {
        let m = model();
        let x = image(7);
        let bp = attr_backprop(&m, x.view(), 1).unwrap();
        let mut rng = substream(0, crate::repro::SMOOTHGRAD);
        let sg = attr_smoothgrad(&m, x.view(), 1, 10, 0.0, &mut rng).unwrap();
        assert_eq!(sg.data, bp.data);
    }

    #[test]
    fn smoothgrad_repeatable_from_same_state() {
        let m = model();
        let x = image(8);
        let a = attr_smoothgrad(&m, x.view(), 0, 3, 0.2, &mut substream(4, "smoothgrad")).unwrap();
        let b = attr_smoothgrad(&m, x.view(), 0, 3, 0.2, &mut substream(4, "smoothgrad")).unwrap();
        assert_eq!(a.data, b.data);
        let c = attr_smoothgrad(&m, x.view(), 0, 3, 0.2, &mut substream(5, "smoothgrad")).unwrap();
        assert_ne!(a.data, c.data);
    }

    #[test]
    fn prp_conserves_relevance_per_layer() {
        let m = model();
        let (map, layers) = attr_prp(&m, image(9).view(), 3, bounds()).unwrap();
        assert!(!layers.is_empty());
        for l in layers.iter().filter(|l| l.rule == "z+") {
            let rel = (l.relevance_in - l.relevance_out).abs() / l.relevance_out.abs().max(1e-300);
            assert!(rel < 1e-4, "{}: {} vs {}", l.name, l.relevance_in, l.relevance_out);
        }
        assert!(map.data.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn prp_similarity_split_conserves_score() {
        let m = model();
        let x = image(10);
        let (r, layers) = prp_relevance(&m, x.view(), 2, bounds()).unwrap();
        let score = m.forward(x.view().insert_axis(Axis(0))).unwrap().similarity.scores[[0, 2]];
        let top = layers.last().unwrap();
        assert!((top.relevance_out - score).abs() < 1e-9 * score.abs().max(1.0));
        assert!(r.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn randgrads_repeatable_and_uniform() {
        let a = attr_randgrads(100, 100, &mut substream(1, crate::repro::RANDGRADS));
        let b = attr_randgrads(100, 100, &mut substream(1, crate::repro::RANDGRADS));
        assert_eq!(a.data, b.data);
        let raw = randgrads_raw(100, 100, &mut substream(1, crate::repro::RANDGRADS));
        let mean = raw.mean().unwrap();
        assert!((0.45..=0.55).contains(&mean), "{mean}");
    }

    fn view(kind: ViewKind) -> ViewSpec {
        ViewSpec {
            kind,
            params: ViewParams { percentile: 95.0 },
        }
    }

    fn map_of(data: Array2<f64>) -> AttributionMap {
        AttributionMap::from_raw(data, "test", 0, "x")
    }

    #[test]
    fn single_pixel_gives_unit_box() {
        let mut d = Array2::zeros((16, 16));
        d[[4, 9]] = 0.3;
        let v = render_view(&map_of(d), &Array3::zeros((3, 16, 16)), &view(ViewKind::Crop)).unwrap();
        assert_eq!(v.bbox, Some((4, 9, 5, 10)));
        assert_eq!(v.image.dim(), (3, 1, 1));
        assert!(!v.degenerate);
    }

    #[test]
    fn flat_and_zero_maps_cover_image() {
        let img = Array3::zeros((3, 8, 12));
        let ones = render_view(&map_of(Array2::ones((8, 12))), &img, &view(ViewKind::Bbox)).unwrap();
        assert_eq!(ones.bbox, Some((0, 0, 8, 12)));
        assert!(!ones.degenerate);
        let zero = render_view(&map_of(Array2::zeros((8, 12))), &img, &view(ViewKind::Heatmap)).unwrap();
        assert_eq!(zero.bbox, Some((0, 0, 8, 12)));
        assert!(zero.degenerate);
    }

    #[test]
    fn gaussian_box_matches_pixel_scan() {
        let (h, w) = (40, 30);
        let d = Array2::from_shape_fn((h, w), |(y, x)| {
            (-((y as f64 - 12.3).powi(2) + (x as f64 - 20.7).powi(2)) / 18.0).exp()
        });
        let (b, _) = bbox(d.view(), 95.0);
        // Independent threshold: numpy-style linear percentile.
        let mut sorted: Vec<f64> = d.iter().cloned().collect();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let rank = 0.95 * (sorted.len() - 1) as f64;
        let (lo, frac) = (rank as usize, rank - rank.floor());
        let thr = sorted[lo] * (1.0 - frac) + sorted[lo + 1] * frac;
        let hits: Vec<(usize, usize)> = d.indexed_iter().filter(|(_, v)| **v >= thr).map(|(i, _)| i).collect();
        let ys: Array1<usize> = hits.iter().map(|p| p.0).collect();
        let xs: Array1<usize> = hits.iter().map(|p| p.1).collect();
        let expected = (
            *ys.iter().min().unwrap(),
            *xs.iter().min().unwrap(),
            ys.iter().max().unwrap() + 1,
            xs.iter().max().unwrap() + 1,
        );
        assert_eq!(b, expected);
        assert!(b.2 - b.0 < h && b.3 - b.1 < w);
    }

    #[test]
    fn sidecar_written() {
        let dir = tempfile::tempdir().unwrap();
        let m = map_of(Array2::from_elem((4, 4), 0.5));
        let v = render_view(&m, &Array3::zeros((3, 4, 4)), &view(ViewKind::Heatmap)).unwrap();
        write_view(dir.path(), "p0", &m, &v).unwrap();
        let json: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("p0.json")).unwrap()).unwrap();
        assert_eq!(json["method"], "test");
        assert_eq!(json["normalization_max"], 0.5);
        assert!(dir.path().join("p0.png").exists());
    }
}
