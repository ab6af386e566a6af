use ndarray::{s, Array2, Array4, ArrayView4};

use crate::data::{batch_indices, Dataset, Pipeline};
use crate::error::{Error, Result};
use crate::model::{similarity, CbrModel, Head};

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionReport {
    /// Number of prototypes replaced.
    pub projected: usize,
    /// Largest Euclidean distance a prototype moved.
    pub max_shift: f64,
}

#[derive(Debug, Clone, Copy)]
struct Best {
    sim: f64,
    d2: f64,
    item: usize,
    h: usize,
    w: usize,
}

/// Replace each active prototype by its most similar latent patch.
///
/// Linear-head prototypes only consider images of their own class; tree
/// prototypes consider every image. Items are scanned in dataset order
/// (sorted by image id) and ties keep the earliest `(image, h, w)`.
pub fn project(model: &mut CbrModel, ds: &Dataset, pipeline: &Pipeline, batch_size: usize) -> Result<ProjectionReport> {
    let active = model.active_prototypes();
    let classes = model.prototype_classes();
    let linear = matches!(model.head, Head::Linear(_));
    let p_count = model.num_prototypes();
    let mut best: Vec<Option<Best>> = vec![None; p_count];
    let mut patches: Vec<Option<Vec<f64>>> = vec![None; p_count];

    for idx in batch_indices(ds.len(), batch_size, None) {
        let batch = pipeline.batch(ds, &idx, None)?;
        let latent = model.extract(batch.images.view())?;
        let d2 = similarity::squared_distances(latent.view(), model.prototypes.vectors.view(), model.mode)?;
        let (_, _, h, w) = d2.dim();
        for (bi, &item) in idx.iter().enumerate() {
            let label = ds.items[item].label;
            for pi in 0..p_count {
                if !active[pi] || (linear && classes[pi] != Some(label)) {
                    continue;
                }
                for y in 0..h {
                    for x in 0..w {
                        let dv = d2[[bi, pi, y, x]];
                        let sim = similarity::similarity_value(dv, model.similarity_kind(), model.epsilon(), model.mode);
                        if best[pi].map_or(true, |b| sim > b.sim) {
                            best[pi] = Some(Best { sim, d2: dv, item, h: y, w: x });
                            patches[pi] = Some(latent_vector(latent.view(), bi, y, x));
                        }
                    }
                }
            }
        }
    }

    let mut report = ProjectionReport {
        projected: 0,
        max_shift: 0.0,
    };
    for pi in 0..p_count {
        if !active[pi] {
            continue;
        }
        let (Some(b), Some(patch)) = (best[pi], patches[pi].take()) else {
            let which = match classes[pi] {
                Some(k) => format!(" for class {k}"),
                None => String::new(),
            };
            return Err(Error::EmptyProjectionSet(which));
        };
        let old = model.prototypes.vectors.row(pi).to_owned();
        let shift = old.iter().zip(&patch).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        report.max_shift = report.max_shift.max(shift);
        model.prototypes.vectors.row_mut(pi).assign(&ndarray::aview1(&patch));
        let rec = &mut model.prototypes.records[pi];
        rec.source_image_id = Some(ds.items[b.item].image_id.clone());
        rec.location = Some((b.h, b.w));
        rec.projection_distance = Some(b.d2);
        report.projected += 1;
    }
    Ok(report)
}

fn latent_vector(latent: ArrayView4<f64>, n: usize, h: usize, w: usize) -> Vec<f64> {
    latent.slice(s![n, .., h, w]).to_vec()
}

/// Latent maps of a whole dataset, `[N, D, H, W]`, without augmentation.
pub fn latent_maps(model: &CbrModel, ds: &Dataset, pipeline: &Pipeline, batch_size: usize) -> Result<Array4<f64>> {
    let mut parts = Vec::new();
    for idx in batch_indices(ds.len(), batch_size, None) {
        let batch = pipeline.batch(ds, &idx, None)?;
        parts.push(model.extract(batch.images.view())?);
    }
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    ndarray::concatenate(ndarray::Axis(0), &views).map_err(|e| Error::ShapeMismatch(e.to_string()))
}

/// All latent vectors of a dataset as rows `[N·H·W, D]`, in `(n, h, w)` order.
pub fn latent_rows(latent: &Array4<f64>) -> Array2<f64> {
    let (n, d, h, w) = latent.dim();
    latent
        .view()
        .permuted_axes([0, 2, 3, 1])
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((n * h * w, d))
        .expect("contiguous")
}
