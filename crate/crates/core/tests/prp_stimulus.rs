//! Relevance of a lone bright pixel on a neutral background.

use ndarray::{s, Array3, Axis};
use protoparts::attribution::prp_relevance;
use protoparts::config::{DataSpec, ModelSpec};
use protoparts::data::Pipeline;
use protoparts::model::build_model;
use protoparts::repro::{self, substream};

/// First-layer 3x3 units touched by the pixel reach back two pixels.
const FOOTPRINT: i64 = 2;
const MIN_SHARE: f64 = 0.99;

#[test]
fn relevance_concentrates_on_stimulus() {
    let pipeline = Pipeline::from_spec(&DataSpec::synthetic(3, 10, None));
    // Mid gray normalizes to exactly zero.
    let background = Array3::<f64>::from_elem((3, 32, 32), 0.5);
    for seed in 0..4u64 {
        for (h0, w0) in [(13usize, 18usize), (4, 4), (27, 9)] {
            let mut model = build_model(&ModelSpec::default(), 3, &mut substream(seed, repro::INIT)).unwrap();
            let mut stimulus = background.clone();
            stimulus.slice_mut(s![.., h0, w0]).fill(1.0);
            let x0 = pipeline.normalize(&background);
            let x1 = pipeline.normalize(&stimulus);
            let latent = |x: &Array3<f64>| model.extract(x.clone().insert_axis(Axis(0)).view()).unwrap();
            let (l0, l1) = (latent(&x0), latent(&x1));

            // Place the prototype on the cell the stimulus changes most.
            let change = (&l1 - &l0).mapv(|v| v * v).sum_axis(Axis(1)).index_axis_move(Axis(0), 0);
            let (cell, _) = change.indexed_iter().fold(((0, 0), f64::MIN), |b, (i, &v)| if v > b.1 { (i, v) } else { b });
            model.prototypes.vectors.row_mut(0).assign(&l1.slice(s![0, .., cell.0, cell.1]));

            let (r, _) = prp_relevance(&model, x1.view(), 0, pipeline.bounds()).unwrap();
            let map = r.sum_axis(Axis(0)).mapv(|v| v.max(0.0));
            let total = map.sum();
            let near: f64 = map
                .indexed_iter()
                .filter(|((i, j), _)| (*i as i64 - h0 as i64).abs() <= FOOTPRINT && (*j as i64 - w0 as i64).abs() <= FOOTPRINT)
                .map(|(_, v)| v)
                .sum();
            let top = map.indexed_iter().fold(((0, 0), f64::MIN), |b, (i, &v)| if v > b.1 { (i, v) } else { b }).0;
            assert!(total > 0.0);
            assert_eq!(top, (h0, w0), "seed {seed}");
            assert!(near / total >= MIN_SHARE, "seed {seed} at {:?}: share {}", (h0, w0), near / total);
        }
    }
}
