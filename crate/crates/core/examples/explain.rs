//! Explain the most similar prototypes of one test image with every
//! attribution method and write heatmap, box and crop views.
//!
//! `cargo run --release --example explain -- [out_dir]`

use protoparts::attribution::{explain_image, render_view, write_view};
use protoparts::config::{AttributionSpec, ConfigSet, DataSpec, ModelSpec, TrainSpec, ViewKind, ViewSpec, VizSpec};
use protoparts::metrics::{top_prototypes, ModelScorer, Scorer};
use protoparts::repro::{substream, SMOOTHGRAD};
use protoparts::training::Trainer;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "explain_out".into());
    let configs = ConfigSet {
        model: ModelSpec::default(),
        data: DataSpec::synthetic(3, 150, Some(30)),
        training: TrainSpec::with_epochs(8),
        viz: VizSpec::default(),
    };
    let mut trainer = Trainer::new(configs)?;
    trainer.run()?;
    let (model, pipeline) = (&trainer.model, &trainer.pipeline);
    let item = &trainer.test_set.as_ref().expect("synthetic test split").items[0];

    let scores = ModelScorer { model, pipeline }.scores(std::slice::from_ref(&item.image))?;
    let top = top_prototypes(scores.row(0).as_slice().unwrap(), &model.active_prototypes(), 2);
    println!("{} (label {}): top prototypes {top:?}", item.image_id, item.label);

    let methods = [
        AttributionSpec::Upsampling(Default::default()),
        AttributionSpec::Backprop(Default::default()),
        AttributionSpec::smoothgrad(10, 0.2),
        AttributionSpec::Prp(Default::default()),
        AttributionSpec::randgrads(0),
    ];
    for p in top {
        for spec in &methods {
            let mut rng = substream(trainer.configs.training.seed, SMOOTHGRAD);
            let map = explain_image(model, pipeline, &item.image, &item.image_id, p, spec, &mut rng)?;
            for kind in [ViewKind::Heatmap, ViewKind::Bbox, ViewKind::Crop] {
                let view_spec = ViewSpec { kind, ..trainer.configs.viz.view.clone() };
                let view = render_view(&map, &item.image, &view_spec)?;
                let stem = format!("{}_p{p}_{}_{kind:?}", item.image_id, spec.name()).to_lowercase();
                write_view(out.as_ref(), &stem, &map, &view)?;
            }
            println!("  p{p:<3} {:<11} raw max {:.3e}", spec.name(), map.normalization_max);
        }
    }
    println!("views written to {out}/");
    Ok(())
}
