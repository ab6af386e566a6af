//! Train a soft decision tree, project its prototypes onto training patches
//! and prune leaves that carry no class.
//!
//! `cargo run --release --example project_prune`

use protoparts::config::{ConfigSet, DataSpec, ModelSpec, PruningSpec, TrainSpec, VizSpec};
use protoparts::training::{accuracy, project, prune, Trainer};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let configs = ConfigSet {
        model: ModelSpec::prototree(3),
        data: DataSpec::synthetic(3, 150, Some(60)),
        training: TrainSpec::with_epochs(8),
        viz: VizSpec::default(),
    };
    let mut trainer = Trainer::new(configs)?;
    while !trainer.is_done() {
        trainer.run_epoch()?;
    }
    let (ds, pipeline) = (&trainer.train_set, &trainer.pipeline);
    let mut model = trainer.model.clone();
    println!("before projection: train acc {:.3}", accuracy(&model, ds, pipeline, 32)?);

    let report = project(&mut model, ds, pipeline, 32)?;
    println!(
        "projected {} prototypes, max shift {:.3}, train acc {:.3}",
        report.projected,
        report.max_shift,
        accuracy(&model, ds, pipeline, 32)?
    );

    let probe = pipeline.batch(ds, &(0..16).collect::<Vec<_>>(), None)?;
    for threshold in [0.01, 0.4, 0.6] {
        let mut pruned = model.clone();
        let spec = PruningSpec { leaf_threshold: threshold, ..PruningSpec::default() };
        match prune(&mut pruned, &spec, Some(probe.images.view())) {
            Ok(r) => println!(
                "leaf threshold {threshold}: pruned {:?}, max score change {:.2e}, train acc {:.3}",
                r.deactivated,
                r.max_score_change.unwrap_or(0.0),
                accuracy(&pruned, ds, pipeline, 32)?
            ),
            Err(e) => println!("leaf threshold {threshold}: {e}"),
        }
    }
    Ok(())
}
