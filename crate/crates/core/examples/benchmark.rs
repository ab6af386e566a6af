//! Score attribution methods with the perturbation benchmark and the
//! pointing game on a trained model.
//!
//! `cargo run --release --example benchmark`

use protoparts::config::{AttributionSpec, ConfigSet, DataSpec, ModelSpec, TrainSpec, VizSpec};
use protoparts::metrics::{perturbation_benchmark, pointing_game, summarize};
use protoparts::repro::ReproContext;
use protoparts::training::Trainer;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let configs = ConfigSet {
        model: ModelSpec::default(),
        data: DataSpec::synthetic(3, 150, Some(12)),
        training: TrainSpec::with_epochs(8),
        viz: VizSpec::default(),
    };
    let mut trainer = Trainer::new(configs)?;
    trainer.run()?;
    let test = trainer.test_set.as_ref().expect("synthetic test split");
    let ctx = ReproContext::new(trainer.configs.training.seed);

    println!("{:<11} {:>10} {:>10} {:>9} {:>8}", "method", "drop local", "drop dual", "hit rate", "energy");
    for spec in [
        AttributionSpec::Upsampling(Default::default()),
        AttributionSpec::Backprop(Default::default()),
        AttributionSpec::smoothgrad(10, 0.2),
        AttributionSpec::Prp(Default::default()),
        AttributionSpec::randgrads(0),
    ] {
        let viz = VizSpec::default().with_attribution(spec.clone());
        let perturbation = perturbation_benchmark(&trainer.model, &trainer.pipeline, test, &viz, &ctx)?;
        let pointing = pointing_game(&trainer.model, &trainer.pipeline, test, &viz, &ctx)?;
        let summary = summarize(&perturbation, &pointing.records);
        let kinds = &summary.perturbation[spec.name()];
        let mean = |f: fn(&protoparts::metrics::PerturbationSummary) -> f64| {
            kinds.values().map(f).sum::<f64>() / kinds.len() as f64
        };
        let point = &summary.pointing[spec.name()];
        println!(
            "{:<11} {:>10.4} {:>10.4} {:>9.3} {:>8.3}",
            spec.name(),
            mean(|s| s.mean_drop_local),
            mean(|s| s.mean_drop_dual),
            point.hit_rate,
            point.mean_energy
        );
    }
    Ok(())
}
