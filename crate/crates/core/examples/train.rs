//! Train a prototype network on synthetic shapes, checkpoint halfway and
//! resume into the same final state.
//!
//! `cargo run --release --example train -- [epochs]`

use protoparts::config::{ConfigSet, DataSpec, ModelSpec, TrainSpec, VizSpec};
use protoparts::training::Trainer;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let epochs: usize = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(6);
    let mut training = TrainSpec::with_epochs(epochs);
    training.checkpoint_every = epochs / 2;
    let configs = ConfigSet {
        model: ModelSpec::default(),
        data: DataSpec::synthetic(3, 150, Some(60)),
        training,
        viz: VizSpec::default(),
    };

    let out = tempfile::tempdir()?;
    let mut trainer = Trainer::new(configs)?.with_output(out.path())?;
    while !trainer.is_done() {
        let r = trainer.run_epoch()?;
        println!("epoch {:>2}  loss {:.4}  train acc {:.3}", r.epoch, r.loss, r.train_accuracy);
    }
    let report = trainer.finish()?;
    println!(
        "projected {} prototypes (max shift {:.3}), train acc {:.3}, test acc {:?}",
        report.projection.projected, report.projection.max_shift, report.train_accuracy, report.eval_accuracy
    );

    let half = out.path().join(format!("checkpoints/epoch_{}", epochs / 2));
    let mut resumed = Trainer::resume(&half)?;
    while !resumed.is_done() {
        resumed.run_epoch()?;
    }
    resumed.finish()?;
    let same = trainer.model.params().iter().zip(resumed.model.params()).all(|(a, b)| {
        a.data.iter().zip(b.data.iter()).all(|(x, y)| x.to_bits() == y.to_bits())
    });
    println!("resumed run identical to uninterrupted run: {same}");
    Ok(())
}
