//! Command-line interface.
//!
//! Every command prints one JSON line on stdout and exits with 0 on
//! success, 1 on a user error (bad arguments, configs or files) and 2 on an
//! internal error.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use ndarray::Axis;
use serde_json::{json, Value};

use crate::attribution::{self, render_view, write_view};
use crate::config::{ConfigDocument, ConfigSet, DataSpec, ModelSpec, TrainSpec, VizSpec};
use crate::data::{self, read_image, resize_bilinear, Dataset, Pipeline};
use crate::error::{Error, Result};
use crate::metrics;
use crate::model::{CbrModel, Head};
use crate::persistence::legacy::{self, LegacyFormat, LegacyMapping};
use crate::persistence::{Checkpoint, LoadOptions};
use crate::repro::{self, ReproContext};
use crate::training::{self, loss, Trainer};

/// Environment variable naming the default output root.
pub const OUTPUT_ROOT_VAR: &str = "PROTOPARTS_OUT";

#[derive(Debug, Parser)]
#[command(name = "protoparts", version, about = "Prototype-based image classifiers: training, explanation and evaluation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model from four config files.
    Train(TrainArgs),
    /// Accuracy and loss of a checkpoint on a dataset.
    Evaluate(EvaluateArgs),
    /// Render prototype attributions for one image or for every prototype.
    Explain(ExplainArgs),
    /// Run an explanation-quality benchmark.
    Benchmark(BenchmarkArgs),
    /// Convert a legacy model into a checkpoint.
    Import(ImportArgs),
    /// Project prototypes onto their nearest training patches.
    Project(EditArgs),
    /// Deactivate weak prototypes.
    Prune(EditArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub training: PathBuf,
    #[arg(long)]
    pub viz: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overrides the seed of the training config.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct CheckpointArg {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Accept configs edited since the checkpoint was written.
    #[arg(long)]
    pub allow_config_changes: bool,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub checkpoint: CheckpointArg,
    #[arg(long)]
    pub data: PathBuf,
}

#[derive(Debug, Args)]
pub struct ExplainArgs {
    #[command(flatten)]
    pub checkpoint: CheckpointArg,
    #[arg(long)]
    pub viz: PathBuf,
    #[arg(long, conflicts_with = "global", required_unless_present = "global")]
    pub image: Option<PathBuf>,
    /// Render every active prototype on its projection source.
    #[arg(long)]
    pub global: bool,
    /// Number of prototypes rendered in local mode.
    #[arg(long, default_value_t = 3)]
    pub top_k: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum Metric {
    PointingGame,
    Perturbation,
}

#[derive(Debug, Args)]
pub struct BenchmarkArgs {
    #[command(flatten)]
    pub checkpoint: CheckpointArg,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub viz: PathBuf,
    #[arg(long, value_enum)]
    pub metric: Metric,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ImportArgs {
    #[arg(long)]
    pub path: PathBuf,
    /// `legacy_protopnet` or `legacy_prototree`.
    #[arg(long)]
    pub format: String,
    /// Mapping JSON replacing the shipped one.
    #[arg(long)]
    pub mapping: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EditArgs {
    #[command(flatten)]
    pub checkpoint: CheckpointArg,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Parse `args`, run the command and return the exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match std::panic::catch_unwind(|| run(&cli.command)) {
        Ok(Ok(summary)) => {
            println!("{}", serde_json::to_string(&summary).expect("summary serializes"));
            0
        }
        Ok(Err(e)) => {
            eprintln!("error: {e}");
            if e.is_user_error() {
                1
            } else {
                2
            }
        }
        Err(_) => 2,
    }
}

pub fn run(command: &Command) -> Result<Value> {
    match command {
        Command::Train(a) => train(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Explain(a) => explain(a),
        Command::Benchmark(a) => benchmark(a),
        Command::Import(a) => import(a),
        Command::Project(a) => edit(a, Edit::Project),
        Command::Prune(a) => edit(a, Edit::Prune),
    }
}

fn read_doc<T: ConfigDocument>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    T::parse(&text)
}

fn output_dir(flag: &Option<PathBuf>, command: &str) -> Result<PathBuf> {
    if let Some(p) = flag {
        return Ok(p.clone());
    }
    match std::env::var_os(OUTPUT_ROOT_VAR) {
        Some(root) => Ok(PathBuf::from(root).join(command)),
        None => Err(Error::schema("--out", format!("required when {OUTPUT_ROOT_VAR} is unset"))),
    }
}

fn path_str(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

fn load_checkpoint(arg: &CheckpointArg) -> Result<Checkpoint> {
    Checkpoint::load_with(
        &arg.checkpoint,
        LoadOptions {
            allow_config_changes: arg.allow_config_changes,
        },
    )
}

fn train(a: &TrainArgs) -> Result<Value> {
    let mut configs = ConfigSet {
        model: read_doc::<ModelSpec>(&a.model)?,
        data: read_doc::<DataSpec>(&a.data)?,
        training: read_doc::<TrainSpec>(&a.training)?,
        viz: read_doc::<VizSpec>(&a.viz)?,
    };
    if let Some(seed) = a.seed {
        if seed != configs.training.seed {
            eprintln!("note: --seed {seed} overrides training.seed {}", configs.training.seed);
        }
        configs.training.seed = seed;
    }
    configs.validate()?;
    let out = output_dir(&a.out, "train")?;
    let mut trainer = Trainer::new(configs)?.with_output(&out)?;
    let report = trainer.run()?;
    Ok(json!({
        "command": "train",
        "out": path_str(&out),
        "epochs": trainer.epoch,
        "final": path_str(&out.join("final")),
        "train_accuracy": report.train_accuracy,
        "eval_accuracy": report.eval_accuracy,
        "projected": report.projection.projected,
        "pruned": report.prune.map(|p| p.deactivated.len()).unwrap_or(0),
    }))
}

/// Test split when configured, otherwise the train split.
fn evaluation_set(spec: &DataSpec) -> Result<(Dataset, &'static str)> {
    let (train, test) = data::load_splits(spec)?;
    Ok(match test {
        Some(t) => (t, "test"),
        None => (train, "train"),
    })
}

/// Accuracy and mean loss over `ds`, without regularization terms.
pub fn evaluate_model(model: &CbrModel, ds: &Dataset, pipeline: &Pipeline, batch_size: usize) -> Result<(f64, f64)> {
    let (mut correct, mut loss_sum) = (0usize, 0.0);
    for idx in data::batch_indices(ds.len(), batch_size, None) {
        let batch = pipeline.batch(ds, &idx, None)?;
        let fwd = model.forward(batch.images.view())?;
        let l = match model.head {
            Head::Linear(_) => loss::cross_entropy(fwd.class_scores.view(), &batch.labels).0,
            Head::Tree(_) => loss::nll(fwd.class_scores.view(), &batch.labels).0,
        };
        loss_sum += l * idx.len() as f64;
        correct += loss::predictions(fwd.class_scores.view())
            .iter()
            .zip(&batch.labels)
            .filter(|(p, y)| p == y)
            .count();
    }
    let n = ds.len().max(1) as f64;
    Ok((correct as f64 / n, loss_sum / n))
}

fn evaluate(a: &EvaluateArgs) -> Result<Value> {
    let ck = load_checkpoint(&a.checkpoint)?;
    let spec: DataSpec = read_doc(&a.data)?;
    let (ds, split) = evaluation_set(&spec)?;
    let pipeline = Pipeline::from_spec(&spec);
    let (accuracy, loss) = evaluate_model(&ck.model, &ds, &pipeline, spec.eval_batch_size)?;
    Ok(json!({
        "command": "evaluate",
        "split": split,
        "num_images": ds.len(),
        "accuracy": accuracy,
        "loss": loss,
        "eval_batch_size": spec.eval_batch_size,
    }))
}

/// Prototypes supporting the prediction: the `k` largest contributions
/// `score · weight` to the predicted class (linear head), or the first `k`
/// nodes of the most probable root-to-leaf path (tree head).
pub fn decision_prototypes(model: &CbrModel, scores: &[f64], class_scores: &[f64], k: usize) -> Vec<usize> {
    let active = model.active_prototypes();
    match &model.head {
        Head::Linear(h) => {
            let pred = crate::model::similarity::argmax_first(class_scores.iter());
            let contrib: Vec<f64> = (0..scores.len()).map(|p| scores[p] * h.weights[[pred, p]]).collect();
            metrics::top_prototypes(&contrib, &active, k)
        }
        Head::Tree(t) => {
            let mut out = Vec::new();
            let mut j = 0;
            while j < t.num_internal() && out.len() < k {
                if !t.node_active(j) {
                    break;
                }
                let p = t.node_to_prototype[j];
                out.push(p);
                j = if scores[p] > 0.5 { 2 * j + 2 } else { 2 * j + 1 };
            }
            out
        }
    }
}

fn explain(a: &ExplainArgs) -> Result<Value> {
    let ck = load_checkpoint(&a.checkpoint)?;
    let viz: VizSpec = read_doc(&a.viz)?;
    let out = output_dir(&a.out, "explain")?;
    let pipeline = Pipeline::from_spec(&ck.configs.data);
    let ctx = ReproContext::new(ck.configs.training.seed);
    let mut written = Vec::new();
    let mut render = |image: &ndarray::Array3<f64>, image_id: &str, p: usize, task: u64, stem: String| -> Result<Value> {
        let mut rng = ctx.child(stream_for(&viz), task);
        let map = attribution::explain_image(&ck.model, &pipeline, image, image_id, p, &viz.attribution, &mut rng)?;
        let view = render_view(&map, image, &viz.view)?;
        write_view(&out, &stem, &map, &view)?;
        written.push(path_str(&out.join(format!("{stem}.png"))));
        Ok(json!({"prototype": p, "bbox": view.bbox.map(|b| [b.0, b.1, b.2, b.3]), "degenerate": view.degenerate}))
    };

    let mut renders = Vec::new();
    if a.global {
        let (train, _) = data::load_splits(&ck.configs.data)?;
        for (p, rec) in ck.model.prototypes.records.iter().enumerate() {
            if !rec.active {
                continue;
            }
            let id = rec.source_image_id.as_ref().ok_or_else(|| {
                Error::ValueOutOfRange(format!("prototype {p} has no projection source; run `project` first"))
            })?;
            let item = train
                .find(id)
                .ok_or_else(|| Error::ValueOutOfRange(format!("source image `{id}` of prototype {p} not in the train set")))?;
            renders.push(render(&item.image, id, p, p as u64, format!("prototype_{p}"))?);
        }
    } else {
        let path = a.image.as_ref().expect("clap enforces --image or --global");
        let mut image = read_image(path)?;
        if let Some(size) = ck.configs.data.resize() {
            image = resize_bilinear(&image, size, size);
        }
        let x = pipeline.normalize(&image).insert_axis(Axis(0));
        let fwd = ck.model.forward(x.view())?;
        let scores: Vec<f64> = fwd.similarity.scores.row(0).to_vec();
        let class_scores: Vec<f64> = fwd.class_scores.row(0).to_vec();
        let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "image".into());
        for (i, p) in decision_prototypes(&ck.model, &scores, &class_scores, a.top_k).into_iter().enumerate() {
            renders.push(render(&image, &stem, p, i as u64, format!("{stem}_p{p}"))?);
        }
    }
    Ok(json!({
        "command": "explain",
        "mode": if a.global { "global" } else { "local" },
        "method": viz.attribution.name(),
        "view": viz.view.kind,
        "renders": renders,
        "paths": written,
    }))
}

fn stream_for(viz: &VizSpec) -> &'static str {
    match viz.attribution {
        crate::config::AttributionSpec::Randgrads(_) => repro::RANDGRADS,
        _ => repro::SMOOTHGRAD,
    }
}

fn benchmark(a: &BenchmarkArgs) -> Result<Value> {
    let ck = load_checkpoint(&a.checkpoint)?;
    let spec: DataSpec = read_doc(&a.data)?;
    let viz: VizSpec = read_doc(&a.viz)?;
    let (ds, split) = evaluation_set(&spec)?;
    let pipeline = Pipeline::from_spec(&spec);
    let ctx = ReproContext::new(ck.configs.training.seed);
    let out = output_dir(&a.out, "benchmark")?;
    let (perturbation, pointing) = match a.metric {
        Metric::Perturbation => (metrics::perturbation_benchmark(&ck.model, &pipeline, &ds, &viz, &ctx)?, Vec::new()),
        Metric::PointingGame => (Vec::new(), metrics::pointing_game(&ck.model, &pipeline, &ds, &viz, &ctx)?.records),
    };
    let summary = metrics::write_results(&out, &perturbation, &pointing)?;
    Ok(json!({
        "command": "benchmark",
        "metric": a.metric.to_possible_value().map(|v| v.get_name().to_string()),
        "split": split,
        "method": viz.attribution.name(),
        "rows": perturbation.len() + pointing.len(),
        "summary": summary,
        "paths": [path_str(&out.join("results.csv")), path_str(&out.join("summary.json"))],
    }))
}

fn import(a: &ImportArgs) -> Result<Value> {
    let format = LegacyFormat::parse(&a.format)?;
    let mapping = match &a.mapping {
        Some(p) => LegacyMapping::from_file(p)?,
        None => LegacyMapping::builtin(format),
    };
    if mapping.format()? != format {
        return Err(Error::UnknownFormat(format!(
            "mapping is for {}, not {}",
            mapping.source_format,
            format.name()
        )));
    }
    let model = legacy::import_legacy_with(&a.path, &mapping)?;
    let out = output_dir(&a.out, "import")?;
    let mut data = DataSpec::synthetic(model.num_classes.clamp(2, 5), 300, None);
    data.num_classes = model.num_classes;
    let configs = ConfigSet {
        model: model.spec.clone(),
        data,
        training: TrainSpec::default(),
        viz: VizSpec::default(),
    };
    configs.snapshot(&out)?;
    let ck = Checkpoint {
        epoch: 0,
        model,
        configs,
        optimizer: Vec::new(),
        rng: None,
        history: Vec::new(),
    };
    ck.save(&out)?;
    Ok(json!({
        "command": "import",
        "format": format.name(),
        "num_classes": ck.model.num_classes,
        "num_prototypes": ck.model.num_prototypes(),
        "mode": ck.model.mode,
        "checkpoint": path_str(&out),
    }))
}

#[derive(Clone, Copy)]
enum Edit {
    Project,
    Prune,
}

fn edit(a: &EditArgs, what: Edit) -> Result<Value> {
    let mut ck = load_checkpoint(&a.checkpoint)?;
    let spec: DataSpec = read_doc(&a.data)?;
    let (train, _) = data::load_splits(&spec)?;
    let pipeline = Pipeline::from_spec(&spec);
    let (command, detail) = match what {
        Edit::Project => {
            let r = training::project::project(&mut ck.model, &train, &pipeline, spec.eval_batch_size)?;
            ("project", json!({"projected": r.projected, "max_shift": r.max_shift}))
        }
        Edit::Prune => {
            let idx: Vec<usize> = (0..train.len().min(spec.eval_batch_size)).collect();
            let probe = pipeline.batch(&train, &idx, None)?;
            let r = training::prune(&mut ck.model, &ck.configs.training.pruning, Some(probe.images.view()))?;
            ("prune", json!({"deactivated": r.deactivated, "max_score_change": r.max_score_change}))
        }
    };
    let out = output_dir(&a.out, command)?;
    ck.configs.data = spec;
    ck.configs.snapshot(&out)?;
    ck.save(&out)?;
    let active = ck.model.active_prototypes().iter().filter(|a| **a).count();
    Ok(json!({
        "command": command,
        "checkpoint": path_str(&out),
        "active_prototypes": active,
        "result": detail,
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ConfigKind;

    #[test]
    fn parse_errors_exit_one() {
        assert_eq!(main_with(["protoparts", "train", "--data", "d.yml"]), 1);
        assert_eq!(main_with(["protoparts", "frobnicate"]), 1);
        assert_eq!(main_with(["protoparts", "--help"]), 0);
    }

    #[test]
    fn unknown_metric_exits_one() {
        let code = main_with([
            "protoparts", "benchmark", "--checkpoint", "c", "--data", "d", "--viz", "v", "--metric", "jpeg", "--out", "o",
        ]);
        assert_eq!(code, 1);
    }

    #[test]
    fn bad_import_format_exits_one() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("out");
        let code = main_with([
            "protoparts".into(),
            "import".into(),
            "--path".into(),
            OsString::from("missing.safetensors"),
            "--format".into(),
            "legacy_protopool".into(),
            "--out".into(),
            out.clone().into_os_string(),
        ]);
        assert_eq!(code, 1);
        assert!(!out.exists());
    }

    #[test]
    fn config_kinds_have_files() {
        assert_eq!(ConfigKind::Viz.file_name(), "visualization.yml");
    }
}
