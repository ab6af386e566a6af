//! The training loop: per-epoch optimization with a freeze schedule,
//! prototype projection, pruning, checkpoints and resumption.

pub mod loss;
pub mod optim;
pub mod project;

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::ArrayView4;

use crate::config::{ConfigSet, ParamGroup, PruningSpec};
use crate::data::{self, batch_indices, Dataset, Pipeline};
use crate::error::{Error, Result};
use crate::model::{build_model, CbrModel, Head};
use crate::persistence::{Checkpoint, EpochRecord, LoadOptions};
use crate::repro::{self, ReproContext};

pub use loss::{predictions, LossTerms};
pub use optim::Optimizer;
pub use project::{project, ProjectionReport};

#[derive(Debug, Clone, PartialEq)]
pub struct PruneReport {
    /// Prototypes that became inactive.
    pub deactivated: Vec<usize>,
    /// Largest change of any class score on the probe batch, if one was given.
    pub max_score_change: Option<f64>,
}

/// Deactivate prototypes that no longer matter for the decision.
///
/// Linear head: prototypes whose largest absolute weight is below
/// `weight_threshold`. Tree head: subtrees whose leaves all have maximum
/// class probability below `leaf_threshold`. Fails with
/// [`Error::AllPruned`] (leaving the model untouched) when nothing would remain.
pub fn prune(model: &mut CbrModel, spec: &PruningSpec, probe: Option<ArrayView4<f64>>) -> Result<PruneReport> {
    let before_scores = probe.map(|x| model.forward(x)).transpose()?;
    let before = model.active_prototypes();
    let after: Vec<bool> = match &mut model.head {
        Head::Linear(h) => {
            let keep: Vec<bool> = (0..before.len())
                .map(|p| before[p] && h.weights.column(p).iter().any(|w| w.abs() >= spec.weight_threshold))
                .collect();
            if !keep.iter().any(|k| *k) {
                return Err(Error::AllPruned);
            }
            keep
        }
        Head::Tree(t) => {
            let mut pruned = t.clone();
            pruned.prune(spec.leaf_threshold)?;
            let keep = pruned.active_prototypes();
            *t = pruned;
            keep
        }
    };
    let mut deactivated = Vec::new();
    for (p, rec) in model.prototypes.records.iter_mut().enumerate() {
        if rec.active && !after[p] {
            deactivated.push(p);
        }
        rec.active = after[p];
    }
    let max_score_change = match (before_scores, probe) {
        (Some(b), Some(x)) => {
            let a = model.forward(x)?;
            Some(
                a.class_scores
                    .iter()
                    .zip(b.class_scores.iter())
                    .map(|(x, y)| (x - y).abs())
                    .fold(0.0, f64::max),
            )
        }
        _ => None,
    };
    Ok(PruneReport {
        deactivated,
        max_score_change,
    })
}

/// Fraction of items whose top class equals the label.
pub fn accuracy(model: &CbrModel, ds: &Dataset, pipeline: &Pipeline, batch_size: usize) -> Result<f64> {
    if ds.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    for idx in batch_indices(ds.len(), batch_size, None) {
        let batch = pipeline.batch(ds, &idx, None)?;
        let fwd = model.forward(batch.images.view())?;
        correct += predictions(fwd.class_scores.view())
            .iter()
            .zip(&batch.labels)
            .filter(|(p, y)| p == y)
            .count();
    }
    Ok(correct as f64 / ds.len() as f64)
}

/// Summary of the post-training steps.
#[derive(Debug, Clone, PartialEq)]
pub struct FinishReport {
    pub projection: ProjectionReport,
    pub prune: Option<PruneReport>,
    pub train_accuracy: f64,
    pub eval_accuracy: Option<f64>,
}

/// Owns all state of one training run.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub configs: ConfigSet,
    pub model: CbrModel,
    pub optimizer: Optimizer,
    pub ctx: ReproContext,
    /// Number of completed epochs.
    pub epoch: usize,
    pub history: Vec<EpochRecord>,
    pub train_set: Dataset,
    pub test_set: Option<Dataset>,
    pub pipeline: Pipeline,
    out_dir: Option<PathBuf>,
}

impl Trainer {
    /// Load the configured datasets and build a fresh model.
    pub fn new(configs: ConfigSet) -> Result<Self> {
        let (train, test) = data::load_splits(&configs.data)?;
        Self::with_datasets(configs, train, test)
    }

    pub fn with_datasets(configs: ConfigSet, train_set: Dataset, test_set: Option<Dataset>) -> Result<Self> {
        configs.validate()?;
        let mut ctx = ReproContext::new(configs.training.seed);
        ctx.env.batch_size = Some(configs.data.batch_size);
        ctx.env.eval_batch_size = Some(configs.data.eval_batch_size);
        let model = build_model(&configs.model, configs.data.num_classes, ctx.stream(repro::INIT))?;
        let optimizer = Optimizer::new(&configs.training.optimizer, &model);
        let pipeline = Pipeline::from_spec(&configs.data);
        Ok(Trainer {
            configs,
            model,
            optimizer,
            ctx,
            epoch: 0,
            history: Vec::new(),
            train_set,
            test_set,
            pipeline,
            out_dir: None,
        })
    }

    /// Write run records and checkpoints under `dir`.
    pub fn with_output(mut self, dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.configs.snapshot(dir)?;
        self.ctx.write_records(dir)?;
        self.out_dir = Some(dir.to_path_buf());
        self.write_history()?;
        Ok(self)
    }

    /// Continue from a checkpoint written during training. Outputs go to the
    /// run directory that holds the checkpoint's configs.
    pub fn resume(checkpoint_dir: &Path) -> Result<Self> {
        let ck = Checkpoint::load_with(checkpoint_dir, LoadOptions::default())?;
        let run_dir = crate::persistence::locate_configs(checkpoint_dir)?;
        let (train, test) = data::load_splits(&ck.configs.data)?;
        let mut t = Self::with_datasets(ck.configs.clone(), train, test)?;
        t.optimizer = Optimizer::from_tensors(
            &ck.configs.training.optimizer,
            &ck.model,
            &ck.optimizer,
            &checkpoint_dir.join("optimizer.bin"),
        )?;
        t.model = ck.model;
        if let Some(snap) = &ck.rng {
            t.ctx.restore(snap)?;
        }
        t.epoch = ck.epoch;
        t.history = ck.history;
        t.out_dir = Some(run_dir);
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            epoch: self.epoch,
            model: self.model.clone(),
            configs: self.configs.clone(),
            optimizer: self.optimizer.to_tensors(),
            rng: Some(self.ctx.capture()),
            history: self.history.clone(),
        }
    }

    pub fn is_done(&self) -> bool {
        self.epoch >= self.configs.training.num_epochs
    }

    /// Train one epoch over shuffled, augmented batches.
    pub fn run_epoch(&mut self) -> Result<EpochRecord> {
        let epoch = self.epoch;
        let spec = self.configs.training.clone();
        let groups = spec.trainable(epoch);
        let compat_leaves = self.model.mode == crate::model::Mode::Compatibility
            && matches!(self.model.head, Head::Tree(_));
        let trainable = |g: ParamGroup| groups.contains(&g) && !(compat_leaves && g == ParamGroup::Decision);
        let order = batch_indices(
            self.train_set.len(),
            self.configs.data.batch_size,
            Some(self.ctx.stream(repro::SHUFFLE)),
        );
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for (bi, idx) in order.iter().enumerate() {
            let batch = self
                .pipeline
                .batch(&self.train_set, idx, Some(self.ctx.stream(repro::AUGMENT)))?;
            let traced = self.model.forward_traced(batch.images.view())?;
            let fwd = &traced.forward;
            let out = match self.model.head {
                Head::Linear(_) => loss::linear_head_loss(
                    fwd,
                    &batch.labels,
                    &self.model.prototype_classes(),
                    &self.model.active_prototypes(),
                    &spec.loss,
                ),
                Head::Tree(_) => loss::tree_head_loss(fwd, &batch.labels),
            };
            if !out.terms.total.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: bi,
                    value: out.terms.total,
                });
            }
            loss_sum += out.terms.total * idx.len() as f64;
            correct += predictions(fwd.class_scores.view())
                .iter()
                .zip(&batch.labels)
                .filter(|(p, y)| p == y)
                .count();
            let (g_scores, g_head) = self
                .model
                .head_backward(fwd.similarity.scores.view(), out.grad_class.view());
            let (grads, _) = self
                .model
                .backward(&traced, g_scores.view(), out.grad_d2, Some(g_head), &trainable, false);
            self.optimizer.step(&mut self.model, &grads);
            if compat_leaves && groups.contains(&ParamGroup::Decision) {
                let scores = fwd.similarity.scores.clone();
                let class_scores = fwd.class_scores.clone();
                if let Head::Tree(t) = &mut self.model.head {
                    t.leaf_em_update(scores.view(), &batch.labels, class_scores.view());
                }
            }
        }
        let n = self.train_set.len().max(1) as f64;
        let eval_accuracy = match &self.test_set {
            Some(ts) => Some(accuracy(&self.model, ts, &self.pipeline, self.configs.data.eval_batch_size)?),
            None => None,
        };
        let record = EpochRecord {
            epoch,
            loss: loss_sum / n,
            train_accuracy: correct as f64 / n,
            eval_accuracy,
        };
        self.history.push(record.clone());
        if spec.projection_epoch == Some(epoch) {
            project(
                &mut self.model,
                &self.train_set,
                &self.pipeline,
                self.configs.data.eval_batch_size,
            )?;
        }
        self.epoch += 1;
        if let Some(dir) = self.out_dir.clone() {
            self.write_history()?;
            let every = spec.checkpoint_every;
            if every > 0 && self.epoch % every == 0 {
                self.checkpoint().save(&dir.join("checkpoints").join(format!("epoch_{}", self.epoch)))?;
            }
        }
        Ok(record)
    }

    /// Run the remaining epochs, then [`Trainer::finish`].
    pub fn run(&mut self) -> Result<FinishReport> {
        while !self.is_done() {
            self.run_epoch()?;
        }
        self.finish()
    }

    /// Project, prune (if enabled) and re-project, then save `final/`.
    pub fn finish(&mut self) -> Result<FinishReport> {
        let eval_bs = self.configs.data.eval_batch_size;
        let mut projection = project(&mut self.model, &self.train_set, &self.pipeline, eval_bs)?;
        let prune_report = if self.configs.training.pruning.enabled {
            let probe_idx: Vec<usize> = (0..self.train_set.len().min(eval_bs)).collect();
            let probe = self.pipeline.batch(&self.train_set, &probe_idx, None)?;
            let r = prune(&mut self.model, &self.configs.training.pruning, Some(probe.images.view()))?;
            if !r.deactivated.is_empty() {
                projection = project(&mut self.model, &self.train_set, &self.pipeline, eval_bs)?;
            }
            Some(r)
        } else {
            None
        };
        let train_accuracy = accuracy(&self.model, &self.train_set, &self.pipeline, eval_bs)?;
        let eval_accuracy = match &self.test_set {
            Some(ts) => Some(accuracy(&self.model, ts, &self.pipeline, eval_bs)?),
            None => None,
        };
        if let Some(dir) = &self.out_dir {
            self.checkpoint().save(&dir.join("final"))?;
        }
        Ok(FinishReport {
            projection,
            prune: prune_report,
            train_accuracy,
            eval_accuracy,
        })
    }

    fn write_history(&self) -> Result<()> {
        let Some(dir) = &self.out_dir else { return Ok(()) };
        let path = dir.join("history.csv");
        fs::write(&path, history_csv(&self.history)).map_err(|e| Error::io(&path, e))
    }
}

/// `epoch,loss,train_accuracy,eval_accuracy` rows; missing values are empty.
pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,loss,train_accuracy,eval_accuracy\n");
    for r in history {
        let eval = r.eval_accuracy.map(|v| v.to_string()).unwrap_or_default();
        out.push_str(&format!("{},{},{},{}\n", r.epoch, r.loss, r.train_accuracy, eval));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{DataSpec, ModelSpec, TrainSpec, VizSpec};

    fn configs(model: ModelSpec, epochs: usize) -> ConfigSet {
        let mut data = DataSpec::synthetic(3, 24, Some(9));
        data.batch_size = 8;
        ConfigSet {
            model: model.with_backbone("builtin_cnn_tiny", "block4").with_prototype_dim(8),
            data,
            training: TrainSpec::with_epochs(epochs),
            viz: VizSpec::default(),
        }
    }

    #[test]
    fn projection_makes_prototypes_latent_vectors() {
        for spec in [ModelSpec::protopnet(2), ModelSpec::prototree(2)] {
            let mut t = Trainer::new(configs(spec, 1)).unwrap();
            t.run_epoch().unwrap();
            project(&mut t.model, &t.train_set, &t.pipeline, 7).unwrap();
            let latent = project::latent_maps(&t.model, &t.train_set, &t.pipeline, 5).unwrap();
            let rows = project::latent_rows(&latent);
            for (p, rec) in t.model.prototypes.records.iter().enumerate() {
                let v = t.model.prototypes.vectors.row(p);
                assert!(rows.rows().into_iter().any(|r| r == v));
                let item = t.train_set.find(rec.source_image_id.as_ref().unwrap()).unwrap();
                if let Some(k) = rec.class_assignment {
                    assert_eq!(item.label, k);
                }
            }
        }
    }

    #[test]
    fn linear_pruning_all_weak_fails_cleanly() {
        let mut t = Trainer::new(configs(ModelSpec::protopnet(1), 1)).unwrap();
        if let Head::Linear(h) = &mut t.model.head {
            h.weights.fill(1e-6);
        }
        let before = t.model.clone();
        let err = prune(&mut t.model, &PruningSpec::default(), None).unwrap_err();
        assert!(matches!(err, Error::AllPruned));
        assert_eq!(t.model.prototypes, before.prototypes);
    }

    #[test]
    fn linear_pruning_deactivates_weak_columns() {
        let mut t = Trainer::new(configs(ModelSpec::protopnet(2), 1)).unwrap();
        if let Head::Linear(h) = &mut t.model.head {
            h.weights.column_mut(1).fill(0.0);
        }
        let r = prune(&mut t.model, &PruningSpec::default(), None).unwrap();
        assert_eq!(r.deactivated, vec![1]);
        assert!(!t.model.prototypes.records[1].active);
    }

    #[test]
    fn history_csv_format() {
        let h = vec![EpochRecord {
            epoch: 0,
            loss: 1.25,
            train_accuracy: 0.5,
            eval_accuracy: None,
        }];
        assert_eq!(history_csv(&h), "epoch,loss,train_accuracy,eval_accuracy\n0,1.25,0.5,\n");
    }
}

#[cfg(test)]
mod gradient_tests {
    use super::*;
    use crate::config::{DataSpec, LossSpec, ModelSpec};

    fn loss_of(model: &CbrModel, x: ArrayView4<f64>, labels: &[usize]) -> f64 {
        let fwd = model.forward(x).unwrap();
        match model.head {
            Head::Linear(_) => {
                loss::linear_head_loss(
                    &fwd,
                    labels,
                    &model.prototype_classes(),
                    &model.active_prototypes(),
                    &LossSpec::default(),
                )
                .terms
                .total
            }
            Head::Tree(_) => loss::tree_head_loss(&fwd, labels).terms.total,
        }
    }

    #[test]
    fn full_model_gradients_match_finite_differences() {
        for spec in [ModelSpec::protopnet(2), ModelSpec::prototree(2)] {
            let spec = spec.with_backbone("builtin_cnn_tiny", "block2").with_prototype_dim(4);
            let mut model = build_model(&spec, 3, &mut repro::substream(4, repro::INIT)).unwrap();
            let ds = data::synth_shapes(3, 3, 12, 5);
            let pipe = Pipeline::from_spec(&DataSpec::default());
            let batch = pipe.batch(&ds, &[0, 1, 2], None).unwrap();
            let x = batch.images.view();
            let labels = batch.labels.clone();
            let traced = model.forward_traced(x).unwrap();
            let out = match model.head {
                Head::Linear(_) => loss::linear_head_loss(
                    &traced.forward,
                    &labels,
                    &model.prototype_classes(),
                    &model.active_prototypes(),
                    &LossSpec::default(),
                ),
                Head::Tree(_) => loss::tree_head_loss(&traced.forward, &labels),
            };
            let (gs, gh) = model.head_backward(traced.forward.similarity.scores.view(), out.grad_class.view());
            let (grads, _) = model.backward(&traced, gs.view(), out.grad_d2, Some(gh), &|_| true, false);
            let h = 1e-6;
            let n_params = model.params().len();
            for pi in 0..n_params {
                let len = model.params()[pi].data.len();
                for idx in [0, len / 2, len - 1] {
                    let orig = model.params()[pi].data[idx];
                    model.params_mut()[pi].data[idx] = orig + h;
                    let up = loss_of(&model, x, &labels);
                    model.params_mut()[pi].data[idx] = orig - h;
                    let down = loss_of(&model, x, &labels);
                    model.params_mut()[pi].data[idx] = orig;
                    let fd = (up - down) / (2.0 * h);
                    let an = grads.0[pi].as_ref().unwrap()[idx];
                    let name = model.params()[pi].name.clone();
                    assert!(
                        (fd - an).abs() <= 1e-5 * (1.0 + fd.abs()),
                        "{name}[{idx}]: analytic {an}, numeric {fd}"
                    );
                }
            }
        }
    }
}
