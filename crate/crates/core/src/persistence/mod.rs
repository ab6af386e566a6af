//! Checkpoints and weight import.
//!
//! A checkpoint directory holds:
//!
//! * `params.bin`: every model tensor, in [`CbrModel::params`] order;
//! * `optimizer.bin`: optimizer state tensors;
//! * `rng.bin`: the substream snapshot, when training state was saved;
//! * `meta.json`: format version, epoch, mode, config hashes, prototype
//!   records, tree structure and the training history.
//!
//! The configs themselves live in the run directory (the checkpoint's own
//! directory or one of its two nearest ancestors).

pub mod legacy;
pub mod tensors;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::{ConfigKind, ConfigSet};
use crate::error::{Error, Result};
use crate::model::{build_model, CbrModel, Head, Mode, PrototypeRecord, TreeStructure};
use crate::repro::{self, RngSnapshot};

pub use tensors::Tensor;

pub const FORMAT_VERSION: u32 = 1;

const PARAMS_FILE: &str = "params.bin";
const OPTIMIZER_FILE: &str = "optimizer.bin";
const RNG_FILE: &str = "rng.bin";
const META_FILE: &str = "meta.json";

/// One row of the training history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub train_accuracy: f64,
    pub eval_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Meta {
    format_version: u32,
    epoch: usize,
    mode: Mode,
    num_classes: usize,
    config_hashes: BTreeMap<String, String>,
    prototypes: Vec<PrototypeRecord>,
    tree: Option<TreeStructure>,
    history: Vec<EpochRecord>,
}

/// Everything needed to resume training or to use a trained model.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    /// Number of completed epochs.
    pub epoch: usize,
    pub model: CbrModel,
    pub configs: ConfigSet,
    pub optimizer: Vec<Tensor>,
    pub rng: Option<RngSnapshot>,
    pub history: Vec<EpochRecord>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct LoadOptions {
    /// Accept configs whose hashes differ from the recorded ones.
    pub allow_config_changes: bool,
}

impl Checkpoint {
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let params: Vec<Tensor> = self
            .model
            .params()
            .into_iter()
            .map(|p| Tensor::new(p.name, p.shape, p.data.to_vec()))
            .collect();
        tensors::write(&dir.join(PARAMS_FILE), &params)?;
        tensors::write(&dir.join(OPTIMIZER_FILE), &self.optimizer)?;
        let rng_path = dir.join(RNG_FILE);
        match &self.rng {
            Some(snap) => fs::write(&rng_path, snap.to_bytes()).map_err(|e| Error::io(&rng_path, e))?,
            None if rng_path.exists() => fs::remove_file(&rng_path).map_err(|e| Error::io(&rng_path, e))?,
            None => {}
        }
        let meta = Meta {
            format_version: FORMAT_VERSION,
            epoch: self.epoch,
            mode: self.model.mode,
            num_classes: self.model.num_classes,
            config_hashes: self
                .configs
                .hashes()
                .into_iter()
                .map(|(k, h)| (k.to_string(), h))
                .collect(),
            prototypes: self.model.prototypes.records.clone(),
            tree: match &self.model.head {
                Head::Tree(t) => Some(t.structure()),
                Head::Linear(_) => None,
            },
            history: self.history.clone(),
        };
        let path = dir.join(META_FILE);
        let json = serde_json::to_string_pretty(&meta).expect("meta serializes");
        fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        Self::load_with(dir, LoadOptions::default())
    }

    pub fn load_with(dir: &Path, opts: LoadOptions) -> Result<Self> {
        let meta_path = dir.join(META_FILE);
        let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let raw: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| Error::corrupt(&meta_path, e.to_string()))?;
        let version = raw.get("format_version").and_then(|v| v.as_u64());
        match version {
            Some(v) if v == FORMAT_VERSION as u64 => {}
            Some(v) => {
                return Err(Error::VersionMismatch {
                    found: v as u32,
                    expected: FORMAT_VERSION,
                })
            }
            None => return Err(Error::corrupt(&meta_path, "missing format_version")),
        }
        let meta: Meta = serde_json::from_value(raw).map_err(|e| Error::corrupt(&meta_path, e.to_string()))?;

        let config_dir = locate_configs(dir)?;
        let configs = ConfigSet::load_dir(&config_dir)?;
        if !opts.allow_config_changes {
            for (key, found) in configs.hashes() {
                let recorded = meta.config_hashes.get(key).cloned().unwrap_or_default();
                if recorded != found {
                    let file = ConfigKind::ALL
                        .iter()
                        .find(|k| k.key() == key)
                        .map(|k| k.file_name())
                        .unwrap_or(key);
                    return Err(Error::HashMismatch {
                        file: file.to_string(),
                        recorded,
                        found,
                    });
                }
            }
        }

        let mut model = skeleton(&configs, meta.num_classes)?;
        let params = tensors::read(&dir.join(PARAMS_FILE))?;
        assign_params(&mut model, &params, &dir.join(PARAMS_FILE))?;
        if meta.prototypes.len() != model.num_prototypes() {
            return Err(Error::corrupt(&meta_path, "prototype record count differs from the model"));
        }
        model.prototypes.records = meta.prototypes;
        match (&mut model.head, meta.tree) {
            (Head::Tree(t), Some(s)) => t.set_structure(s)?,
            (Head::Linear(_), None) => {}
            _ => return Err(Error::corrupt(&meta_path, "tree structure does not match the head")),
        }
        model.set_mode(meta.mode);

        let optimizer = tensors::read(&dir.join(OPTIMIZER_FILE))?;
        let rng_path = dir.join(RNG_FILE);
        let rng = if rng_path.exists() {
            let bytes = fs::read(&rng_path).map_err(|e| Error::io(&rng_path, e))?;
            Some(RngSnapshot::from_bytes(&bytes, &rng_path)?)
        } else {
            None
        };
        Ok(Checkpoint {
            epoch: meta.epoch,
            model,
            configs,
            optimizer,
            rng,
            history: meta.history,
        })
    }
}

/// The directory holding `model.yml`: `dir` itself or one of its two nearest ancestors.
pub fn locate_configs(dir: &Path) -> Result<PathBuf> {
    let mut cur = Some(dir);
    for _ in 0..3 {
        let Some(d) = cur else { break };
        if d.join(ConfigKind::Model.file_name()).is_file() {
            return Ok(d.to_path_buf());
        }
        cur = d.parent();
    }
    Err(Error::io(
        dir.join(ConfigKind::Model.file_name()),
        std::io::Error::new(std::io::ErrorKind::NotFound, "no config snapshot near checkpoint"),
    ))
}

/// A model with the configured architecture; all values are overwritten by the caller.
fn skeleton(configs: &ConfigSet, num_classes: usize) -> Result<CbrModel> {
    let mut spec = configs.model.clone();
    let weights = spec.extractor.backbone.pretrained_weights.take();
    let mut model = build_model(&spec, num_classes, &mut repro::substream(0, repro::INIT))?;
    model.spec.extractor.backbone.pretrained_weights = weights;
    Ok(model)
}

/// Overwrite every model tensor with the same-named entry in `tensors`.
pub fn assign_params(model: &mut CbrModel, tensors: &[Tensor], path: &Path) -> Result<()> {
    let mut by_name: BTreeMap<&str, &Tensor> = tensors.iter().map(|t| (t.name.as_str(), t)).collect();
    for p in model.params_mut() {
        let t = by_name
            .remove(p.name.as_str())
            .ok_or_else(|| Error::corrupt(path, format!("missing tensor `{}`", p.name)))?;
        if t.shape != p.shape {
            return Err(Error::ShapeMismatch(format!(
                "`{}` has shape {:?}, model expects {:?}",
                p.name, t.shape, p.shape
            )));
        }
        p.data.copy_from_slice(&t.data);
    }
    if let Some(name) = by_name.keys().next() {
        return Err(Error::corrupt(path, format!("unexpected tensor `{name}`")));
    }
    Ok(())
}

/// Load backbone tensors (names `backbone.*`) from a tensor file.
pub fn load_backbone_weights(model: &mut CbrModel, path: &Path) -> Result<()> {
    let tensors = tensors::read(path)?;
    let by_name: BTreeMap<&str, &Tensor> = tensors.iter().map(|t| (t.name.as_str(), t)).collect();
    for p in model.params_mut() {
        if !p.name.starts_with("backbone.") {
            continue;
        }
        let t = by_name
            .get(p.name.as_str())
            .ok_or_else(|| Error::MissingParameter(p.name.clone()))?;
        if t.shape != p.shape {
            return Err(Error::ShapeMismatch(format!(
                "`{}` has shape {:?}, model expects {:?}",
                p.name, t.shape, p.shape
            )));
        }
        p.data.copy_from_slice(&t.data);
    }
    Ok(())
}

/// Write the backbone tensors of a model, in the format read by [`load_backbone_weights`].
pub fn save_backbone_weights(model: &CbrModel, path: &Path) -> Result<()> {
    let tensors: Vec<Tensor> = model
        .params()
        .into_iter()
        .filter(|p| p.name.starts_with("backbone."))
        .map(|p| Tensor::new(p.name, p.shape, p.data.to_vec()))
        .collect();
    tensors::write(path, &tensors)
}
