//! The four configuration documents (model, data, training, visualization).
//!
//! Every document is parsed from YAML, default-filled and validated in one
//! step. The canonical form is YAML with sorted keys and every default
//! written out; its SHA-256 is the content hash recorded in checkpoints.

mod data;
mod model;
mod training;
mod viz;

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_yaml::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub use data::{DataSpec, DatasetSpec, FolderParams, SynthParams, TransformOp};
pub use model::{
    AddOnLayer, BackboneSpec, ClassifierSpec, ExtractorSpec, ModelSpec, SimilarityKind,
    SimilaritySpec,
};
pub use training::{
    FreezePhase, LearningRates, LossSpec, OptimizerKind, OptimizerSpec, ParamGroup, PruningSpec,
    TrainSpec,
};
pub use viz::{AttributionSpec, BenchmarkSpec, Magnitudes, PerturbationKind, ViewKind, ViewParams, ViewSpec, VizSpec};

/// Which of the four documents a text holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ConfigKind {
    Model,
    Data,
    Train,
    Viz,
}

impl ConfigKind {
    pub const ALL: [ConfigKind; 4] = [
        ConfigKind::Model,
        ConfigKind::Data,
        ConfigKind::Train,
        ConfigKind::Viz,
    ];

    /// Fixed snapshot filename inside a training directory.
    pub fn file_name(self) -> &'static str {
        match self {
            ConfigKind::Model => "model.yml",
            ConfigKind::Data => "data.yml",
            ConfigKind::Train => "training.yml",
            ConfigKind::Viz => "visualization.yml",
        }
    }

    pub fn key(self) -> &'static str {
        match self {
            ConfigKind::Model => "model",
            ConfigKind::Data => "data",
            ConfigKind::Train => "training",
            ConfigKind::Viz => "visualization",
        }
    }
}

/// A parsed document of any kind.
#[derive(Debug, Clone, PartialEq)]
pub enum Spec {
    Model(ModelSpec),
    Data(DataSpec),
    Train(TrainSpec),
    Viz(VizSpec),
}

impl Spec {
    pub fn kind(&self) -> ConfigKind {
        match self {
            Spec::Model(_) => ConfigKind::Model,
            Spec::Data(_) => ConfigKind::Data,
            Spec::Train(_) => ConfigKind::Train,
            Spec::Viz(_) => ConfigKind::Viz,
        }
    }
}

/// Implemented by each document type.
pub trait ConfigDocument: Serialize + Sized {
    const KIND: ConfigKind;

    /// Parse an already-loaded YAML mapping into a validated, default-filled spec.
    fn from_yaml(value: Value) -> Result<Self>;

    fn parse(text: &str) -> Result<Self> {
        Self::from_yaml(parse_document(text)?)
    }

    fn canonical(&self) -> Canonical {
        canonicalize(self)
    }
}

/// Parse `text` as a document of the given kind.
pub fn parse_config(text: &str, kind: ConfigKind) -> Result<Spec> {
    Ok(match kind {
        ConfigKind::Model => Spec::Model(ModelSpec::parse(text)?),
        ConfigKind::Data => Spec::Data(DataSpec::parse(text)?),
        ConfigKind::Train => Spec::Train(TrainSpec::parse(text)?),
        ConfigKind::Viz => Spec::Viz(VizSpec::parse(text)?),
    })
}

/// Canonical text of a spec and the hex SHA-256 of its bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Canonical {
    pub text: String,
    pub hash: String,
}

pub fn canonicalize<T: Serialize>(spec: &T) -> Canonical {
    // serde_json maps are BTreeMaps, so going through them sorts every key.
    let sorted = serde_json::to_value(spec).expect("config specs always serialize");
    let text = serde_yaml::to_string(&sorted).expect("json values always serialize to yaml");
    let hash = content_hash(text.as_bytes());
    Canonical { text, hash }
}

pub fn content_hash(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// The complete set of documents driving one experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigSet {
    pub model: ModelSpec,
    pub data: DataSpec,
    pub training: TrainSpec,
    pub viz: VizSpec,
}

impl ConfigSet {
    pub fn canonical(&self, kind: ConfigKind) -> Canonical {
        match kind {
            ConfigKind::Model => self.model.canonical(),
            ConfigKind::Data => self.data.canonical(),
            ConfigKind::Train => self.training.canonical(),
            ConfigKind::Viz => self.viz.canonical(),
        }
    }

    /// `(file key, hash)` for all four documents, in fixed order.
    pub fn hashes(&self) -> Vec<(&'static str, String)> {
        ConfigKind::ALL
            .iter()
            .map(|&k| (k.key(), self.canonical(k).hash))
            .collect()
    }

    /// Write canonical copies of all four documents into `out_dir`.
    pub fn snapshot(&self, out_dir: &Path) -> Result<()> {
        fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
        for kind in ConfigKind::ALL {
            let path = out_dir.join(kind.file_name());
            fs::write(&path, self.canonical(kind).text).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }

    /// Load the four snapshot files from a directory.
    pub fn load_dir(dir: &Path) -> Result<Self> {
        let read = |kind: ConfigKind| -> Result<String> {
            let path = dir.join(kind.file_name());
            fs::read_to_string(&path).map_err(|e| Error::io(&path, e))
        };
        Ok(ConfigSet {
            model: ModelSpec::parse(&read(ConfigKind::Model)?)?,
            data: DataSpec::parse(&read(ConfigKind::Data)?)?,
            training: TrainSpec::parse(&read(ConfigKind::Train)?)?,
            viz: VizSpec::parse(&read(ConfigKind::Viz)?)?,
        })
    }

    /// Cross-document checks that no single document can make on its own.
    pub fn validate(&self) -> Result<()> {
        if let Some(n) = self.data.synthetic_classes() {
            if n != self.data.num_classes {
                return Err(Error::schema(
                    "num_classes",
                    "synthetic dataset class count differs from num_classes",
                ));
            }
        }
        Ok(())
    }
}

/// Write canonical copies of all four documents into `out_dir` with fixed filenames.
pub fn snapshot_configs(configs: &ConfigSet, out_dir: &Path) -> Result<()> {
    configs.snapshot(out_dir)
}

pub(crate) fn parse_document(text: &str) -> Result<Value> {
    let value: Value = serde_yaml::from_str(text).map_err(|e| Error::Syntax(e.to_string()))?;
    match value {
        Value::Null => Ok(Value::Mapping(Default::default())),
        Value::Mapping(_) => Ok(value),
        _ => Err(Error::schema("<root>", "document must be a mapping")),
    }
}

pub(crate) fn join_path(prefix: &str, inner: &str) -> String {
    match (prefix.is_empty(), inner.is_empty() || inner == ".") {
        (true, true) => "<root>".to_string(),
        (true, false) => inner.to_string(),
        (false, true) => prefix.to_string(),
        (false, false) => format!("{prefix}.{inner}"),
    }
}

/// Deserialize `value` into `T`, reporting failures as a schema error at
/// `prefix` joined with the failing path inside the value.
pub(crate) fn from_value<T: DeserializeOwned>(value: Value, prefix: &str) -> Result<T> {
    let value = match value {
        Value::Null => Value::Mapping(Default::default()),
        v => v,
    };
    serde_path_to_error::deserialize(value).map_err(|e| {
        let inner = e.path().to_string().replace('[', ".").replace(']', "");
        let path = join_path(prefix, &inner);
        Error::schema(path, e.into_inner().to_string())
    })
}

pub(crate) fn require(cond: bool, path: &str, message: &str) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::schema(path, message))
    }
}

pub(crate) fn default_mapping() -> Value {
    Value::Mapping(Default::default())
}
