use std::collections::BTreeMap;

use serde::ser::SerializeMap;
use serde::{Deserialize, Serialize, Serializer};
use serde_yaml::Value;

use super::{default_mapping, from_value, require, ConfigDocument, ConfigKind};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DataSpec {
    pub train_set: DatasetSpec,
    pub test_set: Option<DatasetSpec>,
    pub transform: Vec<TransformOp>,
    pub batch_size: usize,
    pub eval_batch_size: usize,
    pub num_classes: usize,
}

/// A dataset reference: registry name plus name-specific parameters.
#[derive(Debug, Clone, PartialEq)]
pub enum DatasetSpec {
    SyntheticShapes(SynthParams),
    ImageFolder(FolderParams),
    /// A name without a built-in loader; rejected by `load_dataset`.
    Other {
        name: String,
        params: BTreeMap<String, serde_json::Value>,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthParams {
    #[serde(default = "default_n")]
    pub n: usize,
    #[serde(default = "default_image_size")]
    pub image_size: usize,
    #[serde(default = "default_synth_seed")]
    pub seed: u64,
    #[serde(default = "default_synth_classes")]
    pub num_classes: usize,
}

fn default_n() -> usize {
    300
}

fn default_image_size() -> usize {
    32
}

fn default_synth_seed() -> u64 {
    7
}

fn default_synth_classes() -> usize {
    3
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            n: default_n(),
            image_size: default_image_size(),
            seed: default_synth_seed(),
            num_classes: default_synth_classes(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FolderParams {
    pub root: String,
    #[serde(default)]
    pub split: Option<String>,
}

impl DatasetSpec {
    pub fn name(&self) -> &str {
        match self {
            DatasetSpec::SyntheticShapes(_) => "synthetic_shapes",
            DatasetSpec::ImageFolder(_) => "image_folder",
            DatasetSpec::Other { name, .. } => name,
        }
    }

    fn from_yaml(value: Value, prefix: &str) -> Result<Self> {
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct Raw {
            #[serde(default = "default_name")]
            name: String,
            #[serde(default = "default_mapping")]
            params: Value,
        }
        fn default_name() -> String {
            "synthetic_shapes".to_string()
        }

        let raw: Raw = from_value(value, prefix)?;
        let params_path = format!("{prefix}.params");
        Ok(match raw.name.as_str() {
            "synthetic_shapes" => {
                let p: SynthParams = from_value(raw.params, &params_path)?;
                require(p.image_size >= 8, &format!("{params_path}.image_size"), "must be at least 8")?;
                require(
                    (2..=5).contains(&p.num_classes),
                    &format!("{params_path}.num_classes"),
                    "must be between 2 and 5",
                )?;
                require(
                    p.n >= p.num_classes,
                    &format!("{params_path}.n"),
                    "must be at least num_classes",
                )?;
                DatasetSpec::SyntheticShapes(p)
            }
            "image_folder" => DatasetSpec::ImageFolder(from_value(raw.params, &params_path)?),
            other => {
                require(!other.is_empty(), &format!("{prefix}.name"), "must not be empty")?;
                let params: BTreeMap<String, serde_json::Value> = from_value(raw.params, &params_path)?;
                DatasetSpec::Other {
                    name: other.to_string(),
                    params,
                }
            }
        })
    }
}

impl Serialize for DatasetSpec {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        let mut map = serializer.serialize_map(Some(2))?;
        map.serialize_entry("name", self.name())?;
        match self {
            DatasetSpec::SyntheticShapes(p) => map.serialize_entry("params", p)?,
            DatasetSpec::ImageFolder(p) => map.serialize_entry("params", p)?,
            DatasetSpec::Other { params, .. } => map.serialize_entry("params", params)?,
        }
        map.end()
    }
}

/// Preprocessing step. `resize` may only appear first and is applied once at
/// load time; `hflip` is stochastic and only applied to training batches;
/// the pipeline must end with `normalize`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case", deny_unknown_fields)]
pub enum TransformOp {
    Resize { size: usize },
    Hflip { p: f64 },
    Normalize { mean: [f64; 3], std: [f64; 3] },
}

pub fn default_transform() -> Vec<TransformOp> {
    vec![
        TransformOp::Hflip { p: 0.5 },
        TransformOp::Normalize {
            mean: [0.5, 0.5, 0.5],
            std: [0.25, 0.25, 0.25],
        },
    ]
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawData {
    #[serde(default = "default_mapping")]
    train_set: Value,
    #[serde(default, deserialize_with = "present")]
    test_set: Option<Value>,
    #[serde(default)]
    transform: Option<Vec<TransformOp>>,
    #[serde(default = "default_batch")]
    batch_size: usize,
    #[serde(default = "default_eval_batch")]
    eval_batch_size: usize,
    #[serde(default)]
    num_classes: Option<usize>,
}

/// Distinguishes an explicit `null` (`Some(Null)`) from an absent key (`None`).
fn present<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Option<Value>, D::Error> {
    Value::deserialize(d).map(Some)
}

/// Held-out set used when `test_set` is absent: a fresh synthetic draw
/// matching a synthetic train set, otherwise none.
fn default_test_set(train: &DatasetSpec) -> Option<DatasetSpec> {
    match train {
        DatasetSpec::SyntheticShapes(p) => Some(DatasetSpec::SyntheticShapes(SynthParams {
            n: 90,
            seed: 8,
            ..p.clone()
        })),
        _ => None,
    }
}

fn default_batch() -> usize {
    16
}

fn default_eval_batch() -> usize {
    64
}

impl ConfigDocument for DataSpec {
    const KIND: ConfigKind = ConfigKind::Data;

    fn from_yaml(value: Value) -> Result<Self> {
        let raw: RawData = from_value(value, "")?;
        let train_set = DatasetSpec::from_yaml(raw.train_set, "train_set")?;
        let test_set = match raw.test_set {
            None => default_test_set(&train_set),
            Some(Value::Null) => None,
            Some(v) => Some(DatasetSpec::from_yaml(v, "test_set")?),
        };
        let transform = raw.transform.unwrap_or_else(default_transform);
        require(!transform.is_empty(), "transform", "must not be empty")?;
        require(
            matches!(transform.last(), Some(TransformOp::Normalize { .. })),
            "transform",
            "must end with a normalize op",
        )?;
        for (i, op) in transform.iter().enumerate() {
            let path = format!("transform.{i}");
            match op {
                TransformOp::Resize { size } => {
                    require(i == 0, &path, "resize may only be the first op")?;
                    require(*size >= 8, &format!("{path}.size"), "must be at least 8")?;
                }
                TransformOp::Hflip { p } => {
                    require((0.0..=1.0).contains(p), &format!("{path}.p"), "must be in [0, 1]")?;
                }
                TransformOp::Normalize { std, .. } => {
                    require(i + 1 == transform.len(), &path, "normalize must be the last op")?;
                    require(
                        std.iter().all(|s| *s > 0.0 && s.is_finite()),
                        &format!("{path}.std"),
                        "must be positive",
                    )?;
                }
            }
        }
        require(raw.batch_size >= 1, "batch_size", "must be positive")?;
        require(raw.eval_batch_size >= 1, "eval_batch_size", "must be positive")?;

        let synth_classes = [Some(&train_set), test_set.as_ref()]
            .into_iter()
            .flatten()
            .find_map(|d| match d {
                DatasetSpec::SyntheticShapes(p) => Some(p.num_classes),
                _ => None,
            });
        let num_classes = match (raw.num_classes, synth_classes) {
            (Some(k), _) => k,
            (None, Some(k)) => k,
            (None, None) => {
                return Err(Error::schema(
                    "num_classes",
                    "required when no synthetic dataset is configured",
                ))
            }
        };
        require(num_classes >= 1, "num_classes", "must be positive")?;
        for (path, set) in [("train_set", Some(&train_set)), ("test_set", test_set.as_ref())] {
            if let Some(DatasetSpec::SyntheticShapes(p)) = set {
                require(
                    p.num_classes == num_classes,
                    &format!("{path}.params.num_classes"),
                    "must equal num_classes",
                )?;
            }
        }

        Ok(DataSpec {
            train_set,
            test_set,
            transform,
            batch_size: raw.batch_size,
            eval_batch_size: raw.eval_batch_size,
            num_classes,
        })
    }
}

impl Default for DataSpec {
    fn default() -> Self {
        DataSpec::from_yaml(default_mapping()).expect("empty data document is valid")
    }
}

impl DataSpec {
    pub(crate) fn synthetic_classes(&self) -> Option<usize> {
        match &self.train_set {
            DatasetSpec::SyntheticShapes(p) => Some(p.num_classes),
            _ => None,
        }
    }

    /// Mean and std of the trailing normalize op.
    pub fn normalization(&self) -> ([f64; 3], [f64; 3]) {
        match self.transform.last() {
            Some(TransformOp::Normalize { mean, std }) => (*mean, *std),
            _ => unreachable!("validated pipelines end with normalize"),
        }
    }

    pub fn resize(&self) -> Option<usize> {
        match self.transform.first() {
            Some(TransformOp::Resize { size }) => Some(*size),
            _ => None,
        }
    }

    /// Synthetic train/test sets with `n_train` / `n_test` items.
    pub fn synthetic(num_classes: usize, n_train: usize, n_test: Option<usize>) -> Self {
        let mut spec = DataSpec::default();
        spec.num_classes = num_classes;
        spec.train_set = DatasetSpec::SyntheticShapes(SynthParams {
            n: n_train,
            num_classes,
            ..SynthParams::default()
        });
        spec.test_set = n_test.map(|n| {
            DatasetSpec::SyntheticShapes(SynthParams {
                n,
                num_classes,
                seed: 8,
                ..SynthParams::default()
            })
        });
        spec
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_synthetic() {
        let spec = DataSpec::parse("").unwrap();
        assert_eq!(spec.num_classes, 3);
        assert_eq!(spec.train_set.name(), "synthetic_shapes");
        assert!(spec.test_set.is_some());
    }

    #[test]
    fn transform_must_end_with_normalize() {
        let err = DataSpec::parse("transform: [{op: hflip, p: 0.5}]").unwrap_err();
        assert!(matches!(err, Error::Schema { ref path, .. } if path == "transform"));
    }

    #[test]
    fn folder_requires_num_classes() {
        let doc = "train_set: {name: image_folder, params: {root: /tmp/x}}\ntest_set: null";
        let err = DataSpec::parse(doc).unwrap_err();
        assert!(matches!(err, Error::Schema { ref path, .. } if path == "num_classes"));
    }

    #[test]
    fn unknown_dataset_names_survive_parsing() {
        let doc = "train_set: {name: cub200, params: {root: /data}}\ntest_set: null\nnum_classes: 200";
        let spec = DataSpec::parse(doc).unwrap();
        assert_eq!(spec.train_set.name(), "cub200");
    }
}
