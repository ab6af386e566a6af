use serde::{Deserialize, Serialize};
use serde_yaml::Value;

use super::{default_mapping, from_value, require, ConfigDocument, ConfigKind};
use crate::error::{Error, Result};

pub const DEFAULT_PROTOTYPE_DIM: usize = 32;
pub const MAX_TREE_DEPTH: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelSpec {
    pub extractor: ExtractorSpec,
    pub classifier: ClassifierSpec,
    pub similarity: SimilaritySpec,
    pub compatibility_mode: bool,
    pub prototype_dim: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExtractorSpec {
    pub backbone: BackboneSpec,
    pub add_on: Vec<AddOnLayer>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneSpec {
    #[serde(default = "default_arch")]
    pub arch: String,
    #[serde(default = "default_layer")]
    pub layer: String,
    #[serde(default)]
    pub pretrained_weights: Option<String>,
}

fn default_arch() -> String {
    "builtin_cnn".to_string()
}

fn default_layer() -> String {
    "block4".to_string()
}

impl Default for BackboneSpec {
    fn default() -> Self {
        BackboneSpec {
            arch: default_arch(),
            layer: default_layer(),
            pretrained_weights: None,
        }
    }
}

/// One add-on layer. Convolutions infer their input channel count from the
/// preceding layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum AddOnLayer {
    Conv1x1 { out_channels: usize },
    Relu,
    Sigmoid,
}

/// Decision head plus its head-specific parameters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", content = "params", rename_all = "snake_case")]
pub enum ClassifierSpec {
    Protopnet(ProtopnetParams),
    Prototree(PrototreeParams),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtopnetParams {
    #[serde(default = "default_per_class")]
    pub num_prototypes_per_class: usize,
}

fn default_per_class() -> usize {
    2
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrototreeParams {
    #[serde(default = "default_depth")]
    pub depth: usize,
}

fn default_depth() -> usize {
    4
}

impl ClassifierSpec {
    pub fn protopnet(num_prototypes_per_class: usize) -> Self {
        ClassifierSpec::Protopnet(ProtopnetParams {
            num_prototypes_per_class,
        })
    }

    pub fn prototree(depth: usize) -> Self {
        ClassifierSpec::Prototree(PrototreeParams { depth })
    }

    pub fn name(&self) -> &'static str {
        match self {
            ClassifierSpec::Protopnet(_) => "protopnet",
            ClassifierSpec::Prototree(_) => "prototree",
        }
    }

    pub fn default_similarity(&self) -> SimilarityKind {
        match self {
            ClassifierSpec::Protopnet(_) => SimilarityKind::ProtopnetLog,
            ClassifierSpec::Prototree(_) => SimilarityKind::ExpNegL2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimilarityKind {
    /// `log((d² + 1) / (d² + ε))`
    ProtopnetLog,
    /// `exp(-d²)`
    ExpNegL2,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimilaritySpec {
    pub kind: SimilarityKind,
    pub epsilon: f64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawModel {
    #[serde(default = "default_mapping")]
    extractor: Value,
    #[serde(default = "default_mapping")]
    classifier: Value,
    #[serde(default = "default_mapping")]
    similarity: Value,
    #[serde(default)]
    compatibility_mode: bool,
    #[serde(default = "default_dim")]
    prototype_dim: usize,
}

fn default_dim() -> usize {
    DEFAULT_PROTOTYPE_DIM
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawExtractor {
    #[serde(default)]
    backbone: BackboneSpec,
    #[serde(default)]
    add_on: Option<Vec<AddOnLayer>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawClassifier {
    #[serde(default = "default_kind")]
    kind: String,
    #[serde(default = "default_mapping")]
    params: Value,
}

fn default_kind() -> String {
    "protopnet".to_string()
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSimilarity {
    #[serde(default)]
    kind: Option<SimilarityKind>,
    #[serde(default = "default_epsilon")]
    epsilon: f64,
}

fn default_epsilon() -> f64 {
    1e-4
}

/// Default add-on: two 1×1 convolutions down to the prototype dimension,
/// ending in a sigmoid so latent vectors live in `[0, 1]^D`.
pub fn default_add_on(prototype_dim: usize) -> Vec<AddOnLayer> {
    vec![
        AddOnLayer::Conv1x1 {
            out_channels: prototype_dim,
        },
        AddOnLayer::Relu,
        AddOnLayer::Conv1x1 {
            out_channels: prototype_dim,
        },
        AddOnLayer::Sigmoid,
    ]
}

impl ConfigDocument for ModelSpec {
    const KIND: ConfigKind = ConfigKind::Model;

    fn from_yaml(value: Value) -> Result<Self> {
        let raw: RawModel = from_value(value, "")?;
        require(raw.prototype_dim >= 1, "prototype_dim", "must be positive")?;

        let extractor: RawExtractor = from_value(raw.extractor, "extractor")?;
        require(
            !extractor.backbone.arch.is_empty(),
            "extractor.backbone.arch",
            "must not be empty",
        )?;
        let add_on = extractor
            .add_on
            .unwrap_or_else(|| default_add_on(raw.prototype_dim));
        for (i, layer) in add_on.iter().enumerate() {
            if let AddOnLayer::Conv1x1 { out_channels } = layer {
                require(
                    *out_channels >= 1,
                    &format!("extractor.add_on.{i}.out_channels"),
                    "must be positive",
                )?;
            }
        }
        if let Some((i, out)) = add_on.iter().enumerate().rev().find_map(|(i, l)| match l {
            AddOnLayer::Conv1x1 { out_channels } => Some((i, *out_channels)),
            _ => None,
        }) {
            require(
                out == raw.prototype_dim,
                &format!("extractor.add_on.{i}.out_channels"),
                "last add-on convolution must output prototype_dim channels",
            )?;
        }

        let classifier: RawClassifier = from_value(raw.classifier, "classifier")?;
        let classifier = match classifier.kind.as_str() {
            "protopnet" => {
                let p: ProtopnetParams = from_value(classifier.params, "classifier.params")?;
                require(
                    p.num_prototypes_per_class >= 1,
                    "classifier.params.num_prototypes_per_class",
                    "must be at least 1",
                )?;
                ClassifierSpec::Protopnet(p)
            }
            "prototree" => {
                let p: PrototreeParams = from_value(classifier.params, "classifier.params")?;
                require(p.depth >= 1, "classifier.params.depth", "must be at least 1")?;
                require(
                    p.depth <= MAX_TREE_DEPTH,
                    "classifier.params.depth",
                    "exceeds the maximum supported depth (16)",
                )?;
                ClassifierSpec::Prototree(p)
            }
            other => {
                return Err(Error::schema(
                    "classifier.kind",
                    format!("unknown classifier `{other}` (expected protopnet or prototree)"),
                ))
            }
        };

        let similarity: RawSimilarity = from_value(raw.similarity, "similarity")?;
        require(
            similarity.epsilon > 0.0 && similarity.epsilon.is_finite(),
            "similarity.epsilon",
            "must be positive and finite",
        )?;
        let kind = similarity
            .kind
            .unwrap_or_else(|| classifier.default_similarity());
        if matches!(classifier, ClassifierSpec::Prototree(_)) {
            require(
                kind == SimilarityKind::ExpNegL2,
                "similarity.kind",
                "tree routing requires similarities in [0, 1] (exp_neg_l2)",
            )?;
        }

        Ok(ModelSpec {
            extractor: ExtractorSpec {
                backbone: extractor.backbone,
                add_on,
            },
            classifier,
            similarity: SimilaritySpec {
                kind,
                epsilon: similarity.epsilon,
            },
            compatibility_mode: raw.compatibility_mode,
            prototype_dim: raw.prototype_dim,
        })
    }
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec::from_yaml(default_mapping()).expect("empty model document is valid")
    }
}

impl ModelSpec {
    pub fn protopnet(num_prototypes_per_class: usize) -> Self {
        ModelSpec::default().with_classifier(ClassifierSpec::protopnet(num_prototypes_per_class))
    }

    pub fn prototree(depth: usize) -> Self {
        ModelSpec::default().with_classifier(ClassifierSpec::prototree(depth))
    }

    /// Swap the head, resetting the similarity kind to the head's default.
    pub fn with_classifier(mut self, classifier: ClassifierSpec) -> Self {
        self.similarity.kind = classifier.default_similarity();
        self.classifier = classifier;
        self
    }

    pub fn with_backbone(mut self, arch: &str, layer: &str) -> Self {
        self.extractor.backbone.arch = arch.to_string();
        self.extractor.backbone.layer = layer.to_string();
        self
    }

    pub fn with_prototype_dim(mut self, dim: usize) -> Self {
        self.prototype_dim = dim;
        self.extractor.add_on = default_add_on(dim);
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tree_depth_nine() {
        let spec = ModelSpec::parse("classifier: {kind: prototree, params: {depth: 9}}").unwrap();
        assert_eq!(spec.classifier, ClassifierSpec::prototree(9));
        assert_eq!(spec.similarity.kind, SimilarityKind::ExpNegL2);
    }

    #[test]
    fn depth_key_rejected_for_protopnet() {
        let err = ModelSpec::parse("classifier: {kind: protopnet, params: {depth: 9}}").unwrap_err();
        match err {
            Error::Schema { path, .. } => assert_eq!(path, "classifier.params.depth"),
            e => panic!("unexpected {e:?}"),
        }
    }

    #[test]
    fn similarity_default_follows_head() {
        assert_eq!(
            ModelSpec::parse("{}").unwrap().similarity.kind,
            SimilarityKind::ProtopnetLog
        );
    }

    #[test]
    fn last_conv_must_match_dim() {
        let doc = "prototype_dim: 8\nextractor: {add_on: [{kind: conv1x1, out_channels: 16}, {kind: sigmoid}]}";
        match ModelSpec::parse(doc).unwrap_err() {
            Error::Schema { path, .. } => assert_eq!(path, "extractor.add_on.0.out_channels"),
            e => panic!("unexpected {e:?}"),
        }
    }

    #[test]
    fn unknown_top_level_key() {
        match ModelSpec::parse("prototype_dimension: 3").unwrap_err() {
            Error::Schema { path, .. } => assert_eq!(path, "prototype_dimension"),
            e => panic!("unexpected {e:?}"),
        }
    }

    #[test]
    fn malformed_yaml_is_syntax_error() {
        assert!(matches!(
            ModelSpec::parse("classifier: [unclosed"),
            Err(Error::Syntax(_))
        ));
    }
}
