//! Import of models trained with the original PyTorch code.
//!
//! A legacy file is a safetensors state dict that keeps the original
//! parameter names. A [`LegacyMapping`] renames every tensor to its internal
//! name; the architecture (backbone depth and width, add-on, prototypes,
//! head) is inferred from the tensor shapes.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use ndarray::Array2;
use safetensors::{Dtype, SafeTensors};
use serde::Deserialize;

use crate::config::{
    AddOnLayer, BackboneSpec, ClassifierSpec, ExtractorSpec, ModelSpec, SimilaritySpec,
};
use crate::error::{Error, Result};
use crate::model::backbone::{BUILTIN_WIDTHS, TINY_WIDTHS};
use crate::model::{build_model, CbrModel, Head, TreeStructure};
use crate::repro;

const PROTOPNET_MAPPING: &str = include_str!("../../legacy/legacy_protopnet.json");
const PROTOTREE_MAPPING: &str = include_str!("../../legacy/legacy_prototree.json");

/// Similarity ε of the original ProtoPNet.
pub const LEGACY_EPSILON: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LegacyFormat {
    Protopnet,
    Prototree,
}

impl LegacyFormat {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "legacy_protopnet" => Ok(LegacyFormat::Protopnet),
            "legacy_prototree" => Ok(LegacyFormat::Prototree),
            other => Err(Error::UnknownFormat(other.to_string())),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            LegacyFormat::Protopnet => "legacy_protopnet",
            LegacyFormat::Prototree => "legacy_prototree",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TreeKeys {
    /// Leaf logits key; `{path}` expands to `.l`/`.r` steps from the root.
    pub leaf_key: String,
    /// Integer tensor mapping each branch's pre-order index to its prototype.
    pub node_map_key: String,
}

/// Renaming table from legacy keys to internal parameter names.
#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LegacyMapping {
    pub source_format: String,
    pub compatibility_mode: bool,
    pub parameters: BTreeMap<String, String>,
    #[serde(default)]
    pub ignored: Vec<String>,
    #[serde(default)]
    pub tree: Option<TreeKeys>,
}

impl LegacyMapping {
    /// The mapping shipped for `format`.
    pub fn builtin(format: LegacyFormat) -> Self {
        let text = match format {
            LegacyFormat::Protopnet => PROTOPNET_MAPPING,
            LegacyFormat::Prototree => PROTOTREE_MAPPING,
        };
        serde_json::from_str(text).expect("shipped mapping is valid")
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::corrupt(path, e.to_string()))
    }

    pub fn format(&self) -> Result<LegacyFormat> {
        LegacyFormat::parse(&self.source_format)
    }

    /// Legacy key of an internal parameter.
    fn source_of(&self, internal: &str) -> Option<&str> {
        self.parameters
            .iter()
            .find(|(_, v)| v.as_str() == internal)
            .map(|(k, _)| k.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LegacyTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Read every tensor of a safetensors file, widened to f64.
pub fn read_state_dict(path: &Path) -> Result<BTreeMap<String, LegacyTensor>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let st = SafeTensors::deserialize(&bytes).map_err(|e| Error::corrupt(path, e.to_string()))?;
    let mut out = BTreeMap::new();
    for (name, view) in st.tensors() {
        let raw = view.data();
        let data: Vec<f64> = match view.dtype() {
            Dtype::F32 => raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect(),
            Dtype::F64 => raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect(),
            Dtype::I64 => raw
                .chunks_exact(8)
                .map(|c| i64::from_le_bytes(c.try_into().expect("8 bytes")) as f64)
                .collect(),
            other => return Err(Error::corrupt(path, format!("tensor `{name}` has unsupported dtype {other:?}"))),
        };
        out.insert(
            name,
            LegacyTensor {
                shape: view.shape().to_vec(),
                data,
            },
        );
    }
    Ok(out)
}

struct Source<'a> {
    tensors: &'a BTreeMap<String, LegacyTensor>,
    used: BTreeSet<String>,
}

impl<'a> Source<'a> {
    fn take(&mut self, key: &str) -> Result<&'a LegacyTensor> {
        let t = self
            .tensors
            .get(key)
            .ok_or_else(|| Error::MissingParameter(key.to_string()))?;
        self.used.insert(key.to_string());
        Ok(t)
    }
}

fn mapped<'m>(mapping: &'m LegacyMapping, internal: &str) -> Result<&'m str> {
    mapping
        .source_of(internal)
        .ok_or_else(|| Error::MissingParameter(format!("(no mapping for `{internal}`)")))
}

/// Shapes agree once trailing unit dimensions are dropped.
fn squeezed(shape: &[usize]) -> &[usize] {
    let mut end = shape.len();
    while end > 0 && shape[end - 1] == 1 {
        end -= 1;
    }
    &shape[..end]
}

/// Import with the shipped mapping for `format`.
pub fn import_legacy(path: &Path, format: LegacyFormat) -> Result<CbrModel> {
    import_legacy_with(path, &LegacyMapping::builtin(format))
}

pub fn import_legacy_with(path: &Path, mapping: &LegacyMapping) -> Result<CbrModel> {
    let format = mapping.format()?;
    let tensors = read_state_dict(path)?;
    let mut src = Source {
        tensors: &tensors,
        used: BTreeSet::new(),
    };

    // Backbone blocks present in the file, in order.
    let mut widths = Vec::new();
    for b in 1..=4 {
        let key = mapped(mapping, &format!("backbone.block{b}.conv.weight"))?;
        match tensors.get(key) {
            Some(t) => widths.push(t.shape[0]),
            None if b > 1 => break,
            None => return Err(Error::MissingParameter(key.to_string())),
        }
    }
    let arch = if widths[..] == BUILTIN_WIDTHS[..widths.len()] {
        "builtin_cnn"
    } else if widths[..] == TINY_WIDTHS[..widths.len()] {
        "builtin_cnn_tiny"
    } else {
        return Err(Error::UnknownBackbone(format!("convolution widths {widths:?}")));
    };

    let protos = src.take(mapped(mapping, "prototypes")?)?;
    if protos.shape.len() < 2 {
        return Err(Error::ShapeMismatch(format!("prototype tensor has shape {:?}", protos.shape)));
    }
    let (num_protos, dim) = (protos.shape[0], protos.shape[1]);
    let out_of = |t: &LegacyTensor| t.shape[0];

    let (add_on, classifier, num_classes) = match format {
        LegacyFormat::Protopnet => {
            let a0 = src.take(mapped(mapping, "add_on.0.weight")?)?;
            let a2 = src.take(mapped(mapping, "add_on.2.weight")?)?;
            let head = src.take(mapped(mapping, "head.weights")?)?;
            let k = head.shape[0];
            if k == 0 || num_protos % k != 0 {
                return Err(Error::ShapeMismatch(format!(
                    "{num_protos} prototypes cannot be split evenly over {k} classes"
                )));
            }
            let add_on = vec![
                AddOnLayer::Conv1x1 { out_channels: out_of(a0) },
                AddOnLayer::Relu,
                AddOnLayer::Conv1x1 { out_channels: out_of(a2) },
                AddOnLayer::Sigmoid,
            ];
            (add_on, ClassifierSpec::protopnet(num_protos / k), k)
        }
        LegacyFormat::Prototree => {
            let keys = mapping
                .tree
                .as_ref()
                .ok_or_else(|| Error::UnknownFormat(format!("{} mapping without tree keys", mapping.source_format)))?;
            let a0 = src.take(mapped(mapping, "add_on.0.weight")?)?;
            let depth = (num_protos + 1).trailing_zeros() as usize;
            if (1usize << depth) != num_protos + 1 {
                return Err(Error::ShapeMismatch(format!("{num_protos} prototypes do not fill a complete tree")));
            }
            let first_leaf = keys.leaf_key.replace("{path}", &".l".repeat(depth));
            let k = src.take(&first_leaf)?.data.len();
            let add_on = vec![AddOnLayer::Conv1x1 { out_channels: out_of(a0) }, AddOnLayer::Sigmoid];
            (add_on, ClassifierSpec::prototree(depth), k)
        }
    };

    let spec = ModelSpec {
        extractor: ExtractorSpec {
            backbone: BackboneSpec {
                arch: arch.to_string(),
                layer: format!("block{}", widths.len()),
                pretrained_weights: None,
            },
            add_on,
        },
        similarity: SimilaritySpec {
            kind: classifier.default_similarity(),
            epsilon: LEGACY_EPSILON,
        },
        classifier,
        compatibility_mode: mapping.compatibility_mode,
        prototype_dim: dim,
    };
    let mut model = build_model(&spec, num_classes, &mut repro::substream(0, repro::INIT))?;

    for p in model.params_mut() {
        if p.name == "head.leaf_logits" {
            continue;
        }
        let key = mapped(mapping, &p.name)?;
        let t = src.take(key)?;
        if squeezed(&t.shape) != squeezed(&p.shape) {
            return Err(Error::ShapeMismatch(format!(
                "`{key}` has shape {:?}, `{}` expects {:?}",
                t.shape, p.name, p.shape
            )));
        }
        p.data.copy_from_slice(&t.data);
    }

    if let (Head::Tree(tree), Some(keys)) = (&mut model.head, &mapping.tree) {
        let node_map = src.take(&keys.node_map_key)?;
        let mut node_to_prototype = vec![0usize; tree.num_internal()];
        let mut leaves = Array2::zeros(tree.leaf_logits.dim());
        let mut walk = Walk {
            depth: tree.depth,
            pre: 0,
            src: &mut src,
            keys,
            node_map,
            node_to_prototype: &mut node_to_prototype,
            leaves: &mut leaves,
        };
        walk.visit(0, 0, String::new())?;
        tree.leaf_logits = leaves;
        let removed = tree.removed.clone();
        tree.set_structure(TreeStructure {
            node_to_prototype,
            removed,
        })?;
    }

    let ignored: BTreeSet<&str> = mapping.ignored.iter().map(String::as_str).collect();
    if let Some(extra) = tensors
        .keys()
        .find(|k| !src.used.contains(*k) && !ignored.contains(k.as_str()))
    {
        return Err(Error::corrupt(path, format!("legacy parameter `{extra}` has no mapping")));
    }
    Ok(model)
}

/// Pre-order traversal matching the original tree numbering.
struct Walk<'a, 'b> {
    depth: usize,
    pre: usize,
    src: &'a mut Source<'b>,
    keys: &'a TreeKeys,
    node_map: &'b LegacyTensor,
    node_to_prototype: &'a mut [usize],
    leaves: &'a mut Array2<f64>,
}

impl Walk<'_, '_> {
    fn visit(&mut self, heap: usize, level: usize, path: String) -> Result<()> {
        let pre = self.pre;
        self.pre += 1;
        if level == self.depth {
            let key = self.keys.leaf_key.replace("{path}", &path);
            let t = self.src.take(&key)?;
            let leaf = heap + 1 - (1usize << self.depth);
            if t.data.len() != self.leaves.dim().1 {
                return Err(Error::ShapeMismatch(format!("`{key}` has {} classes", t.data.len())));
            }
            self.leaves.row_mut(leaf).assign(&ndarray::aview1(&t.data));
            return Ok(());
        }
        let proto = *self
            .node_map
            .data
            .get(pre)
            .ok_or_else(|| Error::ShapeMismatch(format!("`{}` has no entry {pre}", self.keys.node_map_key)))?;
        if proto < 0.0 || proto as usize >= self.node_to_prototype.len() {
            return Err(Error::ShapeMismatch(format!("branch {pre} maps to prototype {proto}")));
        }
        self.node_to_prototype[heap] = proto as usize;
        self.visit(2 * heap + 1, level + 1, format!("{path}.l"))?;
        self.visit(2 * heap + 2, level + 1, format!("{path}.r"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture(name: &str) -> std::path::PathBuf {
        Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/legacy").join(name)
    }

    #[test]
    fn shipped_mappings_parse() {
        for f in [LegacyFormat::Protopnet, LegacyFormat::Prototree] {
            let m = LegacyMapping::builtin(f);
            assert_eq!(m.format().unwrap(), f);
            assert!(m.compatibility_mode);
        }
    }

    #[test]
    fn unknown_format_rejected() {
        assert!(matches!(LegacyFormat::parse("protopool"), Err(Error::UnknownFormat(_))));
    }

    #[test]
    fn infers_architecture() {
        let m = import_legacy(&fixture("protopnet_builtin_block3.safetensors"), LegacyFormat::Protopnet).unwrap();
        assert_eq!(m.spec.extractor.backbone.arch, "builtin_cnn");
        assert_eq!(m.spec.extractor.backbone.layer, "block3");
        assert_eq!(m.num_classes, 4);
        assert_eq!(m.mode, crate::model::Mode::Compatibility);
        let t = import_legacy(&fixture("prototree_tiny_depth3.safetensors"), LegacyFormat::Prototree).unwrap();
        assert!(matches!(&t.head, Head::Tree(h) if h.depth == 3));
    }

    #[test]
    fn wrong_format_reports_missing_key() {
        let err = import_legacy(&fixture("prototree_tiny_depth3.safetensors"), LegacyFormat::Protopnet).unwrap_err();
        assert!(matches!(err, Error::MissingParameter(k) if k == "features.features.0.weight"));
    }
}
