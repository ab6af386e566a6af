//! The case-based classifier: extractor → similarity layer → decision layer.

pub mod backbone;
pub mod heads;
pub mod similarity;

use ndarray::{Array2, Array4, ArrayView2, ArrayView4};
use rand::Rng as _;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::config::{AddOnLayer, ClassifierSpec, ModelSpec, ParamGroup, SimilarityKind};
use crate::error::{Error, Result};
use crate::nn::{self, Conv2d, Layer, NamedLayer, Trace};
use crate::repro::Rng;

pub use backbone::{BackboneRegistry, INPUT_CHANNELS};
pub use heads::{LinearHead, TreeHead, TreeStructure};
pub use similarity::{Mode, SimilarityMap};

/// Provenance of one prototype.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypeRecord {
    pub source_image_id: Option<String>,
    pub location: Option<(usize, usize)>,
    pub projection_distance: Option<f64>,
    pub class_assignment: Option<usize>,
    pub active: bool,
}

impl PrototypeRecord {
    fn fresh(class_assignment: Option<usize>) -> Self {
        PrototypeRecord {
            source_image_id: None,
            location: None,
            projection_distance: None,
            class_assignment,
            active: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeBank {
    /// `[P, D]`
    pub vectors: Array2<f64>,
    pub records: Vec<PrototypeRecord>,
}

impl PrototypeBank {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn active(&self) -> Vec<bool> {
        self.records.iter().map(|r| r.active).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Head {
    Linear(LinearHead),
    Tree(TreeHead),
}

/// All intermediate outputs of one forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    pub latent: Array4<f64>,
    pub similarity: SimilarityMap,
    pub class_scores: Array2<f64>,
}

/// A forward pass that also recorded what the backward pass needs.
pub struct TracedForward {
    pub trace: Trace,
    pub forward: Forward,
}

/// Gradients aligned with [`CbrModel::params`]; `None` for tensors whose
/// group was not requested.
#[derive(Debug, Clone)]
pub struct Gradients(pub Vec<Option<Vec<f64>>>);

/// Read-only view of one parameter tensor.
pub struct Param<'a> {
    pub name: String,
    pub group: ParamGroup,
    pub shape: Vec<usize>,
    pub data: &'a [f64],
}

/// Mutable view of one parameter tensor.
pub struct ParamMut<'a> {
    pub name: String,
    pub group: ParamGroup,
    pub shape: Vec<usize>,
    pub data: &'a mut [f64],
}

#[derive(Debug, Clone)]
pub struct CbrModel {
    pub spec: ModelSpec,
    pub num_classes: usize,
    /// Backbone layers followed by add-on layers.
    pub layers: Vec<NamedLayer>,
    pub prototypes: PrototypeBank,
    pub head: Head,
    pub mode: Mode,
    /// Smallest accepted input height/width.
    pub min_input: usize,
}

pub fn build_model(spec: &ModelSpec, num_classes: usize, rng: &mut Rng) -> Result<CbrModel> {
    build_model_with(&BackboneRegistry::default(), spec, num_classes, rng)
}

/// Instantiate a model, drawing every initial value from `rng` in a fixed
/// order: backbone, add-on, prototypes.
pub fn build_model_with(
    registry: &BackboneRegistry,
    spec: &ModelSpec,
    num_classes: usize,
    rng: &mut Rng,
) -> Result<CbrModel> {
    if num_classes == 0 {
        return Err(Error::schema("num_classes", "must be positive"));
    }
    let backbone = &spec.extractor.backbone;
    let mut layers = registry.build(&backbone.arch, &backbone.layer, rng)?;
    let mut channels = backbone::output_channels(&layers, INPUT_CHANNELS);
    for (i, l) in spec.extractor.add_on.iter().enumerate() {
        let layer = match l {
            AddOnLayer::Conv1x1 { out_channels } => {
                let conv = Conv2d::init(channels, *out_channels, 1, rng);
                channels = *out_channels;
                Layer::Conv(conv)
            }
            AddOnLayer::Relu => Layer::Relu,
            AddOnLayer::Sigmoid => Layer::Sigmoid,
        };
        layers.push(NamedLayer::new(format!("add_on.{i}"), ParamGroup::AddOn, layer));
    }
    if channels != spec.prototype_dim {
        return Err(Error::ShapeMismatch(format!(
            "extractor outputs {channels} channels but prototype_dim is {}",
            spec.prototype_dim
        )));
    }
    let min_input = backbone::stride(&layers).max(1);

    let (records, head) = match &spec.classifier {
        ClassifierSpec::Protopnet(p) => {
            let class_of: Vec<usize> = (0..num_classes * p.num_prototypes_per_class)
                .map(|i| i / p.num_prototypes_per_class)
                .collect();
            let records = class_of.iter().map(|&k| PrototypeRecord::fresh(Some(k))).collect();
            (records, Head::Linear(LinearHead::init(num_classes, &class_of)))
        }
        ClassifierSpec::Prototree(p) => {
            let tree = TreeHead::init(p.depth, num_classes);
            let records = (0..tree.num_internal()).map(|_| PrototypeRecord::fresh(None)).collect();
            (records, Head::Tree(tree))
        }
    };
    let records: Vec<PrototypeRecord> = records;
    // Linear head: uniform on [0, 1). Tree head: N(0.5, 0.1), which keeps
    // initial routing scores away from zero.
    let mut head = head;
    let vectors = match &mut head {
        Head::Linear(_) => Array2::from_shape_fn((records.len(), spec.prototype_dim), |_| rng.gen::<f64>()),
        Head::Tree(t) => {
            let normal = Normal::new(0.5, 0.1).expect("valid normal");
            let v = Array2::from_shape_fn((records.len(), spec.prototype_dim), |_| normal.sample(rng));
            // Random leaf logits break the symmetry of uniform leaves.
            t.leaf_logits.mapv_inplace(|_| rng.sample::<f64, _>(StandardNormal));
            v
        }
    };

    let mut model = CbrModel {
        spec: spec.clone(),
        num_classes,
        layers,
        prototypes: PrototypeBank { vectors, records },
        head,
        mode: Mode::from_flag(spec.compatibility_mode),
        min_input,
    };
    if let Some(path) = &backbone.pretrained_weights {
        crate::persistence::load_backbone_weights(&mut model, std::path::Path::new(path))?;
    }
    Ok(model)
}

impl CbrModel {
    pub fn similarity_kind(&self) -> SimilarityKind {
        self.spec.similarity.kind
    }

    pub fn epsilon(&self) -> f64 {
        self.spec.similarity.epsilon
    }

    pub fn num_prototypes(&self) -> usize {
        self.prototypes.len()
    }

    /// Select the operation variants; see [`Mode`].
    pub fn set_mode(&mut self, mode: Mode) -> &mut Self {
        self.mode = mode;
        self
    }

    /// Prototypes taking part in the decision.
    pub fn active_prototypes(&self) -> Vec<bool> {
        self.prototypes.active()
    }

    fn check_input(&self, x: &ArrayView4<f64>) -> Result<()> {
        let (_, c, h, w) = x.dim();
        if c != INPUT_CHANNELS {
            return Err(Error::ShapeMismatch(format!("expected {INPUT_CHANNELS} channels, got {c}")));
        }
        if h < self.min_input || w < self.min_input {
            return Err(Error::ShapeMismatch(format!(
                "input {h}x{w} smaller than the backbone minimum {0}x{0}",
                self.min_input
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::ValueOutOfRange("non-finite input pixel".into()));
        }
        Ok(())
    }

    pub fn extract(&self, x: ArrayView4<f64>) -> Result<Array4<f64>> {
        self.check_input(&x)?;
        nn::forward(&self.layers, x.to_owned())
    }

    pub fn similarity(&self, latent: ArrayView4<f64>) -> Result<SimilarityMap> {
        similarity::similarity(
            latent,
            self.prototypes.vectors.view(),
            self.similarity_kind(),
            self.epsilon(),
            self.mode,
        )
    }

    pub fn decide(&self, scores: ArrayView2<f64>) -> Result<Array2<f64>> {
        match &self.head {
            Head::Linear(h) => h.forward(scores, &self.active_prototypes()),
            Head::Tree(t) => t.forward(scores),
        }
    }

    pub fn forward(&self, x: ArrayView4<f64>) -> Result<Forward> {
        let latent = self.extract(x)?;
        self.forward_from_latent(latent)
    }

    fn forward_from_latent(&self, latent: Array4<f64>) -> Result<Forward> {
        let similarity = self.similarity(latent.view())?;
        let class_scores = self.decide(similarity.scores.view())?;
        Ok(Forward {
            latent,
            similarity,
            class_scores,
        })
    }

    pub fn forward_traced(&self, x: ArrayView4<f64>) -> Result<TracedForward> {
        self.check_input(&x)?;
        let trace = nn::forward_trace(&self.layers, x.to_owned())?;
        let forward = self.forward_from_latent(trace.output.clone())?;
        Ok(TracedForward { trace, forward })
    }

    /// Gradient of the decision layer: returns the gradient w.r.t. the
    /// similarity scores and the head parameters.
    pub fn head_backward(&self, scores: ArrayView2<f64>, grad_class: ArrayView2<f64>) -> (Array2<f64>, Array2<f64>) {
        match &self.head {
            Head::Linear(h) => h.backward(scores, grad_class, &self.active_prototypes()),
            Head::Tree(t) => t.backward(scores, grad_class),
        }
    }

    /// Backpropagate from the similarity layer down.
    ///
    /// `grad_scores` is the gradient w.r.t. the spatial-max scores;
    /// `grad_d2` optionally adds a gradient directly on the squared
    /// distances. Parameter gradients are produced for groups where
    /// `trainable` holds; `head_grad` is passed through for the decision
    /// group. Returns the gradients and, if requested, the input gradient.
    pub fn backward(
        &self,
        traced: &TracedForward,
        grad_scores: ArrayView2<f64>,
        grad_d2: Option<Array4<f64>>,
        head_grad: Option<Array2<f64>>,
        trainable: &dyn Fn(ParamGroup) -> bool,
        want_input: bool,
    ) -> (Gradients, Option<Array4<f64>>) {
        let sim = &traced.forward.similarity;
        let (n, p, _, w) = sim.d2.dim();
        let mut g_d2 = grad_d2.unwrap_or_else(|| Array4::zeros(sim.d2.dim()));
        let kind = self.similarity_kind();
        let eps = self.epsilon();
        for ni in 0..n {
            for pi in 0..p {
                let g = grad_scores[[ni, pi]];
                if g != 0.0 {
                    let loc = sim.argmax[[ni, pi]];
                    let (y, x) = (loc / w, loc % w);
                    g_d2[[ni, pi, y, x]] += g * similarity::similarity_slope(sim.d2[[ni, pi, y, x]], kind, eps);
                }
            }
        }
        let (g_latent, g_protos) = similarity::distance_backward(
            traced.forward.latent.view(),
            self.prototypes.vectors.view(),
            &sim.d2,
            &g_d2,
            self.mode,
        );
        let (g_input, layer_grads) = nn::backward(&self.layers, &traced.trace, g_latent, trainable, want_input);

        let mut grads = Vec::new();
        for (l, g) in self.layers.iter().zip(layer_grads) {
            if let Layer::Conv(_) = l.layer {
                match g {
                    Some((gw, gb)) => {
                        grads.push(Some(gw.into_raw_vec_and_offset().0));
                        grads.push(Some(gb.into_raw_vec_and_offset().0));
                    }
                    None => {
                        grads.push(None);
                        grads.push(None);
                    }
                }
            }
        }
        grads.push(trainable(ParamGroup::Prototypes).then(|| g_protos.into_raw_vec_and_offset().0));
        grads.push(
            head_grad
                .filter(|_| trainable(ParamGroup::Decision))
                .map(|g| g.as_standard_layout().into_owned().into_raw_vec_and_offset().0),
        );
        (Gradients(grads), g_input)
    }

    /// Every parameter tensor, in a fixed order: layer weights and biases,
    /// prototypes, then the head.
    pub fn params(&self) -> Vec<Param<'_>> {
        let mut out = Vec::new();
        for l in &self.layers {
            if let Layer::Conv(c) = &l.layer {
                out.push(Param {
                    name: format!("{}.weight", l.name),
                    group: l.group,
                    shape: c.weight.shape().to_vec(),
                    data: c.weight.as_slice().expect("standard layout"),
                });
                out.push(Param {
                    name: format!("{}.bias", l.name),
                    group: l.group,
                    shape: c.bias.shape().to_vec(),
                    data: c.bias.as_slice().expect("standard layout"),
                });
            }
        }
        out.push(Param {
            name: "prototypes".into(),
            group: ParamGroup::Prototypes,
            shape: self.prototypes.vectors.shape().to_vec(),
            data: self.prototypes.vectors.as_slice().expect("standard layout"),
        });
        let (name, t) = match &self.head {
            Head::Linear(h) => ("head.weights", &h.weights),
            Head::Tree(t) => ("head.leaf_logits", &t.leaf_logits),
        };
        out.push(Param {
            name: name.into(),
            group: ParamGroup::Decision,
            shape: t.shape().to_vec(),
            data: t.as_slice().expect("standard layout"),
        });
        out
    }

    pub fn params_mut(&mut self) -> Vec<ParamMut<'_>> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            if let Layer::Conv(c) = &mut l.layer {
                let wshape = c.weight.shape().to_vec();
                let bshape = c.bias.shape().to_vec();
                out.push(ParamMut {
                    name: format!("{}.weight", l.name),
                    group: l.group,
                    shape: wshape,
                    data: c.weight.as_slice_mut().expect("standard layout"),
                });
                out.push(ParamMut {
                    name: format!("{}.bias", l.name),
                    group: l.group,
                    shape: bshape,
                    data: c.bias.as_slice_mut().expect("standard layout"),
                });
            }
        }
        let pshape = self.prototypes.vectors.shape().to_vec();
        out.push(ParamMut {
            name: "prototypes".into(),
            group: ParamGroup::Prototypes,
            shape: pshape,
            data: self.prototypes.vectors.as_slice_mut().expect("standard layout"),
        });
        let (name, t) = match &mut self.head {
            Head::Linear(h) => ("head.weights", &mut h.weights),
            Head::Tree(t) => ("head.leaf_logits", &mut t.leaf_logits),
        };
        let shape = t.shape().to_vec();
        out.push(ParamMut {
            name: name.into(),
            group: ParamGroup::Decision,
            shape,
            data: t.as_slice_mut().expect("standard layout"),
        });
        out
    }

    /// Prototype class of each prototype (linear head only).
    pub fn prototype_classes(&self) -> Vec<Option<usize>> {
        self.prototypes.records.iter().map(|r| r.class_assignment).collect()
    }

    /// Latent map stride relative to the input.
    pub fn stride(&self) -> usize {
        backbone::stride(&self.layers)
    }

    /// Apply a permutation to prototype order, adjusting the head so that
    /// class scores are unchanged. `perm[new] = old`.
    pub fn permute_prototypes(&mut self, perm: &[usize]) {
        let old = self.prototypes.clone();
        for (new, &o) in perm.iter().enumerate() {
            self.prototypes.vectors.row_mut(new).assign(&old.vectors.row(o));
            self.prototypes.records[new] = old.records[o].clone();
        }
        match &mut self.head {
            Head::Linear(h) => {
                let w = h.weights.clone();
                for (new, &o) in perm.iter().enumerate() {
                    h.weights.column_mut(new).assign(&w.column(o));
                }
            }
            Head::Tree(t) => {
                let mut inverse = vec![0; perm.len()];
                for (new, &o) in perm.iter().enumerate() {
                    inverse[o] = new;
                }
                for p in t.node_to_prototype.iter_mut() {
                    *p = inverse[*p];
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelSpec;
    use rand::SeedableRng;

    fn rng() -> Rng {
        Rng::seed_from_u64(17)
    }

    #[test]
    fn tree_depth_nine_counts() {
        let model = build_model(&ModelSpec::prototree(9), 3, &mut rng()).unwrap();
        assert_eq!(model.num_prototypes(), 511);
        match &model.head {
            Head::Tree(t) => assert_eq!(t.num_leaves(), 512),
            _ => panic!(),
        }
    }

    #[test]
    fn protopnet_shapes() {
        let model = build_model(&ModelSpec::protopnet(2), 10, &mut rng()).unwrap();
        assert_eq!(model.num_prototypes(), 20);
        match &model.head {
            Head::Linear(h) => assert_eq!(h.weights.dim(), (10, 20)),
            _ => panic!(),
        }
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = build_model(&ModelSpec::default(), 3, &mut rng()).unwrap();
        let b = build_model(&ModelSpec::default(), 3, &mut rng()).unwrap();
        for (pa, pb) in a.params().iter().zip(b.params().iter()) {
            assert_eq!(pa.name, pb.name);
            assert!(pa.data.iter().zip(pb.data).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn prototypes_in_unit_cube() {
        let m = build_model(&ModelSpec::default(), 3, &mut rng()).unwrap();
        assert!(m.prototypes.vectors.iter().all(|v| (0.0..1.0).contains(v)));
    }

    #[test]
    fn latent_is_four_by_four_for_32px() {
        let m = build_model(&ModelSpec::default(), 3, &mut rng()).unwrap();
        let x = Array4::zeros((1, 3, 32, 32));
        let z = m.extract(x.view()).unwrap();
        assert_eq!(z.dim(), (1, 32, 4, 4));
        assert!(z.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn add_on_shape_mismatch() {
        let mut spec = ModelSpec::default();
        spec.prototype_dim = 7;
        assert!(matches!(
            build_model(&spec, 3, &mut rng()),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn rejects_small_inputs() {
        let m = build_model(&ModelSpec::default(), 3, &mut rng()).unwrap();
        let x = Array4::zeros((1, 3, 4, 4));
        assert!(matches!(m.forward(x.view()), Err(Error::ShapeMismatch(_))));
    }
}
