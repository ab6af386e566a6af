use std::collections::BTreeMap;
use std::path::Path;

use crate::config::{OptimizerKind, OptimizerSpec};
use crate::error::{Error, Result};
use crate::model::{CbrModel, Gradients};
use crate::persistence::Tensor;

const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
struct Slot {
    name: String,
    /// First moment (Adam) or velocity (SGD).
    m: Vec<f64>,
    /// Second moment; empty for SGD.
    v: Vec<f64>,
    steps: u64,
}

/// SGD with momentum or Adam, with per-group learning rates. Parameters
/// without a gradient are left untouched, state included.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    spec: OptimizerSpec,
    slots: Vec<Slot>,
}

impl Optimizer {
    pub fn new(spec: &OptimizerSpec, model: &CbrModel) -> Self {
        let adam = spec.kind == OptimizerKind::Adam;
        let slots = model
            .params()
            .into_iter()
            .map(|p| Slot {
                name: p.name,
                m: vec![0.0; p.data.len()],
                v: if adam { vec![0.0; p.data.len()] } else { Vec::new() },
                steps: 0,
            })
            .collect();
        Optimizer {
            spec: spec.clone(),
            slots,
        }
    }

    pub fn step(&mut self, model: &mut CbrModel, grads: &Gradients) {
        let spec = &self.spec;
        for ((p, g), slot) in model.params_mut().into_iter().zip(&grads.0).zip(&mut self.slots) {
            let Some(g) = g else { continue };
            let lr = spec.learning_rates.get(p.group);
            let wd = spec.weight_decay;
            slot.steps += 1;
            match spec.kind {
                OptimizerKind::Sgd => {
                    for ((w, &gi), m) in p.data.iter_mut().zip(g).zip(&mut slot.m) {
                        let gi = gi + wd * *w;
                        *m = spec.momentum * *m + gi;
                        *w -= lr * *m;
                    }
                }
                OptimizerKind::Adam => {
                    let [b1, b2] = spec.betas;
                    let c1 = 1.0 - b1.powi(slot.steps as i32);
                    let c2 = 1.0 - b2.powi(slot.steps as i32);
                    for (((w, &gi), m), v) in p.data.iter_mut().zip(g).zip(&mut slot.m).zip(&mut slot.v) {
                        let gi = gi + wd * *w;
                        *m = b1 * *m + (1.0 - b1) * gi;
                        *v = b2 * *v + (1.0 - b2) * gi * gi;
                        *w -= lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
                    }
                }
            }
        }
    }

    /// State as named tensors: `<param>.m`, `<param>.v` (Adam) and `<param>.steps`.
    pub fn to_tensors(&self) -> Vec<Tensor> {
        let mut out = Vec::new();
        for s in &self.slots {
            out.push(Tensor::new(format!("{}.m", s.name), vec![s.m.len()], s.m.clone()));
            if self.spec.kind == OptimizerKind::Adam {
                out.push(Tensor::new(format!("{}.v", s.name), vec![s.v.len()], s.v.clone()));
            }
            out.push(Tensor::new(format!("{}.steps", s.name), vec![1], vec![s.steps as f64]));
        }
        out
    }

    pub fn from_tensors(spec: &OptimizerSpec, model: &CbrModel, tensors: &[Tensor], path: &Path) -> Result<Self> {
        let mut by_name: BTreeMap<&str, &Tensor> = tensors.iter().map(|t| (t.name.as_str(), t)).collect();
        let mut opt = Optimizer::new(spec, model);
        let mut take = |name: String, len: usize| -> Result<Vec<f64>> {
            let t = by_name
                .remove(name.as_str())
                .ok_or_else(|| Error::corrupt(path, format!("missing optimizer tensor `{name}`")))?;
            if t.data.len() != len {
                return Err(Error::corrupt(path, format!("optimizer tensor `{name}` has the wrong size")));
            }
            Ok(t.data.clone())
        };
        for s in &mut opt.slots {
            s.m = take(format!("{}.m", s.name), s.m.len())?;
            if spec.kind == OptimizerKind::Adam {
                s.v = take(format!("{}.v", s.name), s.v.len())?;
            }
            s.steps = take(format!("{}.steps", s.name), 1)?[0] as u64;
        }
        if let Some(name) = by_name.keys().next() {
            return Err(Error::corrupt(path, format!("unexpected optimizer tensor `{name}`")));
        }
        Ok(opt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{ModelSpec, ParamGroup};
    use crate::model::build_model;
    use crate::repro;

    fn model() -> CbrModel {
        let spec = ModelSpec::protopnet(1).with_backbone("builtin_cnn_tiny", "block2");
        build_model(&spec, 2, &mut repro::substream(1, repro::INIT)).unwrap()
    }

    #[test]
    fn frozen_params_unchanged_and_adam_matches_formula() {
        let mut m = model();
        let before = m.clone();
        let spec = OptimizerSpec::default();
        let mut opt = Optimizer::new(&spec, &m);
        let grads = Gradients(
            m.params()
                .iter()
                .map(|p| (p.group == ParamGroup::Prototypes).then(|| vec![0.5; p.data.len()]))
                .collect(),
        );
        opt.step(&mut m, &grads);
        let lr = spec.learning_rates.get(ParamGroup::Prototypes);
        for (a, b) in m.params().iter().zip(before.params().iter()) {
            if a.group == ParamGroup::Prototypes {
                // First bias-corrected Adam step moves by lr·g/(|g| + eps).
                for (x, y) in a.data.iter().zip(b.data) {
                    assert!((y - x - lr * 0.5 / (0.5 + ADAM_EPS)).abs() < 1e-15);
                }
            } else {
                assert!(a.data.iter().zip(b.data).all(|(x, y)| x.to_bits() == y.to_bits()));
            }
        }
    }

    #[test]
    fn sgd_momentum_accumulates() {
        let mut m = model();
        let mut spec = OptimizerSpec::default();
        spec.kind = OptimizerKind::Sgd;
        spec.momentum = 0.5;
        let start = m.prototypes.vectors[[0, 0]];
        let mut opt = Optimizer::new(&spec, &m);
        let grads = Gradients(
            m.params()
                .iter()
                .map(|p| (p.name == "prototypes").then(|| vec![1.0; p.data.len()]))
                .collect(),
        );
        opt.step(&mut m, &grads);
        opt.step(&mut m, &grads);
        let lr = spec.learning_rates.prototypes;
        assert!((start - m.prototypes.vectors[[0, 0]] - lr * 2.5).abs() < 1e-15);
    }

    #[test]
    fn state_round_trip() {
        let mut m = model();
        let spec = OptimizerSpec::default();
        let mut opt = Optimizer::new(&spec, &m);
        let grads = Gradients(m.params().iter().map(|p| Some(vec![0.1; p.data.len()])).collect());
        opt.step(&mut m, &grads);
        let back = Optimizer::from_tensors(&spec, &m, &opt.to_tensors(), Path::new("x")).unwrap();
        assert_eq!(back, opt);
    }
}
