use serde::{Deserialize, Serialize};
use serde_yaml::Value;

use super::{default_mapping, from_value, require, ConfigDocument, ConfigKind};
use crate::error::{Error, Result};

/// Trainable parameter groups.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Backbone,
    AddOn,
    Prototypes,
    Decision,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 4] = [
        ParamGroup::Backbone,
        ParamGroup::AddOn,
        ParamGroup::Prototypes,
        ParamGroup::Decision,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::Backbone => "backbone",
            ParamGroup::AddOn => "add_on",
            ParamGroup::Prototypes => "prototypes",
            ParamGroup::Decision => "decision",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainSpec {
    pub num_epochs: usize,
    pub optimizer: OptimizerSpec,
    pub freeze_schedule: Vec<FreezePhase>,
    pub loss: LossSpec,
    pub seed: u64,
    pub projection_epoch: Option<usize>,
    pub pruning: PruningSpec,
    /// Save a checkpoint after every `checkpoint_every` epochs (0 disables).
    pub checkpoint_every: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerSpec {
    #[serde(default = "default_optimizer")]
    pub kind: OptimizerKind,
    #[serde(default)]
    pub learning_rates: LearningRates,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_betas")]
    pub betas: [f64; 2],
    #[serde(default)]
    pub weight_decay: f64,
}

fn default_optimizer() -> OptimizerKind {
    OptimizerKind::Adam
}

fn default_momentum() -> f64 {
    0.9
}

fn default_betas() -> [f64; 2] {
    [0.9, 0.999]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LearningRates {
    #[serde(default = "lr_backbone")]
    pub backbone: f64,
    #[serde(default = "lr_add_on")]
    pub add_on: f64,
    #[serde(default = "lr_prototypes")]
    pub prototypes: f64,
    #[serde(default = "lr_decision")]
    pub decision: f64,
}

fn lr_backbone() -> f64 {
    1e-3
}

fn lr_add_on() -> f64 {
    2e-3
}

fn lr_prototypes() -> f64 {
    5e-3
}

fn lr_decision() -> f64 {
    2e-3
}

impl Default for LearningRates {
    fn default() -> Self {
        LearningRates {
            backbone: lr_backbone(),
            add_on: lr_add_on(),
            prototypes: lr_prototypes(),
            decision: lr_decision(),
        }
    }
}

impl LearningRates {
    pub fn get(&self, group: ParamGroup) -> f64 {
        match group {
            ParamGroup::Backbone => self.backbone,
            ParamGroup::AddOn => self.add_on,
            ParamGroup::Prototypes => self.prototypes,
            ParamGroup::Decision => self.decision,
        }
    }
}

impl Default for OptimizerSpec {
    fn default() -> Self {
        from_value(default_mapping(), "optimizer").expect("defaults are valid")
    }
}

/// Trainable groups for epochs `epochs[0] .. epochs[1]` (end exclusive).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FreezePhase {
    pub epochs: [usize; 2],
    pub trainable: Vec<ParamGroup>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossSpec {
    /// Cluster-cost coefficient (linear head only).
    #[serde(default = "default_cluster")]
    pub cluster: f64,
    /// Separation-cost coefficient (linear head only).
    #[serde(default = "default_separation")]
    pub separation: f64,
}

fn default_cluster() -> f64 {
    0.8
}

fn default_separation() -> f64 {
    0.08
}

impl Default for LossSpec {
    fn default() -> Self {
        LossSpec {
            cluster: default_cluster(),
            separation: default_separation(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PruningSpec {
    #[serde(default = "yes")]
    pub enabled: bool,
    /// Linear head: prototypes whose largest absolute weight is below this are deactivated.
    #[serde(default = "default_weight_threshold")]
    pub weight_threshold: f64,
    /// Tree head: subtrees whose leaves all have max class probability below this are removed.
    #[serde(default = "default_leaf_threshold")]
    pub leaf_threshold: f64,
}

fn yes() -> bool {
    true
}

fn default_weight_threshold() -> f64 {
    1e-3
}

fn default_leaf_threshold() -> f64 {
    0.01
}

impl Default for PruningSpec {
    fn default() -> Self {
        PruningSpec {
            enabled: true,
            weight_threshold: default_weight_threshold(),
            leaf_threshold: default_leaf_threshold(),
        }
    }
}

/// Number of warm-up epochs in the default schedule, during which the
/// backbone is frozen.
pub const WARMUP_EPOCHS: usize = 2;

/// Warm-up on add-on, prototypes and decision layer, then everything.
pub fn default_freeze_schedule(num_epochs: usize) -> Vec<FreezePhase> {
    let warm = WARMUP_EPOCHS.min(num_epochs);
    let mut phases = Vec::new();
    if warm > 0 {
        phases.push(FreezePhase {
            epochs: [0, warm],
            trainable: vec![ParamGroup::AddOn, ParamGroup::Prototypes, ParamGroup::Decision],
        });
    }
    if num_epochs > warm {
        phases.push(FreezePhase {
            epochs: [warm, num_epochs],
            trainable: ParamGroup::ALL.to_vec(),
        });
    }
    phases
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTrain {
    #[serde(default = "default_epochs")]
    num_epochs: usize,
    #[serde(default)]
    optimizer: OptimizerSpec,
    #[serde(default)]
    freeze_schedule: Option<Vec<FreezePhase>>,
    #[serde(default)]
    loss: LossSpec,
    #[serde(default)]
    seed: u64,
    #[serde(default)]
    projection_epoch: Option<usize>,
    #[serde(default)]
    pruning: PruningSpec,
    #[serde(default = "default_checkpoint_every")]
    checkpoint_every: usize,
}

fn default_epochs() -> usize {
    20
}

fn default_checkpoint_every() -> usize {
    5
}

impl ConfigDocument for TrainSpec {
    const KIND: ConfigKind = ConfigKind::Train;

    fn from_yaml(value: Value) -> Result<Self> {
        let raw: RawTrain = from_value(value, "")?;
        let o = &raw.optimizer;
        for group in ParamGroup::ALL {
            let lr = o.learning_rates.get(group);
            require(
                lr >= 0.0 && lr.is_finite(),
                &format!("optimizer.learning_rates.{}", group.name()),
                "must be nonnegative and finite",
            )?;
        }
        require(
            (0.0..1.0).contains(&o.momentum),
            "optimizer.momentum",
            "must be in [0, 1)",
        )?;
        require(
            o.betas.iter().all(|b| (0.0..1.0).contains(b)),
            "optimizer.betas",
            "must be in [0, 1)",
        )?;
        require(
            o.weight_decay >= 0.0 && o.weight_decay.is_finite(),
            "optimizer.weight_decay",
            "must be nonnegative",
        )?;
        require(
            raw.loss.cluster.is_finite() && raw.loss.separation.is_finite(),
            "loss",
            "coefficients must be finite",
        )?;
        require(
            raw.pruning.weight_threshold >= 0.0,
            "pruning.weight_threshold",
            "must be nonnegative",
        )?;
        require(
            raw.pruning.leaf_threshold >= 0.0,
            "pruning.leaf_threshold",
            "must be nonnegative",
        )?;

        let schedule = raw
            .freeze_schedule
            .unwrap_or_else(|| default_freeze_schedule(raw.num_epochs));
        check_schedule(&schedule, raw.num_epochs)?;

        if let Some(p) = raw.projection_epoch {
            require(
                p < raw.num_epochs,
                "projection_epoch",
                "must be less than num_epochs",
            )?;
        }

        Ok(TrainSpec {
            num_epochs: raw.num_epochs,
            optimizer: raw.optimizer,
            freeze_schedule: schedule,
            loss: raw.loss,
            seed: raw.seed,
            projection_epoch: raw.projection_epoch,
            pruning: raw.pruning,
            checkpoint_every: raw.checkpoint_every,
        })
    }
}

/// Phases must tile `[0, num_epochs)` in order, each nonempty with at least
/// one trainable group.
fn check_schedule(schedule: &[FreezePhase], num_epochs: usize) -> Result<()> {
    let mut next = 0;
    for (i, phase) in schedule.iter().enumerate() {
        let path = format!("freeze_schedule.{i}");
        let [start, end] = phase.epochs;
        if start != next {
            return Err(Error::schema(
                format!("{path}.epochs"),
                format!("phase starts at {start}, expected {next} (gap or overlap)"),
            ));
        }
        require(end > start, &format!("{path}.epochs"), "phase must be nonempty")?;
        require(
            !phase.trainable.is_empty(),
            &format!("{path}.trainable"),
            "at least one group must be trainable",
        )?;
        next = end;
    }
    require(
        next == num_epochs,
        "freeze_schedule",
        "phases must cover every epoch up to num_epochs",
    )
}

impl Default for TrainSpec {
    fn default() -> Self {
        TrainSpec::from_yaml(default_mapping()).expect("empty training document is valid")
    }
}

impl TrainSpec {
    /// Default spec with `num_epochs` epochs and a matching default schedule.
    pub fn with_epochs(num_epochs: usize) -> Self {
        let mut spec = TrainSpec::default();
        spec.num_epochs = num_epochs;
        spec.freeze_schedule = default_freeze_schedule(num_epochs);
        spec.projection_epoch = None;
        spec
    }

    pub fn trainable(&self, epoch: usize) -> Vec<ParamGroup> {
        self.freeze_schedule
            .iter()
            .find(|p| p.epochs[0] <= epoch && epoch < p.epochs[1])
            .map(|p| p.trainable.clone())
            .unwrap_or_default()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_schedule_tiles_epochs() {
        for n in 0..6 {
            check_schedule(&default_freeze_schedule(n), n).unwrap();
        }
    }

    #[test]
    fn overlapping_phases_rejected() {
        let doc = "num_epochs: 4\nfreeze_schedule:\n  - {epochs: [0, 3], trainable: [backbone]}\n  - {epochs: [2, 4], trainable: [decision]}";
        let err = TrainSpec::parse(doc).unwrap_err();
        assert!(matches!(err, Error::Schema { ref path, .. } if path == "freeze_schedule.1.epochs"));
    }

    #[test]
    fn projection_epoch_bounded() {
        let err = TrainSpec::parse("num_epochs: 3\nprojection_epoch: 3").unwrap_err();
        assert!(matches!(err, Error::Schema { ref path, .. } if path == "projection_epoch"));
    }

    #[test]
    fn zero_epochs_is_valid() {
        let spec = TrainSpec::parse("num_epochs: 0").unwrap();
        assert!(spec.freeze_schedule.is_empty());
    }
}
