//! Backbone registry and the built-in CNNs.
//!
//! `builtin_cnn` is four blocks of `conv3x3 (pad 1) → relu`, with a 2×2
//! stride-2 max-pool closing blocks 1–3. Channel widths are 16, 32, 64, 128
//! (97,440 parameters). A 32×32 input gives a 4×4 map after `block3` or
//! `block4`, 8×8 after `block2` and 16×16 after `block1`.
//!
//! `builtin_cnn_tiny` has the same layout with widths 4, 8, 8, 8 and is used
//! for fixtures and quick experiments.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::config::ParamGroup;
use crate::error::{Error, Result};
use crate::nn::{Conv2d, Layer, NamedLayer};
use crate::repro::Rng;

pub const INPUT_CHANNELS: usize = 3;

/// Builds the layers of a backbone truncated at `layer`.
pub type BackboneBuilder = Arc<dyn Fn(&str, &mut Rng) -> Result<Vec<NamedLayer>> + Send + Sync>;

#[derive(Clone)]
pub struct BackboneRegistry {
    builders: BTreeMap<String, BackboneBuilder>,
}

impl Default for BackboneRegistry {
    fn default() -> Self {
        let mut reg = BackboneRegistry {
            builders: BTreeMap::new(),
        };
        reg.register("builtin_cnn", Arc::new(|layer, rng| builtin("builtin_cnn", &BUILTIN_WIDTHS, layer, rng)));
        reg.register("builtin_cnn_tiny", Arc::new(|layer, rng| builtin("builtin_cnn_tiny", &TINY_WIDTHS, layer, rng)));
        reg
    }
}

impl BackboneRegistry {
    pub fn register(&mut self, arch: &str, builder: BackboneBuilder) {
        self.builders.insert(arch.to_string(), builder);
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.builders.keys().map(String::as_str)
    }

    pub fn build(&self, arch: &str, layer: &str, rng: &mut Rng) -> Result<Vec<NamedLayer>> {
        let builder = self
            .builders
            .get(arch)
            .ok_or_else(|| Error::UnknownBackbone(arch.to_string()))?;
        builder(layer, rng)
    }
}

pub const BUILTIN_WIDTHS: [usize; 4] = [16, 32, 64, 128];
pub const TINY_WIDTHS: [usize; 4] = [4, 8, 8, 8];

/// Number of pooling stages in the built-in backbones (blocks 1–3).
pub const BUILTIN_POOLS: usize = 3;

fn builtin(arch: &str, widths: &[usize; 4], layer: &str, rng: &mut Rng) -> Result<Vec<NamedLayer>> {
    let blocks = match layer {
        "block1" => 1,
        "block2" => 2,
        "block3" => 3,
        "block4" => 4,
        other => {
            return Err(Error::schema(
                "extractor.backbone.layer",
                format!("`{other}` is not a layer of {arch} (block1..block4)"),
            ))
        }
    };
    let mut layers = Vec::new();
    let mut in_ch = INPUT_CHANNELS;
    for (b, &width) in widths.iter().enumerate().take(blocks) {
        let name = format!("backbone.block{}", b + 1);
        layers.push(NamedLayer::new(
            format!("{name}.conv"),
            ParamGroup::Backbone,
            Layer::Conv(Conv2d::init(in_ch, width, 3, rng)),
        ));
        layers.push(NamedLayer::new(format!("{name}.relu"), ParamGroup::Backbone, Layer::Relu));
        if b < BUILTIN_POOLS {
            layers.push(NamedLayer::new(format!("{name}.pool"), ParamGroup::Backbone, Layer::MaxPool2));
        }
        in_ch = width;
    }
    Ok(layers)
}

/// Channel count after running `layers` on an input with `input` channels.
pub fn output_channels(layers: &[NamedLayer], input: usize) -> usize {
    layers.iter().fold(input, |c, l| match &l.layer {
        Layer::Conv(conv) => conv.out_channels(),
        Layer::Custom(custom) => custom.output_channels(c),
        _ => c,
    })
}

/// Total downsampling factor of a layer stack.
pub fn stride(layers: &[NamedLayer]) -> usize {
    layers
        .iter()
        .filter(|l| matches!(l.layer, Layer::MaxPool2))
        .fold(1, |s, _| s * 2)
}
