//! Parse, canonicalize and hash configuration documents, and show how
//! invalid documents are reported.
//!
//! `cargo run --example configs`

use protoparts::config::{parse_config, ConfigDocument, ConfigKind, ModelSpec};

const MODEL: &str = "
classifier:
  kind: prototree
  params: {depth: 3}
prototype_dim: 16
";

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let model = ModelSpec::parse(MODEL)?;
    let canonical = model.canonical();
    println!("canonical model document (sha256 {}):\n{}", canonical.hash, canonical.text);

    let reparsed = ModelSpec::parse(&canonical.text)?;
    println!("round trip identical: {}", reparsed == model);

    let broken = [
        (ConfigKind::Model, "classifier: {kind: protopnet, params: {num_prototypes_per_class: 0}}"),
        (ConfigKind::Data, "transform: [{op: sharpen}]"),
        (ConfigKind::Train, "num_epochs: -1"),
        (ConfigKind::Viz, "attribution: {type: smoothgrad, params: {num_samples: ten}}"),
    ];
    for (kind, text) in broken {
        match parse_config(text, kind) {
            Ok(_) => println!("{}: accepted", kind.file_name()),
            Err(e) => println!("{}: {e}", kind.file_name()),
        }
    }
    Ok(())
}
