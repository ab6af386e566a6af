//! Import legacy state dicts and compare the two distance modes.
//!
//! `cargo run --example import_legacy -- [file.safetensors protopnet|prototree]`

use std::path::PathBuf;

use ndarray::Array4;
use protoparts::model::Mode;
use protoparts::persistence::legacy::{import_legacy, LegacyFormat};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let fixtures = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/legacy");
    let inputs = match args.as_slice() {
        [path, format] => vec![(PathBuf::from(path), LegacyFormat::parse(format)?)],
        _ => vec![
            (fixtures.join("protopnet_tiny.safetensors"), LegacyFormat::Protopnet),
            (fixtures.join("prototree_tiny_depth3.safetensors"), LegacyFormat::Prototree),
        ],
    };

    for (path, format) in inputs {
        let mut model = import_legacy(&path, format)?;
        let x = Array4::from_shape_fn((1, 3, 32, 32), |(_, c, h, w)| ((c + h * 3 + w * 7) % 11) as f64 / 11.0 - 0.5);
        let exact = model.forward(x.view())?.class_scores;
        model.set_mode(Mode::Compatibility);
        let compat = model.forward(x.view())?.class_scores;
        let diff = exact.iter().zip(&compat).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        println!(
            "{} ({}): {} prototypes, class scores {:.4}, max mode difference {diff:.2e}",
            path.file_name().unwrap().to_string_lossy(),
            format.name(),
            model.num_prototypes(),
            exact.row(0)
        );
    }
    Ok(())
}
