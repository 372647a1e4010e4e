//! Builds a variant, runs a batch through it, and round-trips the logits
//! through a tensor file.
//!
//! ```text
//! cargo run --release --example forward -- [variant] [resolution]
//! ```

use accvit::model::{Model, ModelOptions, VariantConfig};
use accvit::tensor::{io, Tensor};

fn main() -> accvit::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let variant = args.first().map_or("micro", String::as_str);
    let resolution = args.get(1).map_or(Ok(64), |s| s.parse()).expect("resolution must be an integer");
    let cfg = VariantConfig::named(variant)?;
    let model = Model::<f32>::build(&cfg, ModelOptions { num_classes: 10, resolution, ..Default::default() })?;
    println!("{variant} at {resolution}²: branches per stage {:?}", model.branch_schedule());

    let x = Tensor::<f32>::from_fn(&[2, 3, resolution, resolution], |i| ((i * 7919) % 1000) as f32 / 500.0 - 1.0)?;
    let start = std::time::Instant::now();
    let logits = model.infer(&x)?;
    println!("logits {:?} in {:.1} ms", logits.dims(), start.elapsed().as_secs_f64() * 1e3);
    for row in logits.data().chunks(10) {
        println!("  {:?}", row.iter().map(|v| format!("{v:+.3}")).collect::<Vec<_>>());
    }

    let dir = std::env::temp_dir().join("accvit-forward-example");
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("logits.tsr");
    io::save(&path, &logits)?;
    let back: Tensor<f32> = io::load(&path)?.into_precision();
    assert_eq!(back, logits);
    println!("saved and reloaded {}", path.display());
    Ok(())
}
