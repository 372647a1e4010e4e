//! Builds every published variant and compares its size with the published table.
//!
//! ```text
//! cargo run --release --example variants
//! ```

use accvit::model::{Model, ModelOptions, VariantConfig};

fn main() -> accvit::Result<()> {
    println!("{:<6} {:>10} {:>8} {:>8} {:>10} {:>8} {:>8}", "name", "params(M)", "target", "dev%", "FLOPs(G)", "target", "dev%");
    for cfg in VariantConfig::published() {
        let model = Model::<f32>::build(&cfg, ModelOptions::default())?;
        let s = model.count_params();
        let t = s.targets.expect("published variants carry targets");
        println!(
            "{:<6} {:>10.3} {:>8.3} {:>+8.1} {:>10.3} {:>8.3} {:>+8.1}",
            s.variant,
            s.params_m,
            t.params_m,
            s.params_deviation_pct.unwrap(),
            s.flops_g,
            t.flops_g,
            s.flops_deviation_pct.unwrap()
        );
    }
    Ok(())
}
