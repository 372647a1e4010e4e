//! Trains the micro model on synthetic horizontal-vs-vertical bar images.
//!
//! ```text
//! cargo run --release --example train_toy -- [epochs] [--freeze-gates]
//! ```

use accvit::harness::{train_toy, TrainConfig};

fn main() -> accvit::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let epochs = args.iter().find_map(|a| a.parse().ok()).unwrap_or(50);
    let cfg = TrainConfig {
        epochs,
        freeze_gates: args.iter().any(|a| a == "--freeze-gates"),
        target_accuracy: Some(0.95),
        ..TrainConfig::default()
    };
    let start = std::time::Instant::now();
    let report = train_toy(&cfg, None, |m| {
        println!(
            "epoch {:>3}  loss {:.4}  train {:.3}  held-out {:.3}  ({:.1}s)",
            m.epoch,
            m.loss,
            m.train_acc,
            m.heldout_acc,
            start.elapsed().as_secs_f64()
        )
    })?;
    println!("{} parameters, {} steps, final train accuracy {:.3}", report.parameters, report.steps, report.final_train_acc);
    Ok(())
}
