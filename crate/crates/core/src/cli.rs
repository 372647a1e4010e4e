//! Command-line front end. Every subcommand prints JSON on stdout unless
//! `--pretty` asks for a human table; diagnostics go to stderr.
//!
//! Exit codes: 0 success, 1 a verification failed (gradcheck over tolerance,
//! non-finite output, training diverged or missed its target), 2 usage or
//! configuration error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::harness::{self, TrainConfig};
use crate::model::{Model, ModelOptions, VariantConfig};
use crate::tensor::{io, Tensor};

#[derive(Debug, Parser)]
#[command(name = "accvit", version, about = "Atrous attention vision transformer toolkit")]
pub struct Cli {
    /// Human-readable tables instead of JSON.
    #[arg(long, global = true)]
    pub pretty: bool,
    /// Emit exactly one JSON document (the default for all but `train-toy`).
    #[arg(long, global = true, conflicts_with = "pretty")]
    pub json: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Per-stage configuration, parameter and FLOP counts of a variant.
    Describe {
        #[arg(long)]
        variant: String,
        #[arg(long, default_value_t = 224)]
        resolution: usize,
        #[arg(long, default_value_t = 1000)]
        num_classes: usize,
    },
    /// Runs a freshly initialized model on a tensor file and writes the logits.
    Forward(ForwardArgs),
    /// Compares analytic and finite-difference gradients of one component.
    Gradcheck {
        #[arg(long)]
        component: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Coordinates sampled per parameter tensor.
        #[arg(long, default_value_t = harness::gradcheck::DEFAULT_SAMPLES)]
        samples: usize,
    },
    /// Trains on the synthetic bar images.
    TrainToy {
        /// JSON training config; omitted fields take their defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Directory for config.json, metrics.jsonl and report.json.
        #[arg(long)]
        run_dir: Option<PathBuf>,
        /// Hold all gates at uniform fusion.
        #[arg(long)]
        freeze_gates: bool,
    },
    /// Times one stage's partitions, attention branches and conv block.
    Bench {
        #[arg(long, default_value = "tiny")]
        variant: String,
        /// 1-based stage index.
        #[arg(long)]
        stage: usize,
        #[arg(long, default_value_t = 224)]
        resolution: usize,
        #[arg(long, default_value_t = 3)]
        repeats: usize,
    },
}

#[derive(Debug, Args)]
pub struct ForwardArgs {
    #[arg(long)]
    pub variant: String,
    /// Input tensor file of shape (N, 3, S, S).
    #[arg(long)]
    pub input: PathBuf,
    /// Logits file; defaults to the input path with extension `logits.tsr`.
    #[arg(long)]
    pub output: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1000)]
    pub num_classes: usize,
}

/// Outcome of a subcommand that ran to completion.
enum Verdict {
    Pass,
    Fail,
}

pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::NonFinite(_) | Error::Divergence { .. } => 1,
        _ => 2,
    }
}

/// Sizes the global thread pool from `ACCVIT_THREADS` (default 1).
pub fn init_threads() -> Result<()> {
    let n = match std::env::var("ACCVIT_THREADS") {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::Usage(format!("ACCVIT_THREADS must be a positive integer, got {v:?}")))?,
        Err(_) => 1,
    };
    // A pool that already exists (e.g. in tests) is kept as is.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

pub fn main() -> ExitCode {
    let cli = Cli::parse();
    match init_threads().and_then(|()| run(&cli)) {
        Ok(Verdict::Pass) => ExitCode::SUCCESS,
        Ok(Verdict::Fail) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn emit<S: Serialize>(cli: &Cli, value: &S, human: impl FnOnce() -> String) -> Result<()> {
    if cli.pretty {
        print!("{}", human());
    } else {
        println!("{}", serde_json::to_string(value)?);
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<Verdict> {
    match &cli.command {
        Command::Describe { variant, resolution, num_classes } => describe(cli, variant, *resolution, *num_classes),
        Command::Forward(args) => forward(cli, args),
        Command::Gradcheck { component, seed, samples } => {
            let report = harness::gradcheck::gradcheck_with(component, *seed, *samples)?;
            emit(cli, &report, || {
                format!(
                    "{}: {} coordinates, max rel err {:.3e} (tolerance {:.0e}) {}\n",
                    report.component,
                    report.coordinates,
                    report.max_rel_err,
                    report.tolerance,
                    if report.passed { "PASS" } else { "FAIL" }
                )
            })?;
            Ok(if report.passed { Verdict::Pass } else { Verdict::Fail })
        }
        Command::TrainToy { config, run_dir, freeze_gates } => train(cli, config.as_deref(), run_dir.as_deref(), *freeze_gates),
        Command::Bench { variant, stage, resolution, repeats } => {
            let report = harness::bench(&VariantConfig::named(variant)?, *stage, *resolution, *repeats)?;
            emit(cli, &report, || bench_table(&report))?;
            Ok(Verdict::Pass)
        }
    }
}

fn describe(cli: &Cli, variant: &str, resolution: usize, num_classes: usize) -> Result<Verdict> {
    let cfg = VariantConfig::named(variant)?;
    let model = Model::<f32>::build(&cfg, ModelOptions { resolution, num_classes, ..Default::default() })?;
    let summary = model.count_params();
    let sides = cfg.stage_sides(resolution)?;
    let stages: Vec<_> = cfg
        .stages
        .iter()
        .enumerate()
        .map(|(i, s)| {
            json!({
                "stage": i + 1,
                "blocks": s.blocks,
                "channels": s.channels,
                "dilation_levels": s.dilation_levels,
                "side": sides[i + 1],
                "branches": s.dilation_levels + 1,
            })
        })
        .collect();
    let doc = json!({ "config": cfg, "stages": stages, "summary": summary });
    emit(cli, &doc, || {
        let mut out = format!("{} at {resolution}x{resolution}, {num_classes} classes\n", cfg.name);
        out.push_str(&format!("  stem: {} channels, side {}\n", cfg.stem.channels, sides[0]));
        for (i, s) in cfg.stages.iter().enumerate() {
            out.push_str(&format!(
                "  stage {}: {} block(s), {} channels, side {}, {} attention branch(es)\n",
                i + 1,
                s.blocks,
                s.channels,
                sides[i + 1],
                s.dilation_levels + 1
            ));
        }
        out.push_str(&format!("  params {:.3} M, FLOPs {:.3} G (multiply-accumulates)\n", summary.params_m, summary.flops_g));
        if let (Some(t), Some(dp), Some(df)) = (&summary.targets, summary.params_deviation_pct, summary.flops_deviation_pct) {
            out.push_str(&format!("  target {:.3} M ({dp:+.1}%), {:.3} G ({df:+.1}%)\n", t.params_m, t.flops_g));
        }
        out
    })?;
    Ok(Verdict::Pass)
}

/// SHA-256 of the little-endian scalar bytes (no header), so digests of
/// batches concatenate like the logits themselves.
pub fn logits_digest(t: &Tensor<f32>) -> String {
    hex::encode(Sha256::digest(t.to_le_bytes()))
}

fn default_output(input: &Path) -> PathBuf {
    input.with_extension("logits.tsr")
}

fn forward(cli: &Cli, args: &ForwardArgs) -> Result<Verdict> {
    let cfg = VariantConfig::named(&args.variant)?;
    let x: Tensor<f32> = io::load(&args.input)?.into_precision();
    let side = match *x.dims() {
        [_, 3, h, w] if h == w => h,
        ref d => return Err(Error::Usage(format!("input must have shape (N, 3, S, S), got {d:?}"))),
    };
    let model = Model::<f32>::build(
        &cfg,
        ModelOptions { num_classes: args.num_classes, seed: args.seed, resolution: side, ..Default::default() },
    )?;
    let logits = model.infer(&x)?;
    let finite = logits.data().iter().all(|v| v.is_finite());
    let output = args.output.clone().unwrap_or_else(|| default_output(&args.input));
    io::save(&output, &logits)?;
    let digest = logits_digest(&logits);
    let doc = json!({
        "variant": cfg.name,
        "seed": args.seed,
        "input": args.input,
        "input_dims": x.dims(),
        "output": output,
        "logits_dims": logits.dims(),
        "finite": finite,
        "sha256": digest,
    });
    emit(cli, &doc, || format!("{} logits {:?} -> {}\nsha256 {digest}\n", cfg.name, logits.dims(), output.display()))?;
    if !finite {
        eprintln!("error: logits contain non-finite values");
        return Ok(Verdict::Fail);
    }
    Ok(Verdict::Pass)
}

fn train(cli: &Cli, config: Option<&Path>, run_dir: Option<&Path>, freeze_gates: bool) -> Result<Verdict> {
    let mut cfg = match config {
        Some(p) => TrainConfig::from_json(&std::fs::read_to_string(p)?)?,
        None => TrainConfig::default(),
    };
    cfg.freeze_gates |= freeze_gates;
    let stream = !cli.json;
    let report = harness::train_toy(&cfg, run_dir, |m| {
        if !stream {
            return;
        }
        if cli.pretty {
            println!(
                "epoch {:>3}  loss {:.4}  train {:.3}  held-out {:.3}",
                m.epoch, m.loss, m.train_acc, m.heldout_acc
            );
        } else if let Ok(line) = serde_json::to_string(m) {
            println!("{line}");
        }
    });
    let report = match report {
        Err(Error::Divergence { epoch }) => {
            eprintln!("error: training diverged at epoch {epoch}");
            return Ok(Verdict::Fail);
        }
        other => other?,
    };
    let met = cfg.target_accuracy.is_none_or(|t| report.final_train_acc >= t);
    if cli.pretty {
        println!(
            "{} parameters, {} steps, final train accuracy {:.3}, held-out {:.3}",
            report.parameters, report.steps, report.final_train_acc, report.final_heldout_acc
        );
    } else if cli.json {
        println!("{}", serde_json::to_string(&report)?);
    } else {
        println!("{}", serde_json::to_string(&json!({ "final": report_summary(&report, cfg.target_accuracy) }))?);
    }
    if !met {
        eprintln!("error: train accuracy {:.3} below target", report.final_train_acc);
        return Ok(Verdict::Fail);
    }
    Ok(Verdict::Pass)
}

fn report_summary(r: &harness::TrainReport, target: Option<f64>) -> serde_json::Value {
    json!({
        "epochs": r.epochs.len(),
        "steps": r.steps,
        "parameters": r.parameters,
        "final_loss": r.final_loss,
        "final_train_acc": r.final_train_acc,
        "final_heldout_acc": r.final_heldout_acc,
        "target_accuracy": target,
    })
}

fn bench_table(r: &harness::BenchReport) -> String {
    let mut out = format!(
        "{} stage {} at {}x{} (side {}, {} channels), best of {}\n",
        r.variant, r.stage, r.resolution, r.resolution, r.side, r.channels, r.repeats
    );
    out.push_str(&format!("{:>5} {:>4} {:>6} {:>7} {:>12} {:>12} {:>12} {:>8}\n", "level", "rate", "window", "windows", "partition us", "attn us", "attn MACs", "GMAC/s"));
    for b in &r.branches {
        out.push_str(&format!(
            "{:>5} {:>4} {:>6} {:>7} {:>12.1} {:>12.1} {:>12} {:>8.2}\n",
            b.level, b.rate, b.window, b.windows, b.partition_micros, b.attention.micros, b.attention.macs, b.attention.gmacs_per_s
        ));
    }
    for (name, t) in [("attention layer", &r.attention_layer), ("conv block", &r.conv_block)] {
        out.push_str(&format!("{name:>16}: {:.1} us, {} MACs, {:.2} GMAC/s\n", t.micros, t.macs, t.gmacs_per_s));
    }
    out
}
