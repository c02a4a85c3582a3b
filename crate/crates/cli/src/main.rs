use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crackseg_cli::{cmd_ablate, cmd_eval, cmd_predict, cmd_profile, cmd_train, cmd_visualize, RunConfig};
use crackseg_core::Result;

/// Crack segmentation with frozen generic-feature fusion.
#[derive(Parser)]
#[command(name = "crackseg", version)]
struct Cli {
    #[command(subcommand)]
    verb: Verb,
}

#[derive(clap::Args)]
struct Common {
    /// Flat `key = value` config file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Any config key as `--key value` (for example `--fusion_mode none --input_size 256x256`).
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Verb {
    /// Fit a model; writes the log, checkpoints and resolved config.
    Train(Common),
    /// Score a checkpoint on a dataset (micro and macro reports plus a per-image table).
    Eval(Common),
    /// Write mask and overlay PNGs for an image or directory.
    Predict(Common),
    /// Render extractor feature grids for one image.
    Visualize(Common),
    /// Parameter count, analytic GFLOPs and latency.
    Profile(Common),
    /// Train and evaluate every fusion mode under one config.
    Ablate(Common),
}

fn resolve(c: &Common) -> Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.apply_overrides(&c.overrides)?;
    Ok(cfg)
}

fn run(verb: &Verb) -> Result<String> {
    Ok(match verb {
        Verb::Train(c) => {
            let cfg = resolve(c)?;
            let s = cmd_train(&cfg)?;
            format!(
                "trained {} epochs; best val dice {:.4}; outputs in {}",
                s.epoch,
                s.best_val_dice.unwrap_or(0.0),
                cfg.out.display()
            )
        }
        Verb::Eval(c) => {
            let cfg = resolve(c)?;
            let r = cmd_eval(&cfg)?;
            format!(
                "micro f1 {:.4} iou {:.4} dice {:.4}; macro f1 {:.4} iou {:.4} dice {:.4}; {} images",
                r.micro.f1, r.micro.iou, r.micro.dice, r.macro_.f1, r.macro_.iou, r.macro_.dice, r.micro.n_images
            )
        }
        Verb::Predict(c) => format!("wrote {} files", cmd_predict(&resolve(c)?)?.len()),
        Verb::Visualize(c) => format!("wrote {} stage grids", cmd_visualize(&resolve(c)?)?.len()),
        Verb::Profile(c) => {
            let r = cmd_profile(&resolve(c)?)?;
            format!(
                "params {:.3}M (frozen {:.3}M); {:.3} GFLOPs; latency {:.2} +/- {:.2} ms",
                r.params_millions, r.frozen_params_millions, r.gflops, r.latency_ms_mean, r.latency_ms_std
            )
        }
        Verb::Ablate(c) => {
            let cfg = resolve(c)?;
            cmd_ablate(&cfg)?;
            std::fs::read_to_string(cfg.out.join(crackseg_cli::commands::ABLATION_TABLE)).unwrap_or_default()
        }
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli.verb) {
        Ok(summary) => {
            println!("{}", summary.trim_end());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error[{}]: {e}", e.kind());
            ExitCode::FAILURE
        }
    }
}
