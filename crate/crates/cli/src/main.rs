//! Command-line surface: train, evaluate, attack, map landscapes, measure
//! flatness, and run the built-in verification battery.

mod commands;
mod config;
mod manifest;
mod verify;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use flatscape::Error;

#[derive(Parser)]
#[command(
    name = "flatscape",
    version,
    about = "Train small classifiers with adversarial defenses and map their likelihood landscapes"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model from a TOML/JSON config; writes checkpoint, metrics,
    /// and a run manifest.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Output directory (default: $FLATSCAPE_OUT_DIR or ".").
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate clean (and optionally adversarial) accuracy of a checkpoint.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: String,
        /// Attack preset: pgd-cifar, pgd-fmnist, fgsm (needs --eps), or pgd
        /// (needs --eps and --step-size).
        #[arg(long)]
        attack: Option<String>,
        #[arg(long)]
        eps: Option<f64>,
        #[arg(long)]
        step_size: Option<f64>,
        #[arg(long)]
        iters: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// When given, also writes eval.json plus a manifest here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sample a relative-likelihood surface around one test sample.
    Landscape {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: String,
        #[arg(long, default_value_t = 0)]
        index: usize,
        /// Plane kind: "random" or "fgsm".
        #[arg(long, default_value = "random")]
        kind: String,
        #[arg(long, default_value_t = 8.0 / 255.0)]
        eps_max: f64,
        #[arg(long, default_value_t = 10)]
        resolution: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Dataset flatness report (per-sample phi and the aggregate Phi).
    Flatness {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: String,
        #[arg(long, default_value_t = 2)]
        planes: usize,
        #[arg(long, default_value_t = 8.0 / 255.0)]
        eps_max: f64,
        #[arg(long, default_value_t = 10)]
        resolution: usize,
        /// Stratified cap on the number of samples scored.
        #[arg(long)]
        max_samples: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Histogram of log-likelihoods for clean vs uniformly perturbed samples.
    Histogram {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: String,
        #[arg(long, default_value_t = 8.0 / 255.0)]
        eps: f64,
        #[arg(long, default_value_t = 30)]
        bins: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the built-in verification battery, or check a run manifest.
    Verify {
        #[arg(long, default_value_t = 1000)]
        bound_cases: usize,
        /// Check the integrity of a previously written output directory
        /// instead of running the battery.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
}

fn exit_code_for(e: &Error) -> u8 {
    match e {
        Error::Numeric(_) => 1,
        Error::Training { .. } => 3,
        Error::Corrupt(_) => 4,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result: flatscape::Result<bool> = match cli.cmd {
        Cmd::Train { config, out } => {
            let out = commands::resolve_out_dir(out);
            commands::cmd_train(&config, &out).map(|_| true)
        }
        Cmd::Eval {
            ckpt,
            data,
            attack,
            eps,
            step_size,
            iters,
            seed,
            out,
        } => commands::cmd_eval(&commands::EvalArgs {
            ckpt,
            data,
            attack,
            eps,
            step_size,
            iters,
            seed,
            out,
        })
        .map(|_| true),
        Cmd::Landscape {
            ckpt,
            data,
            index,
            kind,
            eps_max,
            resolution,
            seed,
            out,
        } => {
            let fgsm = match kind.as_str() {
                "random" => false,
                "fgsm" => true,
                other => {
                    eprintln!("error: landscape kind must be \"random\" or \"fgsm\", got {other:?}");
                    return ExitCode::from(2);
                }
            };
            commands::cmd_landscape(&commands::LandscapeArgs {
                ckpt,
                data,
                index,
                fgsm,
                eps_max,
                resolution,
                seed,
                out: commands::resolve_out_dir(out),
            })
            .map(|_| true)
        }
        Cmd::Flatness {
            ckpt,
            data,
            planes,
            eps_max,
            resolution,
            max_samples,
            seed,
            out,
        } => commands::cmd_flatness(&commands::FlatnessArgs {
            ckpt,
            data,
            planes,
            eps_max,
            resolution,
            max_samples,
            seed,
            out: commands::resolve_out_dir(out),
        })
        .map(|_| true),
        Cmd::Histogram {
            ckpt,
            data,
            eps,
            bins,
            seed,
            out,
        } => commands::cmd_histogram(&commands::HistogramArgs {
            ckpt,
            data,
            eps,
            bins,
            seed,
            out: commands::resolve_out_dir(out),
        })
        .map(|_| true),
        Cmd::Verify {
            bound_cases,
            manifest,
            inject_fault,
        } => match manifest {
            Some(dir) => manifest::verify_manifest(&dir).map(|n| {
                println!("manifest ok: {n} outputs verified");
                true
            }),
            None => verify::run_battery(bound_cases, inject_fault),
        },
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}
