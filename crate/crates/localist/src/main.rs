use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use localist::cli::{
    cmd_check_bounds, cmd_compile_rules, cmd_gen, cmd_sweep, cmd_train, cmd_verify,
    resolve_out_dir, CheckBoundsArgs, CompileRulesArgs, GenArgs, SweepArgs, TrainArgs, VerifyArgs,
};

#[derive(Parser)]
#[command(name = "localist", version, about = "Locality-dial attention lab: generate data, train, sweep, check bounds, verify rules")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a block partition and a pointer-retrieval dataset.
    Gen {
        #[arg(long)]
        config: PathBuf,
        /// Output directory (or LOCALIST_OUT, or ./out).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train under a regime preset, optionally hot-reloading a rules file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Directory produced by `gen`.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// localist | distributed | intermediate | custom
        #[arg(long)]
        preset: Option<String>,
        /// Rules file compiled and injected at the start.
        #[arg(long)]
        rules: Option<PathBuf>,
        /// Re-read the rules file at every checkpoint boundary.
        #[arg(long)]
        watch_rules: bool,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train one run per (alpha, tau) grid point and tabulate the dial.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Comma-separated penalty values, e.g. 0.01,1,10
        #[arg(long, value_delimiter = ',')]
        alphas: Option<Vec<f64>>,
        /// Comma-separated temperatures.
        #[arg(long, value_delimiter = ',')]
        taus: Option<Vec<f64>>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate entropy/fidelity bounds and concentration checks per query.
    CheckBounds {
        /// Checkpoint file from `train`.
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Margin premise; defaults to the checkpoint's per-block targets.
        #[arg(long)]
        delta: Option<f64>,
    },
    /// Check model outputs against a rules file and report compliance.
    Verify {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        rules: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        target_rate: Option<f64>,
    },
    /// Compile a rules file into constraint updates for the trainer feed.
    CompileRules {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        rules: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Calibrate against this checkpoint instead of a fresh model.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        tau: Option<f64>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let code = match cli.command {
        Command::Gen { config, out, seed } => cmd_gen(&GenArgs {
            config: &config,
            out: &resolve_out_dir(out),
            seed,
        }),
        Command::Train { config, data, out, preset, rules, watch_rules, seed } => {
            cmd_train(&TrainArgs {
                config: &config,
                data: &data,
                out: &resolve_out_dir(out),
                preset: preset.as_deref(),
                rules: rules.as_deref(),
                watch_rules,
                seed,
            })
        }
        Command::Sweep { config, out, alphas, taus, seed } => cmd_sweep(&SweepArgs {
            config: &config,
            out: &resolve_out_dir(out),
            alphas,
            taus,
            seed,
        }),
        Command::CheckBounds { model, data, out, delta } => cmd_check_bounds(&CheckBoundsArgs {
            model: &model,
            data: &data,
            out: &resolve_out_dir(out),
            delta,
        }),
        Command::Verify { model, data, rules, out, target_rate } => cmd_verify(&VerifyArgs {
            model: &model,
            data: &data,
            rules: &rules,
            out: &resolve_out_dir(out),
            target_rate,
        }),
        Command::CompileRules { config, rules, data, model, out, tau } => {
            cmd_compile_rules(&CompileRulesArgs {
                config: &config,
                rules: &rules,
                data: &data,
                model: model.as_deref(),
                out: &resolve_out_dir(out),
                tau,
            })
        }
    };
    ExitCode::from(code.clamp(0, 255) as u8)
}
