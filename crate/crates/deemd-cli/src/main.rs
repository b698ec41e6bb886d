use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use deemd_cli::config::{Overrides, RunConfig};
use deemd_cli::stages;

/// Weakly supervised infection screening: train a patch scorer on
/// cell-population images, localize infection, and rank treatments.
#[derive(Parser)]
#[command(name = "deemd", version, about)]
struct Cli {
    /// Run configuration (TOML); defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed override; stage seeds derive from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker thread cap for within-stage parallelism.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Top-k patches per bag.
    #[arg(long, global = true)]
    k: Option<usize>,
    /// Bag classification cutoff.
    #[arg(long, global = true)]
    eta: Option<f64>,
    /// Effective-treatment cutoff.
    #[arg(long, global = true)]
    zeta: Option<f64>,
    /// Infection-map power-mean exponent.
    #[arg(long, global = true)]
    alpha: Option<f64>,
    /// Infection-map smoothing bandwidth in pixels.
    #[arg(long, global = true)]
    sigma: Option<f64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic screen described by the [synth] config.
    Synth,
    /// Count nuclei, drop empty samples, assign splits, compute stats.
    Preprocess,
    /// Train the patch scorer on the train/validation splits.
    Train,
    /// Evaluate bag-level average precision on the held-out splits.
    Eval,
    /// Render infection maps and overlays for held-out infected samples.
    Map,
    /// Score the treated test set and rank treatments.
    Score,
    /// Run the whole pipeline and write report.json.
    Screen,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(jobs) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global() {
            eprintln!("warning: could not set worker count: {e}");
        }
    }
    let overrides = Overrides {
        seed: cli.seed,
        k: cli.k,
        eta: cli.eta,
        zeta: cli.zeta,
        alpha: cli.alpha,
        sigma: cli.sigma,
    };
    let config = match RunConfig::load(cli.config.as_deref(), overrides) {
        Ok(config) => config,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(2);
        }
    };

    let result = match cli.command {
        Command::Synth => stages::run_synth(&config).map(|_| ()),
        Command::Preprocess => stages::run_preprocess(&config).map(|_| ()),
        Command::Train => stages::run_train(&config).map(|_| ()),
        Command::Eval => stages::run_eval(&config).map(|_| ()),
        Command::Map => stages::run_map(&config).map(|_| ()),
        Command::Score => stages::run_score(&config).map(|_| ()),
        Command::Screen => stages::run_screen(&config).map(|summary| {
            for (stage, status) in &summary.statuses {
                eprintln!("[{stage}] {:?}", status);
            }
            println!(
                "effective treatments: {}",
                if summary.effective_treatments.is_empty() {
                    "(none)".to_string()
                } else {
                    summary.effective_treatments.join(", ")
                }
            );
            println!("report: {}", summary.report_path.display());
        }),
    };

    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            eprintln!("error: {failure}");
            ExitCode::from(failure.stage.exit_code() as u8)
        }
    }
}
