//! Command-line runner for the federated semi-supervised simulator.
//!
//! `fedil run --config <path>` executes one experiment and writes the
//! metrics, convergence trace, config (with hash), and checkpoint into the
//! output directory. Flags override individual config keys, which is how
//! gate-threshold and promotion-threshold sweeps are scripted.

use clap::{Args, Parser, Subcommand};
use fedil_core::config::ExperimentConfig;
use fedil_core::harness::{persist, run_experiment};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "fedil", version, about = "Federated semi-supervised learning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment from a config file.
    Run(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Flat key = value config file.
    #[arg(long)]
    config: PathBuf,

    /// Output directory for metrics, trace, and checkpoint.
    #[arg(long, default_value = "out")]
    out: PathBuf,

    /// Protocol variant: fedil, fedavg, or server-only.
    #[arg(long)]
    mode: Option<String>,

    /// Experiment seed.
    #[arg(long)]
    seed: Option<u64>,

    /// Number of training rounds.
    #[arg(long)]
    rounds: Option<usize>,

    /// Pseudo-label confidence threshold.
    #[arg(long)]
    tau: Option<f64>,

    /// Consecutive-hit promotion threshold (0 disables promotion).
    #[arg(long)]
    promote_t: Option<u32>,

    /// Cosine gate threshold in [-1, 1]; -1 opens every gate.
    #[arg(long)]
    gate_threshold: Option<f64>,

    /// Clients selected per round.
    #[arg(long)]
    clients_per_round: Option<usize>,

    /// Local training epochs per selected client.
    #[arg(long)]
    local_epochs: Option<usize>,

    /// Weight of the server-consistency KL loss.
    #[arg(long)]
    coef_kl: Option<f64>,
}

fn apply_overrides(config: &mut ExperimentConfig, args: &RunArgs) -> fedil_core::Result<()> {
    if let Some(mode) = &args.mode {
        config.set("mode", mode)?;
    }
    if let Some(seed) = args.seed {
        config.set("seed", &seed.to_string())?;
    }
    if let Some(rounds) = args.rounds {
        config.set("rounds", &rounds.to_string())?;
    }
    if let Some(tau) = args.tau {
        config.set("tau", &tau.to_string())?;
    }
    if let Some(t) = args.promote_t {
        config.set("promote_t", &t.to_string())?;
    }
    if let Some(g) = args.gate_threshold {
        config.set("gate_threshold", &g.to_string())?;
    }
    if let Some(m) = args.clients_per_round {
        config.set("clients_per_round", &m.to_string())?;
    }
    if let Some(e) = args.local_epochs {
        config.set("local_epochs", &e.to_string())?;
    }
    if let Some(c) = args.coef_kl {
        config.set("coef_kl", &c.to_string())?;
    }
    Ok(())
}

fn run(args: &RunArgs) -> fedil_core::Result<()> {
    let mut config = ExperimentConfig::from_file(&args.config)?;
    apply_overrides(&mut config, args)?;
    config.validate()?;

    eprintln!(
        "running mode={} seed={} rounds={} dataset={:?} regime={:?}",
        config.mode, config.seed, config.rounds, config.dataset, config.regime
    );
    let outcome = run_experiment(&config)?;
    let manifest = persist(&outcome, &args.out)?;

    println!("config_hash {}", manifest.config_hash);
    println!("initial_accuracy {:.4}", outcome.initial_accuracy);
    println!("final_accuracy {:.4}", outcome.final_accuracy);
    if let Some(last) = outcome.records.last() {
        println!("final_pseudo_total {}", last.pseudo_total);
        println!("final_delta_norm {}", last.delta_norm);
    }
    match outcome.verdict() {
        Some(v) => println!(
            "contracting {} q_max {}",
            v.contracting,
            v.q_max.map_or_else(|| "-".into(), |q| q.to_string())
        ),
        None => println!("contracting - q_max -"),
    }
    for entry in &manifest.entries {
        println!("wrote {} ({} bytes)", args.out.join(&entry.file).display(), entry.bytes);
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match &cli.command {
        Command::Run(args) => match run(args) {
            Ok(()) => ExitCode::SUCCESS,
            Err(e) => {
                eprintln!("error: {e}");
                ExitCode::FAILURE
            }
        },
    }
}
