use std::path::PathBuf;
use std::process::ExitCode;

use advdpnp_cli::run::{gradcheck_verdict, CHECKPOINT_FILE};
use advdpnp_cli::{run_eval, run_gradcheck, run_sweep, run_train, CliError, ExperimentConfig};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "advdpnp", version = env!("ADVDPNP_VERSION"), about = "Adversarially robust prototype classifiers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Model checkpoint; defaults to `<out-dir>/checkpoint.advp`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Overrides `output_dir` from the config.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Overrides `seed` from the config.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write its artifacts.
    Train(Common),
    /// Evaluate a checkpoint under the configured attacks.
    Eval(Common),
    /// Run the epsilon / iteration / restart / adaptive-attack sweeps.
    Sweep(Common),
    /// Finite-difference check of every loss gradient.
    Gradcheck {
        /// Optional config; only its seed is used.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 20)]
        trials: usize,
        /// Test fixture: break the gradient of the named component.
        #[arg(long, hide = true)]
        corrupt: Option<String>,
    },
}

fn load(c: &Common) -> Result<ExperimentConfig, CliError> {
    let mut cfg = ExperimentConfig::load(&c.config)?;
    if let Some(s) = c.seed {
        cfg = cfg.with_seed(s);
    }
    if let Some(d) = &c.out_dir {
        cfg.output_dir = Some(d.clone());
    }
    Ok(cfg)
}

fn checkpoint(c: &Common, cfg: &ExperimentConfig) -> Result<PathBuf, CliError> {
    match &c.checkpoint {
        Some(p) => Ok(p.clone()),
        None => Ok(cfg.output_dir()?.join(CHECKPOINT_FILE)),
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train(c) => {
            let cfg = load(&c)?;
            let command: Vec<String> = std::env::args().collect();
            let out = run_train(&cfg, &command.join(" "))?;
            println!("trained {} epochs, artifacts in {}", cfg.train.epochs, out.display());
        }
        Command::Eval(c) => {
            let cfg = load(&c)?;
            let report = run_eval(&cfg, &checkpoint(&c, &cfg)?)?;
            println!("{}", serde_json::to_string_pretty(&report).map_err(|e| CliError::Config(e.to_string()))?);
        }
        Command::Sweep(c) => {
            let cfg = load(&c)?;
            let rows = run_sweep(&cfg, &checkpoint(&c, &cfg)?)?;
            print!("{}", advdpnp_cli::run::sweep_csv(&rows));
        }
        Command::Gradcheck { config, seed, trials, corrupt } => {
            let base = match &config {
                Some(p) => ExperimentConfig::load(p)?.seed,
                None => 0,
            };
            let checks = run_gradcheck(seed.unwrap_or(base), trials, corrupt.as_deref())?;
            for c in &checks {
                println!(
                    "{:<10} max_rel_error={:.3e} {}",
                    c.component,
                    c.max_rel_error,
                    if c.passed { "ok" } else { "FAIL" }
                );
            }
            gradcheck_verdict(&checks)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
