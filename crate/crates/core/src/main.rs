use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use cirl::cfmodel::DynamicsMode;
use cirl::config::{ExperimentConfig, Settings};
use cirl::pipeline;
use cirl::CirlError;

/// Batch counterfactual inverse reinforcement learning on a simulated
/// treatment environment.
///
/// Any config key can be overridden with `--<dotted.key> <value>` or
/// `--<dotted.key>=<value>`, e.g. `--sim.noise_std 0 --cirl.max_iters 5`.
#[derive(Parser, Debug)]
#[command(name = "cirl", version)]
struct Cli {
    /// Experiment config file (flat `key = value`).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Scale factor on all training iteration counts.
    #[arg(long, global = true)]
    budget: Option<f64>,
    /// Experiment directory.
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the expert Q-network on the simulator.
    TrainExpert,
    /// Simulate the logged cohort with the stochastic expert.
    GenData,
    /// Report action frequencies and overlap warnings of the cohort.
    Audit,
    /// Fit the propensity and counterfactual dynamics models.
    TrainCf {
        /// iptw, plain-h or plain-x.
        #[arg(long)]
        mode: Option<DynamicsMode>,
    },
    /// Run the projection loop on the logged cohort.
    RunCirl,
    /// Score the learned policies against the simulator.
    Evaluate,
    /// Write plots and a text summary.
    Report,
    /// All of the above, in order.
    Pipeline,
    /// Print the resolved config.
    ShowConfig,
}

/// `(key, value, argument position)`.
type Override = (String, String, usize);

/// Split `--a.b value` / `--a.b=value` pairs from the arguments clap sees.
fn split_overrides(args: Vec<String>) -> Result<(Vec<String>, Vec<Override>), CirlError> {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    let mut it = args.into_iter().enumerate();
    while let Some((i, a)) = it.next() {
        match a
            .strip_prefix("--")
            .filter(|k| k.split('=').next().is_some_and(|k| k.contains('.')))
        {
            Some(body) => {
                let (k, v) = match body.split_once('=') {
                    Some((k, v)) => (k.to_string(), v.to_string()),
                    None => match it.next() {
                        Some((_, v)) => (body.to_string(), v),
                        None => {
                            return Err(CirlError::Config {
                                origin: "command line".into(),
                                line: i,
                                message: format!("--{body} needs a value"),
                            })
                        }
                    },
                };
                overrides.push((k, v, i));
            }
            None => rest.push(a),
        }
    }
    Ok((rest, overrides))
}

fn run() -> Result<(), CirlError> {
    let (args, overrides) = split_overrides(std::env::args().collect())?;
    let cli = Cli::parse_from(args);
    let mut settings = match &cli.config {
        Some(p) => Settings::load(p)?,
        None => Settings::default(),
    };
    for (k, v, i) in &overrides {
        settings.set(k, v, *i);
    }
    if let Some(s) = cli.seed {
        settings.set("seed", &s.to_string(), 0);
    }
    if let Some(b) = cli.budget {
        settings.set("budget", &b.to_string(), 0);
    }
    if let Some(d) = &cli.output_dir {
        settings.set("output_dir", &d.display().to_string(), 0);
    }
    if let Command::TrainCf { mode: Some(m) } = &cli.command {
        settings.set("cf.mode", m.cli_name(), 0);
    }
    let cfg: ExperimentConfig = settings.resolve()?;
    match cli.command {
        Command::TrainExpert => pipeline::train_expert(&cfg)?,
        Command::GenData => pipeline::gen_data(&cfg)?,
        Command::Audit => print!("{}", pipeline::audit(&cfg)?),
        Command::TrainCf { .. } => {
            let m = pipeline::train_cf(&cfg)?;
            println!(
                "held-out propensity log-loss {:.4} (constant 0.5: {:.4}); factual RMSE {:.4}; counterfactual RMSE {:.4}",
                m.propensity_log_loss, m.constant_log_loss, m.factual_rmse, m.counterfactual_rmse
            );
        }
        Command::RunCirl => {
            let r = pipeline::run_cirl(&cfg)?;
            println!(
                "{} after {} iteration(s); selected k = {}, w = {:?}",
                r.run.status.as_str(),
                r.run.state.k,
                r.run.selected,
                r.selected_weights.w
            );
        }
        Command::Evaluate => {
            pipeline::evaluate(&cfg)?;
        }
        Command::Report => print!("{}", pipeline::report(&cfg)?),
        Command::Pipeline => print!("{}", pipeline::pipeline(&cfg)?),
        Command::ShowConfig => print!("{}", cfg.to_text()),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
