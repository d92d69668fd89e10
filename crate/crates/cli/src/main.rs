use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fedvi_cli::commands::{cmd_ablate, cmd_bound, cmd_eval, cmd_generate, cmd_train, PARAMS_FILE};
use fedvi_cli::error::{EXIT_OK, EXIT_USAGE};
use fedvi_cli::{CliError, ExperimentConfig, Overrides};
use fedvi_core::federation::Algorithm;

#[derive(Parser)]
#[command(name = "fedvi", version, about = "Federated variational inference simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Top-level seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    algorithm: Option<Algorithm>,
    /// KL weight for training.
    #[arg(long)]
    tau: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Sample a synthetic federated dataset.
    Generate(Common),
    /// Run federated training and write metrics, parameters and a summary.
    Train(Common),
    /// Train once per τ in the ablation grid.
    Ablate(Common),
    /// Evaluate the generalization bound for trained parameters.
    Bound {
        #[command(flatten)]
        common: Common,
        /// Parameter file; defaults to params.bin in the output directory.
        #[arg(long)]
        params: Option<PathBuf>,
    },
    /// Evaluate saved parameters on a dataset.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        params: Option<PathBuf>,
    },
}

fn load(c: &Common) -> Result<ExperimentConfig, CliError> {
    let ov = Overrides {
        seed: c.seed,
        algorithm: c.algorithm,
        tau: c.tau,
        out: c.out.clone(),
    };
    match &c.config {
        Some(path) => ExperimentConfig::load(path, &ov),
        None => Ok(ExperimentConfig::defaults(&ov)?),
    }
}

fn fmt(v: Option<f64>) -> String {
    v.map_or("n/a".into(), |v| format!("{v:.4}"))
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Generate(c) => {
            let path = cmd_generate(&mut load(&c)?)?;
            println!("wrote {}", path.display());
        }
        Command::Train(c) => {
            let r = cmd_train(&mut load(&c)?)?;
            let s = r.summary;
            println!(
                "part_acc {}  nonpart_acc {}  gap {}  ({} rounds averaged)",
                fmt(s.part_acc),
                fmt(s.nonpart_acc),
                fmt(s.gap),
                s.rounds_averaged
            );
            println!("outputs in {}", r.dir.display());
        }
        Command::Ablate(c) => {
            let rows = cmd_ablate(&mut load(&c)?)?;
            println!("{:>10} {:>10} {:>12} {:>8}", "tau", "part_acc", "nonpart_acc", "gap");
            for r in rows {
                match r.result {
                    Ok(s) => println!(
                        "{:>10e} {:>10} {:>12} {:>8}",
                        r.tau,
                        fmt(s.part_acc),
                        fmt(s.nonpart_acc),
                        fmt(s.gap)
                    ),
                    Err(e) => println!("{:>10e} failed: {e}", r.tau),
                }
            }
        }
        Command::Bound { common, params } => {
            let mut cfg = load(&common)?;
            let params = params.unwrap_or_else(|| cfg.out.join(PARAMS_FILE));
            let report = cmd_bound(&mut cfg, &params)?;
            print!("{}", report.text(&cfg).split("\nresolved config").next().unwrap_or_default());
            println!();
        }
        Command::Eval { common, params } => {
            let mut cfg = load(&common)?;
            let params = params.unwrap_or_else(|| cfg.out.join(PARAMS_FILE));
            let r = cmd_eval(&mut cfg, &params)?;
            println!(
                "part_acc {}  nonpart_acc {}  gap {}",
                fmt(r.part_acc),
                fmt(r.nonpart_acc),
                fmt(r.gap)
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            return ExitCode::from(code as u8);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
