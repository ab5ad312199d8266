use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ecs_pinn::physics::VelocityMode;
use ecs_pinn_cli::{
    cmd_analyze, cmd_export, cmd_gen, cmd_train, CliError, ExportRequest, PecletSource,
    TrainOverrides,
};

#[derive(Parser)]
#[command(name = "ecs-pinn", version = env!("ECS_PINN_VERSION"), about = "Advection-diffusion PINN toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset from a JSON recipe.
    Gen {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Fit D, v and the network to a dataset.
    Train {
        /// JSON training config; defaults apply to missing keys.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long, value_parser = parse_mode)]
        mode: Option<VelocityMode>,
        #[arg(long)]
        quiet: bool,
    },
    /// Péclet number and transport regime from a run or explicit values.
    Analyze {
        /// Directory holding a trained model.
        #[arg(long, conflicts_with_all = ["diffusion", "velocity"])]
        run: Option<PathBuf>,
        /// Diffusion coefficient, mm²/s.
        #[arg(long = "D", id = "diffusion")]
        diffusion: Option<f64>,
        /// Velocity in mm/s; comma-separated components are combined into a speed.
        #[arg(long = "v", id = "velocity", value_delimiter = ',', allow_hyphen_values = true)]
        velocity: Vec<f64>,
        /// Characteristic length, mm.
        #[arg(long = "L")]
        length: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        quiet: bool,
    },
    /// Loss/D/v curves and truth-vs-prediction images.
    Export {
        /// Run directory or its record CSV.
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Frame times in seconds, comma-separated.
        #[arg(long, value_delimiter = ',')]
        times: Vec<f64>,
        #[arg(long)]
        slice: Option<usize>,
        #[arg(long)]
        quiet: bool,
    },
}

fn parse_mode(s: &str) -> Result<VelocityMode, String> {
    s.parse()
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Gen { config, out, seed } => {
            let manifest = cmd_gen(&config, &out, seed)?;
            println!("dataset written to {} ({})", out.display(), manifest.display());
        }
        Command::Train { config, dataset, out, seed, epochs, mode, quiet } => {
            let overrides = TrainOverrides { seed, epochs, mode, quiet };
            let last = cmd_train(config.as_deref(), &dataset, &out, &overrides)?;
            let v: Vec<String> = last.velocity.iter().map(|x| format!("{x:.6e}")).collect();
            println!(
                "final epoch {}: D = {:.6e} mm^2/s, v = [{}] mm/s, loss = {:.4e}",
                last.epoch,
                last.diffusion,
                v.join(", "),
                last.loss
            );
        }
        Command::Analyze { run, diffusion, velocity, length, out, quiet } => {
            let source = match (run, diffusion) {
                (Some(dir), _) => PecletSource::Run(dir),
                (None, Some(d)) => PecletSource::Values {
                    diffusion: d,
                    velocity: if velocity.is_empty() { vec![0.0] } else { velocity },
                },
                (None, None) => return Err(CliError::Usage("either --run or --D is required".into())),
            };
            let report = cmd_analyze(&source, length, out.as_deref())?;
            if !quiet {
                print!("{}", report.to_text());
            }
        }
        Command::Export { run, out, dataset, times, slice, quiet } => {
            let req = ExportRequest { times_s: times, slice, dataset };
            let written = cmd_export(&run, &out, &req)?;
            if !quiet {
                for p in written {
                    println!("{}", p.display());
                }
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
