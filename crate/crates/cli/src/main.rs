use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use inkwm_cli::commands;
use inkwm_cli::{CliError, Overrides};

#[derive(Parser)]
#[command(name = "inkwm", version, about = "Visible watermarks in classifier weights via a transposed model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Output directory, replacing `out_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Master seed, replacing `seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Training samples, spread evenly over the classes.
    #[arg(long)]
    subset: Option<usize>,
    #[arg(long, short)]
    quiet: bool,
}

impl RunArgs {
    fn overrides(&self) -> Overrides {
        Overrides { out_dir: self.out.clone(), seed: self.seed, subset: self.subset }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Harden, train, attack and extract as configured.
    Run(RunArgs),
    /// Embed a dot-code payload and report bit error rates.
    Capacity(RunArgs),
    /// Attack the model of an earlier run with the configured attacks.
    Attack {
        #[command(flatten)]
        run: RunArgs,
        /// Output directory of the run to attack.
        #[arg(long)]
        from: PathBuf,
    },
    /// Extract the watermark of a checkpoint.
    Extract {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Model card; defaults to the checkpoint path with a `.json` extension.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        keys: PathBuf,
        /// Secret images to score against, in key order.
        #[arg(long, num_args = 1..)]
        secrets: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare extracted images with secret images.
    Verify {
        #[arg(long, num_args = 1.., required = true)]
        images: Vec<PathBuf>,
        #[arg(long, num_args = 1.., required = true)]
        secrets: Vec<PathBuf>,
    },
}

fn logger(quiet: bool) -> impl FnMut(&str) {
    move |line: &str| {
        if !quiet {
            eprintln!("{line}");
        }
    }
}

fn json<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("reports serialize")
}

fn dispatch(cli: Cli) -> Result<String, CliError> {
    match cli.command {
        Command::Run(a) => {
            let (outcome, manifest) = commands::cmd_run(&a.config, &a.overrides(), &mut logger(a.quiet))?;
            Ok(format!("{}\nwrote {} files to {}", json(&manifest.summary), manifest.files.len(), outcome.cfg.out_dir.display()))
        }
        Command::Capacity(a) => {
            let (outcome, report, manifest) = commands::cmd_capacity(&a.config, &a.overrides(), &mut logger(a.quiet))?;
            Ok(format!("{}\nwrote {} files to {}", json(&report), manifest.files.len(), outcome.cfg.out_dir.display()))
        }
        Command::Attack { run, from } => {
            let (metrics, manifest) = commands::cmd_attack(&run.config, &from, &run.overrides(), &mut logger(run.quiet))?;
            Ok(format!("{} attacks, wrote {} files", metrics.len(), manifest.files.len()))
        }
        Command::Extract { checkpoint, model, keys, secrets, out } => {
            let s = commands::cmd_extract(&checkpoint, model.as_deref(), &keys, &secrets, &out)?;
            Ok(json(&s))
        }
        Command::Verify { images, secrets } => Ok(json(&commands::cmd_verify(&images, &secrets)?)),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(text) => {
            println!("{text}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
