use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use deam::config::RunConfig;
use deam::{pipeline, Error};

#[derive(Parser)]
#[command(name = "deam", version, about = "Dual-energy CT reconstruction by alternating minimization")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Rasterize the phantom and simulate expected and measured counts.
    Simulate(Args),
    /// Write the initial image (iFBP, external initializer, truth or zeros).
    Init(Args),
    /// Run DEAM from the initial image.
    Recon(Args),
    /// ROI bias and std of the reconstruction against the ground truth.
    Metrics(Args),
    /// simulate, init, recon and metrics in sequence.
    Run(Args),
    /// Print the default config, or the resolved form of --config.
    PrintConfig {
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

#[derive(clap::Args)]
struct Args {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn dispatch(cmd: Cmd) -> deam::Result<()> {
    let run = |a: Args, f: fn(&RunConfig, &Path) -> deam::Result<()>| f(&RunConfig::load(&a.config)?, &a.out);
    match cmd {
        Cmd::Simulate(a) => run(a, pipeline::cmd_simulate),
        Cmd::Init(a) => run(a, pipeline::cmd_init),
        Cmd::Recon(a) => run(a, pipeline::cmd_recon),
        Cmd::Metrics(a) => run(a, pipeline::cmd_metrics),
        Cmd::Run(a) => run(a, pipeline::run_all),
        Cmd::PrintConfig { config } => {
            let cfg = match config {
                Some(p) => RunConfig::load(&p)?,
                None => RunConfig::default(),
            };
            println!("{}", cfg.to_json());
            Ok(())
        }
    }
}

fn error_line(e: &Error) -> String {
    serde_json::json!({ "error": e.kind(), "message": e.to_string(), "exit_code": e.exit_code() }).to_string()
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_line(&e));
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
