use std::process::ExitCode;

use clap::{Parser, Subcommand};
use revealtoy_cli::commands::{self, DecomposeArgs, EvalArgs, GenDataArgs, GradcheckArgs, ServeArgs, TrainArgs};

#[derive(Parser)]
#[command(name = "revealtoy", version, about = "Toy layer decomposition with region-aware attention")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic layered-scene dataset.
    GenData(GenDataArgs),
    /// Train the flow model on a dataset.
    Train(TrainArgs),
    /// Decompose one image into background and per-box layers.
    Decompose(DecomposeArgs),
    /// Score a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Finite-difference check of every op and the full loss.
    Gradcheck(GradcheckArgs),
    /// HTTP decomposition service.
    Serve(ServeArgs),
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("REVEALTOY_LOG", "info")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::GenData(a) => commands::gen_data(a).map(|_| true),
        Command::Train(a) => commands::train(a).map(|_| true),
        Command::Decompose(a) => commands::decompose(a).map(|_| true),
        Command::Eval(a) => commands::eval(a).map(|_| true),
        Command::Gradcheck(a) => commands::gradcheck(a),
        Command::Serve(a) => tokio::runtime::Runtime::new()
            .map_err(anyhow::Error::from)
            .and_then(|rt| rt.block_on(commands::serve(a)))
            .map(|_| true),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
