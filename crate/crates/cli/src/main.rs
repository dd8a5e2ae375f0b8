//! `cgsr`: preprocessing, graph export, training, evaluation and
//! explanation from the command line.

mod commands;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(
    name = "cgsr",
    version,
    about = "Causality and correlation graph session recommender"
)]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct GlobalArgs {
    /// Flat `key = value` training config.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Seed for every random choice [default: 42, or the config's `seed`].
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true, value_name = "N", value_parser = clap::value_parser!(u16).range(1..))]
    pub threads: Option<u16>,
    /// Dataset hyper-parameters: learning rate, batch size, embedding size, L2.
    #[arg(long, global = true, value_name = "NAME", value_parser = ["diginetica", "gowalla", "amazon"])]
    pub preset: Option<String>,
    /// Check an input before use: `PATH=SHA256`, or an earlier
    /// manifest.json whose recorded outputs are compared with same-named inputs.
    #[arg(long = "expect-digest", global = true, value_name = "SPEC")]
    pub expect_digest: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Interaction log → session files and vocabulary.
    Prep(commands::PrepArgs),
    /// Export the session, effect, cause and correlation graphs as CSV.
    Graphs(commands::GraphsArgs),
    /// Transition asymmetry grid of item pairs.
    Stats(commands::StatsArgs),
    /// Train a model and write a checkpoint with its history.
    Train(commands::TrainArgs),
    /// Rank every test prefix and report HR, MRR and NDCG.
    Eval(commands::EvalArgs),
    /// Attribute recommendations to the items of each session.
    Explain(commands::ExplainArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.global.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n.into()).build_global() {
            eprintln!("error: cannot configure {n} threads: {e}");
            return ExitCode::FAILURE;
        }
    }
    let result = match cli.command {
        Command::Prep(a) => commands::prep(&cli.global, a),
        Command::Graphs(a) => commands::graphs(&cli.global, a),
        Command::Stats(a) => commands::stats(&cli.global, a),
        Command::Train(a) => commands::train(&cli.global, a),
        Command::Eval(a) => commands::eval(&cli.global, a),
        Command::Explain(a) => commands::explain(&cli.global, a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.is::<commands::UsageError>() => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
