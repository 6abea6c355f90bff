use std::process::ExitCode;

use clap::{Parser, Subcommand};
use owl::commands::{
    self, AgentArgs, ContractionArgs, EvalArgs, GenDataArgs, GradCheckArgs, SweepArgs, TrainArgs,
};

/// Open-world learning with unrolled sparse-coding layers.
#[derive(Debug, Parser)]
#[command(name = "owl", version)]
struct Cli {
    #[command(subcommand)]
    verb: Verb,
}

#[derive(Debug, Subcommand)]
enum Verb {
    /// Write a synthetic blob dataset and its manifest
    GenData(GenDataArgs),
    /// Train on a manifest and write checkpoint, trace and metrics
    Train(TrainArgs),
    /// Score a checkpoint on the test split
    Eval(EvalArgs),
    /// Refit the rejection threshold from validation rows
    Agent(AgentArgs),
    /// Compare analytic gradients with finite differences
    GradCheck(GradCheckArgs),
    /// Audit the contraction property of one modality's layer map
    VerifyContraction(ContractionArgs),
    /// Train over a 6×6 grid of loss weights
    Sweep(SweepArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.verb {
        Verb::GenData(a) => commands::gen_data(a).map(|s| (s, true)),
        Verb::Train(a) => commands::train_cmd(a).map(|s| (s, true)),
        Verb::Eval(a) => commands::eval_cmd(a).map(|s| (s, true)),
        Verb::Agent(a) => commands::agent_cmd(a).map(|s| (s, true)),
        Verb::GradCheck(a) => commands::grad_check_cmd(a),
        Verb::VerifyContraction(a) => commands::verify_contraction_cmd(a),
        Verb::Sweep(a) => commands::sweep_cmd(a).map(|s| (s, true)),
    };
    match result {
        Ok((report, ok)) => {
            print!("{report}");
            if ok {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
        Err(e) => {
            eprintln!("owl: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
