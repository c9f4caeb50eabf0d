//! `dfsq`: train, evaluate, and inspect layer-fusion transformers on
//! synthetic sequence tasks.
//!
//! Exit codes: 0 success, 1 validation or I/O error, 2 numerical failure
//! (non-finite loss or gradient, failed gradient check).

use clap::{Parser, Subcommand};

use dfsq::commands::{self, NumericalFailure};

#[derive(Parser, Debug)]
#[command(name = "dfsq", version, about = "Layer-fusion transformer workbench")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train on a synthetic task and write logs, datasets, and the best
    /// checkpoint into --out.
    Train(commands::TrainCmd),
    /// Score a checkpoint on a regenerated task split.
    Eval(commands::EvalCmd),
    /// Greedy-decode sources from a file, one id line per input.
    Decode(commands::DecodeCmd),
    /// Verify tape gradients against central differences (forces f64).
    Gradcheck(commands::GradCheckCmd),
    /// Structural reports.
    #[command(subcommand)]
    Inspect(InspectCommand),
}

#[derive(Subcommand, Debug)]
enum InspectCommand {
    /// Print the strategy's wiring DAG as JSON.
    Dag(commands::InspectDagCmd),
    /// Write per-node exploitation scores to a CSV file.
    Exploitation(commands::InspectExploitationCmd),
    /// Print per-tensor parameter counts and the delta over vanilla.
    Params(commands::InspectParamsCmd),
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap would exit(2) on usage errors; keep 2 reserved for
            // numerical failures and report usage problems as 1.
            let _ = e.print();
            std::process::exit(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let result = match &cli.command {
        Command::Train(cmd) => commands::cmd_train(cmd),
        Command::Eval(cmd) => commands::cmd_eval(cmd),
        Command::Decode(cmd) => commands::cmd_decode(cmd),
        Command::Gradcheck(cmd) => commands::cmd_gradcheck(cmd),
        Command::Inspect(InspectCommand::Dag(cmd)) => commands::cmd_inspect_dag(cmd),
        Command::Inspect(InspectCommand::Exploitation(cmd)) => {
            commands::cmd_inspect_exploitation(cmd)
        }
        Command::Inspect(InspectCommand::Params(cmd)) => commands::cmd_inspect_params(cmd),
    };
    match result {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = if e.downcast_ref::<NumericalFailure>().is_some() {
                2
            } else {
                1
            };
            std::process::exit(code);
        }
    }
}
