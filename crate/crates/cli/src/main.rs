use clap::Parser;

use hieraseg_cli::args::{Cli, Command};
use hieraseg_cli::commands;

fn main() {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::ValidateHierarchy { hierarchy, out } => {
            commands::validate_hierarchy(hierarchy, out.as_deref())
        }
        Command::GenData(args) => commands::gen_data(args),
        Command::DeriveLabels { hierarchy, fine, out } => {
            commands::derive_labels(hierarchy, fine, out)
        }
        Command::Train(args) => commands::run_train(args),
        Command::Transfer(args) => commands::run_transfer(args),
        Command::Decode(args) => commands::run_decode(args),
        Command::Eval(args) => commands::run_eval(args),
        Command::Ablate(args) => commands::run_ablate(args),
    };
    if let Err(e) = result {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
