mod args;
mod commands;

use std::process::ExitCode;

use clap::Parser;

use args::{Cli, Command};
use commands::{CliError, Context};

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("LAYERMORPH_LOG", "warn"))
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(CliError::USER)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let ctx = Context {
        out_dir: cli.out_dir,
    };
    let result = match &cli.command {
        Command::Train(a) => commands::train(&ctx, a),
        Command::Morph(a) => commands::morph(&ctx, a),
        Command::Eval(a) => commands::eval(&ctx, a),
        Command::Finetune(a) => commands::finetune(&ctx, a),
        Command::Verify(a) => commands::verify(a),
        Command::Report(a) => commands::report(&ctx, a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code)
        }
    }
}
