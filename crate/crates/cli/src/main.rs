use std::process::ExitCode;

fn main() -> ExitCode {
    augsearch_cli::run_cli(std::env::args_os())
}
