use std::process::ExitCode;

fn main() -> ExitCode {
    capae::cli::main_with_args(std::env::args_os())
}
