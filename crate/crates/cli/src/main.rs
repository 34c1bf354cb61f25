use std::process::ExitCode;

fn main() -> ExitCode {
    mpda_cli::main_with(std::env::args_os())
}
