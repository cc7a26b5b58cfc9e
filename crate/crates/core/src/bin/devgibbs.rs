use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(devgibbs::cli::main_from(std::env::args_os()))
}
