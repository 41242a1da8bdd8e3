use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(capo::harness::cli::run(std::env::args_os()))
}
