use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(point_core::cli::run(std::env::args_os()))
}
