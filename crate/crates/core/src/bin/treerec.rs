use std::process::ExitCode;

fn main() -> ExitCode {
    env_logger::init();
    ExitCode::from(treerec::cli::run(std::env::args()) as u8)
}
