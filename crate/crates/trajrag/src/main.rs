use std::process::ExitCode;

fn main() -> ExitCode {
    trajrag::cli::run()
}
