use std::process::ExitCode;

fn main() -> ExitCode {
    spurlogo::cli::main()
}
