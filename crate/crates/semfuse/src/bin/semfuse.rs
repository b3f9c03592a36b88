use std::process::ExitCode;

fn main() -> ExitCode {
    semfuse::pipeline::cli::main()
}
