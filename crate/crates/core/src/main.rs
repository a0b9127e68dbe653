use std::process::ExitCode;

fn main() -> ExitCode {
    spikedistill::cli::main_entry()
}
