use std::io;
use std::process::ExitCode;

fn main() -> ExitCode {
    let code = axdelta::cli::main_with(std::env::args_os(), &mut io::stdout(), &mut io::stderr());
    ExitCode::from(code as u8)
}
