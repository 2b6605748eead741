mod cli;

use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    if let Ok(n) = std::env::var("RDEC_THREADS") {
        // Read by matrixmultiply on first use.
        std::env::set_var("MATMUL_NUM_THREADS", n);
    }
    let args = cli::Cli::parse();
    match cli::run(args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(cli::exit_code(&err))
        }
    }
}
