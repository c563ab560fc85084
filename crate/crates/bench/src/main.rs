use std::io;
use std::process::ExitCode;

fn main() -> ExitCode {
    let code = qcache_bench::cli::run(std::env::args_os().collect(), &mut io::stdout(), &mut io::stderr());
    ExitCode::from(code as u8)
}
