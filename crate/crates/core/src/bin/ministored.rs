//! Standalone ministore daemon: `ministored <service-config>`.

use std::path::PathBuf;
use std::process::ExitCode;

fn main() -> ExitCode {
    let Some(path) = std::env::args_os().nth(1).map(PathBuf::from) else {
        eprintln!("usage: ministored <service-config>");
        return ExitCode::from(2);
    };
    match ephemstore::ministore::server::run_daemon(&path) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("ministored: {e}");
            ExitCode::from(1)
        }
    }
}
