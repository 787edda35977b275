//! Runs every acceptance criterion at desk scale and prints one line each.
//! Artifacts are kept under the cargo target tmp directory.

use std::path::PathBuf;
use std::process::ExitCode;

use novelty_core::suite::{self, DeskConfig};

fn main() -> ExitCode {
    let out = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    let cfg = DeskConfig::default();
    println!("acceptance suite: artifacts in {}", out.display());
    let outcomes = match suite::run(&cfg, &suite::ALL, &out, |o| println!("{}", o.line())) {
        Ok(o) => o,
        Err(e) => {
            println!("acceptance suite aborted: {e}");
            return ExitCode::FAILURE;
        }
    };
    let passed = outcomes.iter().filter(|o| o.ok()).count();
    println!("acceptance: {passed} of {} criteria passed", outcomes.len());
    if passed == outcomes.len() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
