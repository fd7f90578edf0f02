//! The ten acceptance criteria on the pinned configuration.
//!
//! Prints one PASS/FAIL line per criterion and exits non-zero if any fails.
//! Outputs land in `$ACCEPTANCE_OUT` when set, otherwise under the cargo
//! target tmpdir. A name filter that does not match "acceptance" skips the run.

use std::path::PathBuf;
use std::process::ExitCode;

use skillcast::pipeline::{run_repro, ReproConfig};

fn main() -> ExitCode {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    if !filters.is_empty() && !filters.iter().any(|f| "acceptance".contains(f.as_str())) {
        return ExitCode::SUCCESS;
    }
    let out = std::env::var_os("ACCEPTANCE_OUT")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance"));
    let report = match run_repro(&ReproConfig::pinned(), &out, &mut |line| eprintln!("{line}")) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("acceptance pipeline failed: {e}");
            return ExitCode::FAILURE;
        }
    };
    println!("acceptance results ({})", out.display());
    print!("{}", report.table());
    let failed: Vec<u8> = report.criteria.iter().filter(|c| !c.passed).map(|c| c.id).collect();
    if report.criteria.len() != 10 || !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        return ExitCode::FAILURE;
    }
    println!("all 10 criteria passed");
    ExitCode::SUCCESS
}
