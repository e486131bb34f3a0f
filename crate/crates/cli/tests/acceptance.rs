//! Acceptance suite: criteria 1–9 through the library, criterion 10 through the
//! binary. Prints one pass/fail line per criterion and exits non-zero on failure.

use std::process::{Command, ExitCode};

use contrastive_core::verify::{run_criterion, VerifyConfig, CRITERIA};

fn main() -> ExitCode {
    // `cargo test -- --list` and filters expect harness-like behavior.
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--list") {
        println!("acceptance: test");
        return ExitCode::SUCCESS;
    }
    if let Some(filter) = args.iter().find(|a| !a.starts_with('-')) {
        if !"acceptance".contains(filter.as_str()) {
            return ExitCode::SUCCESS;
        }
    }

    let config = VerifyConfig::default();
    let mut all = true;
    for (id, _, _) in CRITERIA {
        let r = run_criterion(id, &config);
        println!("{r}");
        all &= r.passed;
    }

    let out = tempfile::tempdir().expect("temp dir");
    let started = std::time::Instant::now();
    let status = Command::new(env!("CARGO_BIN_EXE_contrastive"))
        .args(["verify", "--out"])
        .arg(out.path())
        .output()
        .expect("run contrastive verify");
    let table = std::fs::read_to_string(out.path().join("verify.csv")).unwrap_or_default();
    let rows = table.lines().skip(1).count();
    let passed = status.status.code() == Some(0) && rows == CRITERIA.len() + 1;
    println!(
        "[{}] 10 {:<28} {:>8.2}s  exit {:?}, {rows} table rows",
        if passed { "PASS" } else { "FAIL" },
        "verify command",
        started.elapsed().as_secs_f64(),
        status.status.code()
    );
    if !passed {
        print!("{}", String::from_utf8_lossy(&status.stdout));
        eprint!("{}", String::from_utf8_lossy(&status.stderr));
    }
    all &= passed;

    println!("acceptance: {}", if all { "all criteria passed" } else { "FAILED" });
    if all {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
