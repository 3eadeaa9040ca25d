//! Acceptance suite: one line per criterion, nonzero exit if any fails.
//! The training criteria run the standard preset; set ACCEPTANCE_OUT to
//! choose where its reports go (default target/acceptance). Setting
//! ACCEPTANCE_SKIP_MATRIX runs only criteria 1-5 and still exits nonzero.

mod common;

use std::path::PathBuf;
use std::process::ExitCode;

use common::criteria::{self, Outcome};

fn report(n: usize, name: &str, outcome: &Outcome) -> bool {
    match outcome {
        Ok(detail) => println!("criterion {n} PASS {name}: {detail}"),
        Err(detail) => println!("criterion {n} FAIL {name}: {detail}"),
    }
    outcome.is_ok()
}

fn main() -> ExitCode {
    // cargo passes libtest flags such as --list; nothing to enumerate here
    if std::env::args().any(|a| a == "--list") {
        return ExitCode::SUCCESS;
    }
    let out = std::env::var_os("ACCEPTANCE_OUT")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../target/acceptance"));

    let mut ok = true;
    ok &= report(1, "loss identities", &criteria::loss_identities());
    ok &= report(2, "gradient checks", &criteria::gradient_checks());
    ok &= report(3, "distillation mechanics", &criteria::distillation_mechanics());
    ok &= report(4, "degenerate equivalences", &criteria::degenerate_equivalences());
    ok &= report(5, "beam search against exhaustive search", &criteria::oracle_decoding());

    if std::env::var_os("ACCEPTANCE_SKIP_MATRIX").is_some() {
        println!("criteria 6-8 SKIPPED (ACCEPTANCE_SKIP_MATRIX is set)");
        return ExitCode::FAILURE;
    }
    let mut log = |line: &str| eprintln!("  {line}");
    match criteria::standard_matrix(&out, &mut log) {
        Ok(run) => {
            ok &= report(6, "context-size ordering", &criteria::table1_ordering(&run));
            ok &= report(7, "distillation vs shallow fusion", &criteria::lm_comparison(&run, &out));
            ok &= report(8, "MLM uses right context", &criteria::bidirectionality(&run));
        }
        Err(e) => {
            for (n, name) in [(6, "context-size ordering"), (7, "distillation vs shallow fusion"), (8, "MLM uses right context")] {
                ok &= report(n, name, &Err(format!("standard matrix failed: {e}")));
            }
        }
    }
    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
