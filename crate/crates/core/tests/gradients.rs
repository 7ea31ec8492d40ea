//! Gradient suite: every differentiable operation against central finite
//! differences on random micro-fixtures.

use slimdet_core::gradcheck::{run_gradient_suite, FD_TOL};

#[test]
fn gradient_suite_full() {
    let reports = run_gradient_suite(20260810, 20);
    let mut failed = Vec::new();
    for r in &reports {
        println!(
            "[gradients] {:<16} fixtures={} max_rel_err={:.3e} {}",
            r.op,
            r.fixtures,
            r.max_rel_err,
            if r.passed() { "PASS" } else { "FAIL" }
        );
        if !r.passed() {
            failed.push(r.op);
        }
    }
    assert!(failed.is_empty(), "ops over tolerance {FD_TOL}: {failed:?}");
    assert!(reports.len() >= 15, "suite must cover every differentiable op");
}
