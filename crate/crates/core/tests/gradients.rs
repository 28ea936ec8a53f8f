mod common;

use common::{end_to_end_gradient_report, op_gradient_reports, FD_TOL, MIN_PROBES};

#[test]
fn every_op_matches_finite_differences() {
    let reports = op_gradient_reports().unwrap();
    for r in &reports {
        println!("{:<28} probes {:>3}  max rel err {:.2e}", r.name, r.probes, r.max_rel_err);
    }
    let failed: Vec<_> = reports.iter().filter(|r| !r.passed()).collect();
    assert!(failed.is_empty(), "failed: {failed:?}");
}

#[test]
fn full_model_matches_finite_differences() {
    let r = end_to_end_gradient_report(MIN_PROBES + 30).unwrap();
    println!("{r:?}");
    assert!(r.max_rel_err <= FD_TOL, "{r:?}");
}
