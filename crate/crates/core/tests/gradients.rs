use std::time::Instant;

use ddt_core::gradcheck::{all_cases, check};

#[test]
fn every_case_matches_finite_differences() {
    let mut failures = Vec::new();
    for case in all_cases(17, None) {
        let start = Instant::now();
        let report = check(&case, 6, 1e-5, 3).unwrap();
        println!(
            "{:<28} rel_err {:.2e} (worst input {}, {} coords, {:.2}s)",
            report.name,
            report.max_rel_err,
            report.worst_input,
            report.checked,
            start.elapsed().as_secs_f64()
        );
        if !report.passed() {
            failures.push(report);
        }
    }
    assert!(failures.is_empty(), "{failures:#?}");
}
