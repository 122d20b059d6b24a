use qcaps::train::gradcheck::{primitive_cases, run_suite, check_case, PRIMITIVE_TOLERANCE};

#[test]
fn every_primitive_at_ten_points() {
    for (i, case) in primitive_cases().iter().enumerate() {
        let (err, coords) = check_case(case, i as u64).unwrap();
        assert!(coords > 0);
        assert!(err <= PRIMITIVE_TOLERANCE, "{}: {err:e}", case.name);
    }
}

#[test]
fn full_report_passes() {
    let rows = run_suite(None).unwrap();
    for r in &rows {
        println!("{:<45} {:>10.3e} (tol {:.0e}) {}", r.component, r.max_rel_error, r.tolerance, r.passed);
    }
    assert!(rows.iter().all(|r| r.passed));
}
