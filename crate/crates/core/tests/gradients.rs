use vsr_core::autodiff::gradcheck::gradient_suite;

#[test]
fn every_operation_matches_finite_differences() {
    for r in gradient_suite(20, 2024).unwrap() {
        println!("{:<24} cases={} max_rel_err={:.3e}", r.op, r.cases, r.max_error);
        assert!(r.max_error <= 1e-3, "{r:?}");
    }
}
