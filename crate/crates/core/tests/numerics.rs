mod common;

use common::fd;

#[test]
fn every_op_matches_finite_differences() {
    for (op, err) in fd::check_all(11) {
        assert!(err <= 1e-4, "{op}: relative error {err:e}");
    }
}

#[test]
fn harness_rejects_a_wrong_gradient() {
    assert!(fd::mismatched_error(3) > 1e-2);
}
