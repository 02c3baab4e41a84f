//! Finite-difference verification of every differentiable op and of the
//! composed head, loss, and interaction unit, three seeds each.

use hieraseg::check;

#[test]
fn all_ops_pass_finite_difference_checks() {
    for seed in [11, 22, 33] {
        for report in check::op_gradient_suite(seed) {
            assert!(
                report.passed(),
                "seed {seed}: op {} max rel err {:.3e} (tol {:.0e})",
                report.name,
                report.max_err,
                check::GRAD_TOL
            );
        }
    }
}

#[test]
fn composed_modules_pass_finite_difference_checks() {
    for seed in [11, 22, 33] {
        for report in check::composite_gradient_suite(seed) {
            assert!(
                report.passed(),
                "seed {seed}: {} max rel err {:.3e} (tol {:.0e})",
                report.name,
                report.max_err,
                check::GRAD_TOL
            );
        }
    }
}
