mod common;

use common::grad_suite::{layer_checks, loss_checks, submodule_checks, Check, TOLERANCE};

fn assert_all(checks: Vec<Check>) {
    for c in &checks {
        assert!(
            c.worst <= TOLERANCE,
            "{}: relative error {:.3e} at {}",
            c.name,
            c.worst,
            c.worst_tensor
        );
    }
}

#[test]
fn layers_match_finite_differences() {
    assert_all(layer_checks(0).unwrap());
}

#[test]
fn submodules_match_finite_differences() {
    assert_all(submodule_checks(0).unwrap());
}

#[test]
fn losses_match_finite_differences() {
    assert_all(loss_checks(0).unwrap());
}
