mod common;

use common::{layer_cases, model_loss_errors, worst_layer_error};

#[test]
fn every_layer_kind_matches_finite_differences() {
    assert!(layer_cases(0).len() >= 20);
    for seed in 0..20 {
        let (name, err) = worst_layer_error(seed);
        assert!(err < 1e-5, "seed {seed}: {name} off by {err:e}");
    }
}

#[test]
fn joint_and_test_losses_match_finite_differences() {
    for seed in 0..20 {
        let (joint, test) = model_loss_errors(seed);
        assert!(joint < 1e-5 && test < 1e-5, "seed {seed}: joint {joint:e}, test {test:e}");
    }
}

