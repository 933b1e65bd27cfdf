mod common;

use common::{gradient_errors, LOSS_NAMES};

#[test]
fn every_loss_matches_finite_differences() {
    for seed in 0..20 {
        let errs = gradient_errors(seed);
        for (name, e) in LOSS_NAMES.iter().zip(errs) {
            assert!(e < 1e-4, "{name} seed {seed}: relative error {e:e}");
        }
    }
}
