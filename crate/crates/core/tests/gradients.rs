mod common;

use common::{gradient_check, VARIANTS};

#[test]
fn full_model_gradients_match_finite_differences() {
    for variant in VARIANTS {
        for seed in 0..20 {
            let err = gradient_check(variant, seed);
            assert!(err < 1e-4, "{variant} seed {seed}: relative error {err:e}");
        }
    }
}
