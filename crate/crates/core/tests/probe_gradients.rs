mod common;

use groundprobe::probe::LossParams;
use proptest::prelude::*;

use common::{check_gradients, random_case};

#[test]
fn analytic_gradients_match_central_differences() {
    let params = LossParams {
        w_plus: 1.7,
        beta: 0.3,
        lambda: 0.2,
        gamma: 0.1,
    };
    let mut checked = 0;
    for seed in 0..25 {
        let (probe, batch, mb, mk) = random_case(seed);
        let r = check_gradients(&probe, &batch, &params, (&mb, &mk), 1e-5, 1e-8);
        assert!(r.worst_rel < 1e-4, "seed {seed}: worst relative error {}", r.worst_rel);
        assert!(r.skipped * 10 <= r.checked + r.skipped, "seed {seed}: too many kinks");
        checked += r.checked;
    }
    assert!(checked > 1000);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn gradients_hold_for_any_coefficients(
        seed in 100u64..10_000,
        beta in 0.0f64..0.5,
        lambda in 0.0f64..0.3,
        gamma in 0.05f64..0.25,
        w_plus in 0.2f64..5.0,
    ) {
        let (probe, batch, mb, mk) = random_case(seed);
        let params = LossParams { w_plus, beta, lambda, gamma };
        let r = check_gradients(&probe, &batch, &params, (&mb, &mk), 1e-5, 1e-8);
        prop_assert!(r.worst_rel < 1e-4, "worst relative error {}", r.worst_rel);
    }
}
