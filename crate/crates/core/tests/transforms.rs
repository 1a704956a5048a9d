use nalgebra::DVector;
use proptest::prelude::*;
use ptchain_core::model::{from_transformed, to_transformed};
use ptchain_core::ple::ln_diagonal;

proptest! {
    #[test]
    fn transform_round_trip(
        n in 2usize..=8,
        horizon in 0.1f64..10.0,
        frac in 0.0f64..0.999,
        seed in prop::collection::vec(-100.0f64..100.0, 8),
    ) {
        let x = DVector::from_iterator(n, seed.into_iter().take(n));
        let t = frac * horizon;
        let z = to_transformed(t, horizon, &x).unwrap();
        let back = from_transformed(t, horizon, &z).unwrap();
        for i in 0..n {
            prop_assert!((back[i] - x[i]).abs() <= 1e-12 * (1.0 + x[i].abs()));
        }
        // The last component is never rescaled.
        prop_assert_eq!(z[n - 1], x[n - 1]);
    }

    #[test]
    fn scaling_matches_gain(n in 2usize..=8, horizon in 0.1f64..10.0, frac in 0.0f64..0.99) {
        let t = frac * horizon;
        let gamma = 1.0 / (horizon - t);
        let l = ln_diagonal(gamma, n).unwrap();
        let x = DVector::from_element(n, 1.0);
        let z = to_transformed(t, horizon, &x).unwrap();
        for i in 0..n {
            prop_assert!((z[i] / l[i] - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn transforms_reject_times_at_or_past_horizon() {
    let x = DVector::from_element(2, 1.0);
    assert!(to_transformed(1.0, 1.0, &x).is_err());
    assert!(to_transformed(-0.1, 1.0, &x).is_err());
    assert!(from_transformed(0.5, 0.0, &x).is_err());
}
