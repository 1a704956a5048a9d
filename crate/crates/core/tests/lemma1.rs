use ptchain_core::model::{bilinear_to_chained, BilinearScenario, UncertaintySpec};
use ptchain_core::verify::{check_lemma1, reference_linear_spec, violating_spec};

#[test]
fn randomized_bound_holds_for_admissible_specs() {
    let (sys, _) = bilinear_to_chained(&BilinearScenario::reference()).unwrap();
    let cases = [(UncertaintySpec::zero(3), 3), (reference_linear_spec(4).unwrap(), 4), (sys.uncertainty.clone(), 2)];
    for (seed, (spec, n)) in cases.iter().enumerate() {
        for horizon in [0.5, 1.0, 2.5] {
            let r = check_lemma1(spec, horizon, *n, 1000, seed as u64).unwrap();
            assert!(r.all_pass(), "{}", r.to_text());
            assert!(r.entries.iter().all(|e| e.samples == 1000));
        }
    }
}

#[test]
fn violation_is_detected() {
    let r = check_lemma1(&violating_spec(3), 1.0, 3, 200, 9).unwrap();
    assert!(!r.all_pass());
}
