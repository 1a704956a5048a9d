use nalgebra::DMatrix;
use ptchain_core::ple::{dual_ple_residual, ple_residual, PleBasis, MAX_CHAIN};
use ptchain_core::verify::{check_ple_suite, PLE_GRID};

#[test]
fn residuals_and_traces_for_every_supported_length() {
    for n in 2..=MAX_CHAIN {
        let basis = PleBasis::new(n).unwrap();
        for &gamma in &[0.5, 1.0, 2.0, 10.0] {
            let p = basis.eval_p(gamma).unwrap();
            let q = basis.eval_q(gamma).unwrap();
            let scale_p = p.norm() * (gamma + p[(n - 1, n - 1)]);
            let scale_q = q.norm() * (gamma + q[(0, 0)]);
            assert!(ple_residual(&basis.chain, gamma, &p) <= 1e-12 * scale_p, "n={n} gamma={gamma}");
            assert!(dual_ple_residual(&basis.chain, gamma, &q) <= 1e-12 * scale_q, "n={n} gamma={gamma}");
            let nb = n as f64 * gamma;
            assert!((p[(n - 1, n - 1)] - nb).abs() <= 1e-8 * nb);
            assert!((q[(0, 0)] - nb).abs() <= 1e-8 * nb);
        }
    }
}

#[test]
fn suite_passes_for_small_lengths() {
    for n in 2..=6 {
        let r = check_ple_suite(&PleBasis::new(n).unwrap(), &PLE_GRID).unwrap();
        assert!(r.all_pass(), "{}", r.to_text());
    }
}

#[test]
fn n2_reference_values() {
    let b = PleBasis::new(2).unwrap();
    assert_eq!(b.p_n, DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 2.0]));
    assert_eq!(b.q_n, DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 1.0]));
    assert!((b.lambda - (3.0 + 5f64.sqrt()) / 2.0).abs() < 1e-12);
    assert!((b.k3 - 10.0).abs() < 1e-12);
    assert!((b.delta_c - 6.828427).abs() < 1e-6);
}

#[test]
fn unit_solutions_are_exact_integers() {
    for n in 2..=MAX_CHAIN {
        let b = PleBasis::new(n).unwrap();
        assert!(b.p_n.iter().chain(b.q_n.iter()).all(|v| v.fract() == 0.0), "n={n}");
    }
}
