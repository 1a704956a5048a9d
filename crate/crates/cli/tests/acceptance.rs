//! One pass/fail line per acceptance criterion. Exits nonzero if any fails.

use std::fs;
use std::path::Path;
use std::process::Command;
use std::sync::Arc;
use std::time::{Duration, Instant};

use nalgebra::DVector;
use ptchain_core::control::{closed_form_x0, ObserverLaw, StateFeedbackLaw};
use ptchain_core::linalg::stable_norm;
use ptchain_core::model::{
    bilinear_to_chained, to_transformed, BilinearScenario, ChainedState, ChainedSystem, UncertaintySpec,
};
use ptchain_core::ple::PleBasis;
use ptchain_core::sim::{
    simulate_output_feedback, simulate_state_feedback, simulate_transformed, IntegratorConfig, Sample,
};
use ptchain_core::verify::{
    check_lemma1, check_ple_suite, check_theorem1_bounds, reference_linear_spec, terminal_config, VerificationReport,
    PLE_GRID,
};

const RESIDUAL_TOL: f64 = 1e-8;
const TRACE_TOL: f64 = 1e-8;
const SPECTRUM_TOL: f64 = 1e-8;
const CURVATURE_TOL: f64 = 1e-8;
const SANDWICH_TOL: f64 = 1e-5;
const X0_ORACLE_TOL: f64 = 1e-6;
const TERMINAL_FRACTION: f64 = 1e-2;
const GROWTH_FACTOR: f64 = 2.0;
const BOUND_SLACK: f64 = 1.0 + 1e-6;
const TRANSFORM_TOL: f64 = 1e-4;
const LEMMA_SAMPLES: usize = 1000;
const LEMMA_SLACK: f64 = 1e-12;
const PERFECT_START_TOL: f64 = 1e-6;
const PLE_TIME_LIMIT: Duration = Duration::from_secs(1);
const EXAMPLE_TIME_LIMIT: Duration = Duration::from_secs(5);

type Metric = Box<dyn Fn(&Sample) -> f64>;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn worst(r: &VerificationReport, prefix: &str) -> f64 {
    r.entries.iter().filter(|e| e.check.starts_with(prefix)).map(|e| e.residual).fold(0.0, f64::max)
}

fn example() -> (BilinearScenario, ChainedSystem, ChainedState) {
    let sc = BilinearScenario::reference();
    let (sys, maps) = bilinear_to_chained(&sc).unwrap();
    let init = maps.to_chained(BilinearScenario::reference_initial());
    (sc, sys, init)
}

fn state_law(sys: &ChainedSystem, horizon: f64, beta: Option<f64>) -> StateFeedbackLaw {
    let d = sys.derived_bounds(horizon).unwrap().d;
    let law = StateFeedbackLaw::new(Arc::new(PleBasis::new(sys.n).unwrap()), horizon, d, sys.c0).unwrap();
    beta.map_or(law.clone(), |b| law.with_beta_unchecked(b).unwrap())
}

fn ple_identities() -> Outcome {
    let start = Instant::now();
    let mut r = VerificationReport::new();
    for n in 2..=6 {
        r.extend(check_ple_suite(&PleBasis::new(n).unwrap(), &PLE_GRID).unwrap());
    }
    let elapsed = start.elapsed();
    let res = worst(&r, "ple_residual").max(worst(&r, "dual_ple_residual"));
    let tr = worst(&r, "trace_bPb").max(worst(&r, "trace_cQc"));
    outcome(
        res <= RESIDUAL_TOL && tr <= TRACE_TOL && elapsed < PLE_TIME_LIMIT,
        format!("n=2..6, gamma in {{0.5,1,2,10}}: residual {res:.2e} (tol {RESIDUAL_TOL:e}), trace {tr:.2e} (tol {TRACE_TOL:e}), {elapsed:.2?} (limit 1 s)"),
    )
}

fn spectrum() -> Outcome {
    let mut spread = 0.0f64;
    for n in 2..=6 {
        let r = check_ple_suite(&PleBasis::new(n).unwrap(), &[1.0]).unwrap();
        spread = spread.max(worst(&r, "spectrum_similarity"));
    }
    outcome(
        spread <= SPECTRUM_TOL,
        format!("P_n, Q_n and inverses, n=2..6: relative spread {spread:.2e} (tol {SPECTRUM_TOL:e})"),
    )
}

fn psd_suite() -> Outcome {
    let mut r = VerificationReport::new();
    for n in 2..=6 {
        r.extend(check_ple_suite(&PleBasis::new(n).unwrap(), &PLE_GRID).unwrap());
    }
    let curv = worst(&r, "curvature");
    let sandwich = worst(&r, "dP_sandwich");
    outcome(
        curv <= CURVATURE_TOL && sandwich <= SANDWICH_TOL,
        format!("curvature -lambda_min/|P| {curv:.2e} (tol {CURVATURE_TOL:e}), dP/dgamma sandwich slack {sandwich:.2e} (tol {SANDWICH_TOL:e})"),
    )
}

fn x0_oracle(traces: &mut Vec<(StateFeedbackLaw, ptchain_core::sim::Trajectory, f64)>) -> Outcome {
    let (_, sys, init) = example();
    let mut worst_err = 0.0f64;
    let mut parts = Vec::new();
    for (horizon, beta, x0) in [(2.5, Some(100.0), 0.0), (1.0, None, 1.0), (2.0, None, -3.0)] {
        let law = state_law(&sys, horizon, beta);
        let start = ChainedState { x0, x: init.x.clone() };
        let traj = simulate_state_feedback(&sys, &law, &start, &terminal_config()).unwrap();
        let window: Vec<&Sample> = traj.samples.iter().filter(|s| s.t <= 0.999 * horizon).collect();
        let exact = |s: &Sample| closed_form_x0(s.t, x0, law.beta, horizon, 0.0);
        let err = window.iter().map(|s| (s.x0 - exact(s)).abs()).fold(0.0, f64::max);
        let scale = window.iter().map(|s| exact(s).abs()).fold(0.0, f64::max);
        let rel = err / scale;
        worst_err = worst_err.max(rel);
        parts.push(format!("(T={horizon}, beta={:.4}, x0={x0}) {rel:.2e}", law.beta));
        traces.push((law, traj, x0));
    }
    outcome(
        worst_err <= X0_ORACLE_TOL,
        format!("sup relative error on [0, 0.999T]: {} (tol {X0_ORACLE_TOL:e})", parts.join(", ")),
    )
}

fn example_reproduction(err_peak_ratio: &mut f64) -> Outcome {
    let (sc, sys, init) = example();
    let horizon = sc.horizon;
    let d = sys.derived_bounds(horizon).unwrap().d;
    let law =
        ObserverLaw::new(Arc::new(PleBasis::new(2).unwrap()), horizon, d).unwrap().with_beta_unchecked(100.0).unwrap();
    let start = Instant::now();
    let traj = simulate_output_feedback(&sys, &law, &init, &DVector::zeros(2), &terminal_config()).unwrap();
    let elapsed = start.elapsed();

    let late_t = horizon * (1.0 - 1e-3);
    let late = traj.sample_at(late_t).expect("checkpoint at T(1-1e-3)");
    let last = traj.last();
    let final_ok = (last.t - horizon * (1.0 - 1e-6)).abs() <= 1e-12 * horizon;
    let xi = |s: &Sample| stable_norm(s.xi.as_ref().unwrap());
    let quantities: [(&str, Metric); 5] = [
        ("|x0|", Box::new(|s: &Sample| s.x0.abs())),
        ("|x|", Box::new(|s: &Sample| stable_norm(&s.x))),
        ("|xi|", Box::new(xi)),
        ("|u0|", Box::new(|s: &Sample| s.u0.abs())),
        ("|u|", Box::new(|s: &Sample| s.u.abs())),
    ];
    let mut pass = final_ok && elapsed < EXAMPLE_TIME_LIMIT;
    let mut parts = Vec::new();
    for (name, f) in &quantities {
        let frac = f(late) / traj.peak(|s| f(s));
        pass &= frac <= TERMINAL_FRACTION;
        parts.push(format!("{name} {frac:.1e}"));
    }
    let trend = |f: &dyn Fn(&Sample) -> f64, p: f64| {
        let a = f(late) / (horizon - late.t).powf(p);
        let b = f(last) / (horizon - last.t).powf(p);
        b / a
    };
    let gx = trend(&|s| stable_norm(&s.x), 1.5);
    let gu = trend(&|s| s.u.abs(), 0.5);
    pass &= gx <= GROWTH_FACTOR && gu <= GROWTH_FACTOR;

    let errors = traj.observation_error().unwrap();
    let peak_e = errors.iter().map(|(_, e)| stable_norm(e)).fold(0.0, f64::max);
    let late_e = errors.iter().find(|(t, _)| *t == late.t).map(|(_, e)| stable_norm(e)).unwrap();
    *err_peak_ratio = late_e / peak_e;

    outcome(
        pass,
        format!(
            "at T(1-1e-3) fraction of peak: {} (tol {TERMINAL_FRACTION:e}); growth T(1-1e-6) vs T(1-1e-3): |x| {gx:.1e}, |u| {gu:.1e} (tol {GROWTH_FACTOR}); {elapsed:.2?} (limit 5 s)",
            parts.join(", ")
        ),
    )
}

fn explicit_bounds(runs: &[(StateFeedbackLaw, ptchain_core::sim::Trajectory, f64)]) -> Outcome {
    let mut a = 0.0f64;
    let mut b = 0.0f64;
    for (law, traj, x0) in runs {
        let r = check_theorem1_bounds(traj, law, *x0).unwrap();
        a = a.max(worst(&r, "x0_bound"));
        b = b.max(worst(&r, "u0_bound"));
    }
    outcome(
        a <= BOUND_SLACK && b <= BOUND_SLACK,
        format!("{} state-feedback runs: max |x0|/bound {a:.9}, max |u0|/bound {b:.9} (tol {BOUND_SLACK})", runs.len()),
    )
}

fn lyapunov_decay(runs: &mut Vec<(StateFeedbackLaw, ptchain_core::sim::Trajectory, f64)>) -> Outcome {
    let (sc, sys, init) = example();
    let mut parts = Vec::new();
    let mut pass = true;
    for beta in [None, Some(100.0)] {
        let law = state_law(&sys, sc.horizon, beta);
        let traj = simulate_state_feedback(&sys, &law, &init, &terminal_config()).unwrap();
        let r = check_theorem1_bounds(&traj, &law, init.x0).unwrap();
        let decay = worst(&r, "v_decay");
        pass &= decay <= BOUND_SLACK;
        parts.push(format!("beta={:.4}: {decay:.3e}", law.beta));
        runs.push((law, traj, init.x0));
    }
    outcome(
        pass,
        format!(
            "max V(t) / ((T-t)/T e^(theta0 t) V(0)), {} (tol {BOUND_SLACK}); with T=2.5 this implies the (T-t) form",
            parts.join(", ")
        ),
    )
}

fn transformed_equivalence(runs: &mut Vec<(StateFeedbackLaw, ptchain_core::sim::Trajectory, f64)>) -> Outcome {
    let (sc, sys, init) = example();
    let horizon = sc.horizon;
    let cfg = IntegratorConfig { terminal_guard: 1e-2, ..IntegratorConfig::default() };
    let mut worst_rel = 0.0f64;
    for beta in [Some(100.0), None] {
        let law = state_law(&sys, horizon, beta);
        let direct = simulate_state_feedback(&sys, &law, &init, &cfg).unwrap();
        let z0 = to_transformed(0.0, horizon, &init.x).unwrap();
        let trans = simulate_transformed(&sys, &law, init.x0, &z0, &cfg).unwrap();
        let (mut diff, mut size) = (0.0f64, 0.0f64);
        for (a, b) in direct.resampled.iter().zip(&trans.resampled) {
            assert_eq!(a.t, b.t);
            let za = to_transformed(a.t, horizon, &a.x).unwrap();
            diff = diff.max((za.clone() - &b.x).amax()).max((a.x0 - b.x0).abs());
            size = size.max(za.amax()).max(a.x0.abs());
        }
        worst_rel = worst_rel.max(diff / size);
        runs.push((law, direct, init.x0));
    }
    outcome(
        worst_rel <= TRANSFORM_TOL,
        format!("sup |z_direct - z_transformed| / sup |z| on [0, 0.99T]: {worst_rel:.2e} (tol {TRANSFORM_TOL:e})"),
    )
}

fn lemma1() -> Outcome {
    let (sc, sys, _) = example();
    let specs = [
        ("zero", UncertaintySpec::zero(3), 3),
        ("linear", reference_linear_spec(3).unwrap(), 3),
        ("bilinear_example", sys.uncertainty.clone(), 2),
    ];
    let mut pass = true;
    let mut parts = Vec::new();
    for (k, (name, spec, n)) in specs.iter().enumerate() {
        let r = check_lemma1(spec, sc.horizon, *n, LEMMA_SAMPLES, 11 + k as u64).unwrap();
        let excess = worst(&r, "lemma_phi_bound");
        pass &= excess <= LEMMA_SLACK && r.entries.iter().all(|e| e.samples == LEMMA_SAMPLES);
        parts.push(format!("{name} {excess:.1e}"));
    }
    outcome(pass, format!("{LEMMA_SAMPLES} samples each, worst excess: {} (tol {LEMMA_SLACK:e})", parts.join(", ")))
}

fn observer(example_ratio: f64) -> Outcome {
    let sys = ChainedSystem::new(3, 0.0, UncertaintySpec::zero(3)).unwrap();
    let d = sys.derived_bounds(1.0).unwrap().d;
    let law = ObserverLaw::new(Arc::new(PleBasis::new(3).unwrap()), 1.0, d).unwrap();
    let init = ChainedState::new(1.0, vec![0.0; 3]);
    let traj = simulate_output_feedback(&sys, &law, &init, &DVector::zeros(3), &IntegratorConfig::default()).unwrap();
    let e = traj.observation_error().unwrap().iter().map(|(_, e)| stable_norm(e)).fold(0.0, f64::max);
    outcome(
        e <= PERFECT_START_TOL && example_ratio <= TERMINAL_FRACTION,
        format!(
            "perfect start (zero uncertainty, x(0)=0, xi(0)=0, formula beta {:.1}): max |e| {e:.1e} (tol {PERFECT_START_TOL:e}); example |e| at T(1-1e-3) / peak {example_ratio:.1e} (tol {TERMINAL_FRACTION:e})",
            law.beta
        ),
    )
}

fn determinism() -> Outcome {
    let bin = env!("CARGO_BIN_EXE_ptchain");
    let fixture = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures/unicycle_rk4.ini");
    let dir = tempfile::tempdir().unwrap();
    let run = |args: &[&str]| Command::new(bin).args(args).current_dir(dir.path()).output().unwrap().status.success();
    let read = |p: &str| fs::read(Path::new(dir.path()).join(p)).unwrap_or_default();
    let ok = run(&["verify", "--seed", "7", "--out", "v1"])
        && run(&["verify", "--seed", "7", "--out", "v2"])
        && run(&["simulate", "--config", fixture, "--out", "s1"])
        && run(&["simulate", "--config", fixture, "--out", "s2"]);
    let verify_same = ok && read("v1/report.csv") == read("v2/report.csv") && !read("v1/report.csv").is_empty();
    let sim_same =
        ok && read("s1/unicycle_rk4.csv") == read("s2/unicycle_rk4.csv") && !read("s1/unicycle_rk4.csv").is_empty();
    outcome(
        verify_same && sim_same,
        format!("verify --seed 7 report.csv identical: {verify_same}; fixed-step simulate CSV identical: {sim_same}"),
    )
}

fn main() {
    let mut state_runs = Vec::new();
    let mut observer_ratio = f64::INFINITY;
    let c1 = ple_identities();
    let c2 = spectrum();
    let c3 = psd_suite();
    let c4 = x0_oracle(&mut state_runs);
    let c5 = example_reproduction(&mut observer_ratio);
    let c7 = lyapunov_decay(&mut state_runs);
    let c8 = transformed_equivalence(&mut state_runs);
    let c6 = explicit_bounds(&state_runs);
    let results = [
        (1, "PLE identities", c1),
        (2, "spectrum similarity", c2),
        (3, "PSD inequalities", c3),
        (4, "closed-form x0", c4),
        (5, "unicycle example", c5),
        (6, "explicit x0/u0 bounds", c6),
        (7, "Lyapunov decay", c7),
        (8, "transformed dynamics", c8),
        (9, "uncertainty lemma", lemma1()),
        (10, "observer convergence", observer(observer_ratio)),
        (11, "determinism", determinism()),
    ];

    let mut failed = 0;
    for (k, name, o) in &results {
        if !o.pass {
            failed += 1;
        }
        println!("criterion {k:>2} {} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    }
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
