use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use ptchain_core::control::{beta_state_feedback, OutputGainCandidates};
use ptchain_core::linalg::stable_norm;
use ptchain_core::model::ChainedSystem;
use ptchain_core::ple::PleBasis;
use ptchain_core::sim::{IntegratorConfig, Sample, Trajectory};
use ptchain_core::verify::{delta_o_from_pencil, estimate_delta_o, run_suite, SuiteOptions, DELTA_O_GRID, LATE_GUARD};

use crate::config::{parse_uncertainty, ScenarioConfig, UncertaintyChoice, EXAMPLE_CONFIG};
use crate::output::{num, trajectory_csv, write_all};
use crate::scenario::{self, Law, Prepared};
use crate::svg::{line_chart, Series};
use crate::CliError;

#[derive(Debug, Parser)]
#[command(name = "ptchain", version, about = "Prescribed-time feedback for uncertain chained systems")]
pub struct Cli {
    #[command(subcommand)]
    pub cmd: Cmd,
}

#[derive(Debug, Subcommand)]
pub enum Cmd {
    /// Print the design constants for a chain length and prescribed time.
    Constants {
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        horizon: Option<f64>,
        /// zero | linear:<rows> | bilinear_example:<eps>
        #[arg(long)]
        uncertainty: Option<String>,
        /// Take n, horizon and uncertainty from a scenario file.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Also write constants.csv here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Simulate a scenario and write its trajectory.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        svg: bool,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the check suite, or the checks for one scenario.
    Verify {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        full: bool,
        #[arg(long)]
        negative_controls: bool,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a scenario over sampled initial states and gains.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Simulate the bundled unicycle scenario.
    Example {
        #[arg(long)]
        svg: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

pub fn dispatch(cli: Cli, out: &mut dyn Write) -> Result<(), CliError> {
    let mut text = String::new();
    let result = match cli.cmd {
        Cmd::Constants { n, horizon, uncertainty, config, out: dir } => {
            constants(&mut text, n, horizon, uncertainty.as_deref(), config.as_deref(), dir.as_deref())
        }
        Cmd::Simulate { config, svg, out: dir, seed } => {
            let mut cfg = load(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            simulate(&mut text, &cfg, svg, dir.as_deref())
        }
        Cmd::Verify { config, full, negative_controls, seed, out: dir } => {
            verify(&mut text, config.as_deref(), full, negative_controls, seed, dir.as_deref())
        }
        Cmd::Sweep { config, out: dir, seed } => {
            let mut cfg = load(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            sweep(&mut text, &cfg, dir.as_deref())
        }
        Cmd::Example { svg, out: dir } => {
            simulate(&mut text, &ScenarioConfig::parse(EXAMPLE_CONFIG)?, svg, dir.as_deref())
        }
    };
    let _ = out.write_all(text.as_bytes());
    result
}

pub fn load(path: &Path) -> Result<ScenarioConfig, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Io { path: path.to_path_buf(), source: e })?;
    ScenarioConfig::parse(&text)
}

fn matrix_lines(m: &DMatrix<f64>) -> String {
    m.row_iter()
        .map(|r| format!("  [{}]", r.iter().map(|v| format!("{v}")).collect::<Vec<_>>().join(", ")))
        .collect::<Vec<_>>()
        .join("\n")
}

pub fn constants(
    text: &mut String,
    n: Option<usize>,
    horizon: Option<f64>,
    uncertainty: Option<&str>,
    config: Option<&Path>,
    dir: Option<&Path>,
) -> Result<(), CliError> {
    let (n, horizon, choice) = match config {
        Some(p) => {
            let c = load(p)?;
            (c.n, c.horizon, c.uncertainty)
        }
        None => {
            let n = n.ok_or_else(|| CliError::Config("constants needs --n or --config".into()))?;
            let choice = match uncertainty {
                None => UncertaintyChoice::Zero,
                Some(s) => parse_uncertainty(s).map_err(CliError::Config)?,
            };
            (n, horizon.unwrap_or(1.0), choice)
        }
    };
    if !(horizon > 0.0) || !horizon.is_finite() {
        return Err(CliError::Config(format!("horizon must be positive, got {horizon}")));
    }
    let basis = PleBasis::new(n)?;
    let sys = ChainedSystem::new(n, 0.0, scenario::uncertainty_spec(&choice, n)?)?;
    let d = sys.derived_bounds(horizon)?.d;
    let beta_state = beta_state_feedback(n, basis.delta_c, d, basis.lambda, 0.0, horizon);
    let cand = OutputGainCandidates::new(n, basis.delta_c, d, basis.lambda, basis.k3);
    let delta_o = delta_o_from_pencil(&basis)?;
    let delta_o_fd = estimate_delta_o(&basis, &DELTA_O_GRID)?;
    let b_p_b = basis.p_n[(n - 1, n - 1)];

    let rows: Vec<(&str, f64)> = vec![
        ("n", n as f64),
        ("horizon", horizon),
        ("Lambda", basis.lambda),
        ("delta_c", basis.delta_c),
        ("delta_o", delta_o),
        ("delta_o_finite_difference", delta_o_fd),
        ("k3", basis.k3),
        ("d", d),
        ("beta_state", beta_state),
        ("beta_output_1", cand.beta1),
        ("beta_output_2", cand.beta2),
        ("beta_output", cand.max()),
        ("b_Pn_b", b_p_b),
    ];
    let _ = writeln!(text, "n = {n}, T = {horizon}, uncertainty = {}", sys.uncertainty.label());
    let _ = writeln!(text, "P_n =\n{}", matrix_lines(&basis.p_n));
    let _ = writeln!(text, "Q_n =\n{}", matrix_lines(&basis.q_n));
    for (name, v) in &rows[2..12] {
        let _ = writeln!(text, "{name:<26} {v:.9}");
    }
    let ok = if b_p_b == n as f64 { "ok" } else { "MISMATCH" };
    let _ = writeln!(text, "self-check: b'P_n b = {b_p_b} (expected n = {n}) {ok}");
    if let Some(dir) = dir {
        let mut csv = String::from("name,value\n");
        for (name, v) in &rows {
            let _ = writeln!(csv, "{name},{}", num(*v));
        }
        write_all(dir, &[("constants.csv".into(), csv)])?;
    }
    Ok(())
}

fn plot_pair(name: &str, samples: &[Sample], n: usize) -> Vec<(String, String)> {
    let mut states = vec![Series { name: "x0".into(), points: samples.iter().map(|s| (s.t, s.x0)).collect() }];
    for i in 0..n {
        states.push(Series { name: format!("x{}", i + 1), points: samples.iter().map(|s| (s.t, s.x[i])).collect() });
    }
    if samples.first().is_some_and(|s| s.xi.is_some()) {
        for i in 0..n {
            states.push(Series {
                name: format!("xi{}", i + 1),
                points: samples.iter().map(|s| (s.t, s.xi.as_ref().map_or(f64::NAN, |x| x[i]))).collect(),
            });
        }
    }
    let controls = vec![
        Series { name: "u0".into(), points: samples.iter().map(|s| (s.t, s.u0)).collect() },
        Series { name: "u".into(), points: samples.iter().map(|s| (s.t, s.u)).collect() },
    ];
    vec![
        (format!("{name}_states.svg"), line_chart(&format!("{name}: states"), "t [s]", &states)),
        (format!("{name}_controls.svg"), line_chart(&format!("{name}: controls"), "t [s]", &controls)),
    ]
}

fn describe_law(text: &mut String, p: &Prepared, cfg: &ScenarioConfig, law: &Law) -> Result<(), CliError> {
    let formula = scenario::formula_beta(p, cfg)?;
    let _ = writeln!(text, "beta = {} ({:?}; formula value {formula:.6})", law.beta(), law.origin());
    if law.beta() < formula {
        let _ = writeln!(text, "note: gain below the formula value; the convergence guarantees do not apply");
    }
    Ok(())
}

pub fn simulate(text: &mut String, cfg: &ScenarioConfig, svg: bool, dir: Option<&Path>) -> Result<(), CliError> {
    let p = scenario::prepare(cfg)?;
    let law = scenario::make_law(&p, cfg, cfg.beta, cfg.allow_below_formula)?;
    describe_law(text, &p, cfg, &law)?;
    let traj = scenario::simulate(&p, &law, &cfg.integrator)?;
    let main = if traj.resampled.is_empty() { &traj.samples } else { &traj.resampled };
    let mut files = vec![(format!("{}.csv", cfg.name), trajectory_csv(main, cfg.n))];
    if cfg.output.native && !traj.resampled.is_empty() {
        files.push((format!("{}_native.csv", cfg.name), trajectory_csv(&traj.samples, cfg.n)));
    }
    if svg {
        files.extend(plot_pair(&cfg.name, main, cfg.n));
    }
    let dir = dir.unwrap_or(&cfg.output.dir);
    let written = write_all(dir, &files)?;
    let last = traj.last();
    let _ = writeln!(
        text,
        "{} accepted steps, {} rejected; stopped at t = {} with |x0| = {:e}, |x| = {:e}, |u| = {:e}",
        traj.stats.accepted,
        traj.stats.rejected,
        last.t,
        last.x0.abs(),
        stable_norm(&last.x),
        last.u.abs()
    );
    for w in written {
        let _ = writeln!(text, "wrote {}", w.display());
    }
    Ok(())
}

fn with_late_checkpoint(ic: &IntegratorConfig) -> IntegratorConfig {
    let mut ic = ic.clone();
    let late = 1.0 - LATE_GUARD;
    if ic.terminal_guard < LATE_GUARD && !ic.checkpoint_fractions.contains(&late) {
        ic.checkpoint_fractions.push(late);
    }
    ic.resample_dt = None;
    ic
}

pub fn verify(
    text: &mut String,
    config: Option<&Path>,
    full: bool,
    negative_controls: bool,
    seed: Option<u64>,
    dir: Option<&Path>,
) -> Result<(), CliError> {
    let (report, stem, default_dir) = match config {
        Some(path) => {
            let cfg = load(path)?;
            let p = scenario::prepare(&cfg)?;
            let law = scenario::make_law(&p, &cfg, cfg.beta, cfg.allow_below_formula)?;
            describe_law(text, &p, &cfg, &law)?;
            let traj = scenario::simulate(&p, &law, &with_late_checkpoint(&cfg.integrator))?;
            (scenario::check(&traj, &p, &law)?, format!("{}_report", cfg.name), cfg.output.dir.clone())
        }
        None => {
            let opts = SuiteOptions { seed: seed.unwrap_or(0), negative_controls, full, ..SuiteOptions::default() };
            (run_suite(&opts)?, "report".to_string(), PathBuf::from("verify_out"))
        }
    };
    let dir = dir.unwrap_or(&default_dir);
    let written =
        write_all(dir, &[(format!("{stem}.csv"), report.to_csv()), (format!("{stem}.txt"), report.to_text())])?;
    let checks = report.entries.iter().filter(|e| !e.negative_control).count();
    let failures = report.failures();
    let _ = writeln!(text, "{} of {checks} checks passed", checks - failures.len());
    for f in &failures {
        let _ = writeln!(text, "FAILED {} (residual {:e}, threshold {:e})", f.check, f.residual, f.threshold);
    }
    if negative_controls {
        let caught = report.negative_controls_caught();
        let _ = writeln!(text, "negative controls {}", if caught { "detected" } else { "NOT detected" });
    }
    for w in written {
        let _ = writeln!(text, "wrote {}", w.display());
    }
    if !failures.is_empty() {
        return Err(CliError::ChecksFailed(format!("{} checks failed", failures.len())));
    }
    if negative_controls && !report.negative_controls_caught() {
        return Err(CliError::ChecksFailed("a negative control passed; the checks are not sensitive".into()));
    }
    Ok(())
}

/// Per-run summary of a sweep.
#[derive(Debug, Clone)]
pub struct SweepRow {
    pub index: usize,
    pub beta: f64,
    pub init: Vec<f64>,
    pub outcome: Result<SweepStats, String>,
}

#[derive(Debug, Clone)]
pub struct SweepStats {
    pub origin: String,
    pub final_t: f64,
    pub peak_x: f64,
    pub late_x: f64,
    pub envelope_x: f64,
    pub checks_pass: bool,
}

impl SweepStats {
    pub fn late_fraction(&self) -> f64 {
        if self.peak_x == 0.0 {
            0.0
        } else {
            self.late_x / self.peak_x
        }
    }

    pub fn terminal_pass(&self) -> bool {
        self.late_fraction() <= 1e-2
    }
}

fn sweep_stats(traj: &Trajectory, checks_pass: bool, origin: String) -> SweepStats {
    let horizon = traj.meta.horizon;
    let late = traj.sample_at(horizon * (1.0 - LATE_GUARD)).unwrap_or_else(|| traj.last());
    SweepStats {
        origin,
        final_t: traj.last().t,
        peak_x: traj.peak(|s| stable_norm(&s.x)),
        late_x: stable_norm(&late.x),
        envelope_x: traj.peak(|s| stable_norm(&s.x) / (horizon - s.t).powf(1.5)),
        checks_pass,
    }
}

pub fn sweep_rows(cfg: &ScenarioConfig) -> Result<Vec<SweepRow>, CliError> {
    let sw = &cfg.sweep;
    if sw.initials == 0 && sw.betas.is_empty() {
        return Err(CliError::Config("empty sweep: set [sweep] initials and/or betas".into()));
    }
    let p = scenario::prepare(cfg)?;
    let formula = scenario::formula_beta(&p, cfg)?;
    let betas: Vec<f64> = if sw.betas.is_empty() {
        vec![cfg.beta.unwrap_or(formula)]
    } else {
        sw.betas.iter().map(|b| scenario::resolve_beta(*b, formula)).collect()
    };
    let inits: Vec<Vec<f64>> = if sw.initials == 0 {
        vec![cfg.init.clone()]
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        (0..sw.initials)
            .map(|_| (0..=cfg.n).map(|_| rng.random_range(-sw.init_scale..=sw.init_scale)).collect())
            .collect()
    };
    let jobs: Vec<(usize, f64, Vec<f64>)> = betas
        .iter()
        .flat_map(|b| inits.iter().map(move |i| (*b, i.clone())))
        .enumerate()
        .map(|(k, (b, i))| (k, b, i))
        .collect();
    let integrator = with_late_checkpoint(&cfg.integrator);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(sw.threads)
        .build()
        .map_err(|e| CliError::Config(format!("worker pool: {e}")))?;
    let rows = pool.install(|| {
        jobs.par_iter()
            .map(|(index, beta, init)| {
                let outcome = (|| -> Result<SweepStats, CliError> {
                    let mut run_cfg = cfg.clone();
                    run_cfg.init = init.clone();
                    let p = scenario::prepare(&run_cfg)?;
                    let law = scenario::make_law(&p, &run_cfg, Some(*beta), true)?;
                    let traj = scenario::simulate(&p, &law, &integrator)?;
                    let report = scenario::check(&traj, &p, &law)?;
                    Ok(sweep_stats(&traj, report.all_pass(), format!("{:?}", law.origin())))
                })()
                .map_err(|e| e.to_string());
                SweepRow { index: *index, beta: *beta, init: init.clone(), outcome }
            })
            .collect::<Vec<_>>()
    });
    Ok(rows)
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from(
        "run,beta,gain_origin,init,status,final_t,peak_x,late_x,late_fraction,terminal_pass,envelope_x,checks_pass,message\n",
    );
    for r in rows {
        let init = r.init.iter().map(|v| num(*v)).collect::<Vec<_>>().join(";");
        match &r.outcome {
            Ok(st) => {
                let _ = writeln!(
                    s,
                    "{},{},{},{init},ok,{},{},{},{},{},{},{},",
                    r.index,
                    num(r.beta),
                    st.origin,
                    num(st.final_t),
                    num(st.peak_x),
                    num(st.late_x),
                    num(st.late_fraction()),
                    st.terminal_pass(),
                    num(st.envelope_x),
                    st.checks_pass
                );
            }
            Err(msg) => {
                let status = if msg.contains("diverged") || msg.contains("step budget") {
                    "diverged"
                } else if msg.contains("assumption violated") {
                    "assumption_violated"
                } else {
                    "error"
                };
                let msg = msg.replace('"', "'");
                let _ = writeln!(s, "{},{},,{init},{status},,,,,false,,false,\"{msg}\"", r.index, num(r.beta));
            }
        }
    }
    s
}

pub fn sweep(text: &mut String, cfg: &ScenarioConfig, dir: Option<&Path>) -> Result<(), CliError> {
    let rows = sweep_rows(cfg)?;
    let ok = rows.iter().filter(|r| r.outcome.as_ref().is_ok_and(|s| s.terminal_pass())).count();
    let dir = dir.unwrap_or(&cfg.output.dir);
    let written = write_all(dir, &[(format!("{}_sweep.csv", cfg.name), sweep_csv(&rows))])?;
    let _ = writeln!(text, "{ok} of {} runs reached 1e-2 of their peak state norm by T(1-1e-3)", rows.len());
    for r in &rows {
        match &r.outcome {
            Ok(st) => {
                let _ = writeln!(
                    text,
                    "run {:>3} beta {:>12.4}: late/peak {:.3e}, envelope {:.3e}, checks {}",
                    r.index,
                    r.beta,
                    st.late_fraction(),
                    st.envelope_x,
                    if st.checks_pass { "pass" } else { "FAIL" }
                );
            }
            Err(m) => {
                let _ = writeln!(text, "run {:>3} beta {:>12.4}: {m}", r.index, r.beta);
            }
        }
    }
    for w in written {
        let _ = writeln!(text, "wrote {}", w.display());
    }
    Ok(())
}
