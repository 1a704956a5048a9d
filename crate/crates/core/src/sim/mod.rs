//! Closed-loop simulation on `[0, T(1 − ε_T)]`.

mod integrator;
mod loops;

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use nalgebra::DVector;

pub use integrator::{hermite, integrate, IntegratorConfig, Method, StepStats};
pub use loops::{ClosedLoop, OutputFeedbackLoop, StateFeedbackLoop, TransformedLoop};

use crate::control::{GainOrigin, ObserverLaw, StateFeedbackLaw};
use crate::error::{Error, Result};
use crate::model::{ChainedState, ChainedSystem};

/// One time-stamped record of a closed-loop run.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub t: f64,
    pub x0: f64,
    /// Plant state, or `z` for runs in transformed coordinates.
    pub x: DVector<f64>,
    pub xi: Option<DVector<f64>>,
    pub u0: f64,
    pub u: f64,
    pub gamma: f64,
    /// `γ zᵀP(γ)z` for the plant's transformed state.
    pub v: Option<f64>,
}

impl Sample {
    pub fn is_finite(&self) -> bool {
        self.t.is_finite()
            && self.x0.is_finite()
            && self.x.iter().all(|v| v.is_finite())
            && self.xi.as_ref().is_none_or(|xi| xi.iter().all(|v| v.is_finite()))
            && self.u0.is_finite()
            && self.u.is_finite()
            && self.gamma.is_finite()
            && self.v.is_none_or(f64::is_finite)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LoopKind {
    StateFeedback,
    OutputFeedback,
    Transformed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryMeta {
    pub kind: LoopKind,
    pub n: usize,
    pub horizon: f64,
    pub beta: f64,
    pub gain_origin: GainOrigin,
    pub c0: f64,
    pub uncertainty: String,
    pub scenario_hash: u64,
    pub config: IntegratorConfig,
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    pub meta: TrajectoryMeta,
    /// Solver-native points.
    pub samples: Vec<Sample>,
    /// Uniform resample, when requested in the config.
    pub resampled: Vec<Sample>,
    pub stats: StepStats,
}

impl Trajectory {
    pub fn first(&self) -> &Sample {
        &self.samples[0]
    }

    pub fn last(&self) -> &Sample {
        self.samples.last().expect("trajectories hold at least the initial sample")
    }

    /// The native sample whose time equals `t` up to a relative `1e-12`.
    pub fn sample_at(&self, t: f64) -> Option<&Sample> {
        self.samples.iter().find(|s| (s.t - t).abs() <= 1e-12 * t.abs().max(1.0))
    }

    /// Estimation error `e = z − ξ` at every sample of an output-feedback run.
    pub fn observation_error(&self) -> Result<Vec<(f64, DVector<f64>)>> {
        if self.meta.kind != LoopKind::OutputFeedback {
            return Err(Error::Usage("observation error needs an output-feedback trajectory".into()));
        }
        self.samples
            .iter()
            .map(|s| {
                let z = crate::model::to_transformed(s.t, self.meta.horizon, &s.x)?;
                Ok((s.t, z - s.xi.as_ref().expect("observer state recorded")))
            })
            .collect()
    }

    /// Largest value of `f` over native samples.
    pub fn peak(&self, f: impl Fn(&Sample) -> f64) -> f64 {
        self.samples.iter().map(f).fold(0.0, f64::max)
    }
}

fn scenario_hash(parts: &[String]) -> u64 {
    let mut h = DefaultHasher::new();
    for p in parts {
        p.hash(&mut h);
    }
    h.finish()
}

fn run_loop<L: ClosedLoop>(
    lp: &L,
    y0: DVector<f64>,
    cfg: &IntegratorConfig,
    meta: TrajectoryMeta,
) -> Result<Trajectory> {
    cfg.validate()?;
    let horizon = lp.horizon();
    let mut samples: Vec<Sample> = Vec::new();
    let mut nodes: Vec<(f64, DVector<f64>, DVector<f64>)> = Vec::new();
    let keep_nodes = cfg.resample_dt.is_some();
    let outcome = integrate(
        |t, y| lp.rhs(t, y),
        y0,
        horizon,
        cfg,
        |t, y, dy| {
            let s = lp.sample(t, y)?;
            if !s.is_finite() {
                return Err(Error::Diverged { t, last_good: None });
            }
            if cfg.assert_assumption {
                lp.check_assumption(t, y, s.u)?;
            }
            samples.push(s);
            if keep_nodes {
                nodes.push((t, y.clone(), dy.clone()));
            }
            Ok(())
        },
    );
    let stats = match outcome {
        Ok(stats) => stats,
        Err(Error::Diverged { t, .. }) => {
            return Err(Error::Diverged { t, last_good: samples.pop().map(Box::new) });
        }
        Err(e) => return Err(e),
    };
    let mut resampled = Vec::new();
    if let Some(dt) = cfg.resample_dt {
        let mut k = 0usize;
        let mut seg = 0usize;
        let t_end = nodes.last().map(|n| n.0).unwrap_or(0.0);
        loop {
            let t = k as f64 * dt;
            if t > t_end {
                break;
            }
            while seg + 1 < nodes.len() - 1 && nodes[seg + 1].0 < t {
                seg += 1;
            }
            let y = if nodes.len() == 1 {
                nodes[0].1.clone()
            } else {
                let (a, b) = (&nodes[seg], &nodes[seg + 1]);
                hermite(t, (a.0, &a.1, &a.2), (b.0, &b.1, &b.2))
            };
            resampled.push(lp.sample(t, &y)?);
            k += 1;
        }
    }
    Ok(Trajectory { meta, samples, resampled, stats })
}

fn check_init(sys: &ChainedSystem, init: &ChainedState) -> Result<()> {
    if init.x.len() != sys.n {
        return Err(Error::Domain(format!("initial state has {} entries, expected {}", init.x.len(), sys.n)));
    }
    if !init.is_finite() {
        return Err(Error::Domain("initial state must be finite".into()));
    }
    Ok(())
}

fn meta(
    kind: LoopKind,
    sys: &ChainedSystem,
    horizon: f64,
    beta: f64,
    origin: GainOrigin,
    cfg: &IntegratorConfig,
    extra: &[String],
) -> TrajectoryMeta {
    let mut parts = vec![
        format!("{kind:?}"),
        format!("{}", sys.n),
        format!("{:e}", sys.c0),
        sys.uncertainty.label().to_string(),
        format!("{horizon:e}"),
        format!("{beta:e}"),
        format!("{cfg:?}"),
    ];
    parts.extend_from_slice(extra);
    TrajectoryMeta {
        kind,
        n: sys.n,
        horizon,
        beta,
        gain_origin: origin,
        c0: sys.c0,
        uncertainty: sys.uncertainty.label().to_string(),
        scenario_hash: scenario_hash(&parts),
        config: cfg.clone(),
    }
}

fn fmt_vec(v: &DVector<f64>) -> String {
    v.iter().map(|x| format!("{x:e}")).collect::<Vec<_>>().join(",")
}

/// Plant under state feedback (with the drifted `x₀` channel when `c₀ ≠ 0`).
pub fn simulate_state_feedback(
    sys: &ChainedSystem,
    law: &StateFeedbackLaw,
    init: &ChainedState,
    cfg: &IntegratorConfig,
) -> Result<Trajectory> {
    check_init(sys, init)?;
    let lp = StateFeedbackLoop::new(sys, law)?;
    let y0 = lp.pack(init);
    let m = meta(
        LoopKind::StateFeedback,
        sys,
        law.horizon(),
        law.beta,
        law.origin,
        cfg,
        &[format!("{:e}", init.x0), fmt_vec(&init.x)],
    );
    run_loop(&lp, y0, cfg, m)
}

/// Plant under observer-based output feedback; plant and observer are one coupled state.
pub fn simulate_output_feedback(
    sys: &ChainedSystem,
    law: &ObserverLaw,
    init: &ChainedState,
    xi_init: &DVector<f64>,
    cfg: &IntegratorConfig,
) -> Result<Trajectory> {
    check_init(sys, init)?;
    if xi_init.len() != sys.n || xi_init.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("observer initial state must be finite with n entries".into()));
    }
    let lp = OutputFeedbackLoop::new(sys, law)?;
    let y0 = lp.pack(init, xi_init);
    let m = meta(
        LoopKind::OutputFeedback,
        sys,
        law.horizon(),
        law.beta,
        law.origin,
        cfg,
        &[format!("{:e}", init.x0), fmt_vec(&init.x), fmt_vec(xi_init)],
    );
    run_loop(&lp, y0, cfg, m)
}

/// State-feedback loop integrated directly in `z = Lₙ(1/(T−t)) x`; samples carry `z` in `x`.
pub fn simulate_transformed(
    sys: &ChainedSystem,
    law: &StateFeedbackLaw,
    x0_init: f64,
    z_init: &DVector<f64>,
    cfg: &IntegratorConfig,
) -> Result<Trajectory> {
    check_init(sys, &ChainedState { x0: x0_init, x: z_init.clone() })?;
    let lp = TransformedLoop::new(sys, law)?;
    let mut y0 = DVector::zeros(sys.n + 1);
    y0[0] = x0_init;
    y0.rows_mut(1, sys.n).copy_from(z_init);
    let m = meta(
        LoopKind::Transformed,
        sys,
        law.horizon(),
        law.beta,
        law.origin,
        cfg,
        &[format!("{x0_init:e}"), fmt_vec(z_init)],
    );
    run_loop(&lp, y0, cfg, m)
}

/// Continues a finished run past the guard with `u₀ = u = 0` (observer frozen),
/// using fixed RK4 steps of `h`.
pub fn hold_after_guard(sys: &ChainedSystem, traj: &Trajectory, t_end: f64, h: f64) -> Result<Vec<Sample>> {
    if traj.meta.kind == LoopKind::Transformed {
        return Err(Error::Usage("zero hold is defined in original coordinates only".into()));
    }
    if !(h > 0.0) {
        return Err(Error::Domain("hold step must be positive".into()));
    }
    let last = traj.last().clone();
    let f = |t: f64, s: &ChainedState| sys.dynamics(t, s, 0.0, 0.0);
    let mut t = last.t;
    let mut s = ChainedState { x0: last.x0, x: last.x.clone() };
    let mut out = Vec::new();
    while t < t_end {
        let step = h.min(t_end - t);
        let add = |a: &ChainedState, b: &ChainedState, k: f64| ChainedState { x0: a.x0 + k * b.x0, x: &a.x + &b.x * k };
        let k1 = f(t, &s)?;
        let k2 = f(t + step / 2.0, &add(&s, &k1, step / 2.0))?;
        let k3 = f(t + step / 2.0, &add(&s, &k2, step / 2.0))?;
        let k4 = f(t + step, &add(&s, &k3, step))?;
        s = ChainedState {
            x0: s.x0 + step / 6.0 * (k1.x0 + 2.0 * k2.x0 + 2.0 * k3.x0 + k4.x0),
            x: &s.x + (&k1.x + &k2.x * 2.0 + &k3.x * 2.0 + &k4.x) * (step / 6.0),
        };
        t += step;
        if !s.is_finite() {
            return Err(Error::Diverged { t, last_good: out.pop().map(Box::new) });
        }
        out.push(Sample {
            t,
            x0: s.x0,
            x: s.x.clone(),
            xi: last.xi.clone(),
            u0: 0.0,
            u: 0.0,
            gamma: f64::INFINITY,
            v: None,
        });
    }
    Ok(out)
}
