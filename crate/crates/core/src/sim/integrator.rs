//! Explicit Runge–Kutta integration up to a terminal singularity.
//!
//! Integration runs on `[0, T(1 − ε_T)]` and every step is capped at
//! `η (T − t)`, so the step count grows like `log(1/ε_T)` as the guard
//! tightens while the `1/(T−t)` rates stay resolved.

use nalgebra::DVector;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    /// Classical fourth-order method with step `min(h₀, η(T−t))`.
    Rk4,
    /// Dormand–Prince 5(4) with error control.
    Rk45,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Rk4 => "rk4",
            Method::Rk45 => "rk45",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IntegratorConfig {
    pub method: Method,
    pub h0: f64,
    pub rel_tol: f64,
    pub abs_tol: f64,
    /// `ε_T`: integration stops at `T(1 − ε_T)`.
    pub terminal_guard: f64,
    /// `η`: every step satisfies `h ≤ η(T − t)`.
    pub step_cap_ratio: f64,
    pub max_steps: usize,
    /// Fractions of `T` the integrator lands on exactly.
    pub checkpoint_fractions: Vec<f64>,
    /// Uniform resampling interval for plotting output.
    pub resample_dt: Option<f64>,
    /// Check the uncertainty bound table at every accepted step.
    pub assert_assumption: bool,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        Self {
            method: Method::Rk45,
            h0: 1e-3,
            rel_tol: 1e-8,
            abs_tol: 1e-10,
            terminal_guard: 1e-6,
            step_cap_ratio: 0.1,
            max_steps: 5_000_000,
            checkpoint_fractions: Vec::new(),
            resample_dt: Some(1e-3),
            assert_assumption: true,
        }
    }
}

impl IntegratorConfig {
    pub fn rk4(h0: f64) -> Self {
        Self { method: Method::Rk4, h0, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(1e-9..=1e-2).contains(&self.terminal_guard) {
            return bad(format!("terminal guard {} outside [1e-9, 1e-2]", self.terminal_guard));
        }
        if !(self.step_cap_ratio > 0.0 && self.step_cap_ratio <= 0.5) {
            return bad(format!("step cap ratio {} outside (0, 0.5]", self.step_cap_ratio));
        }
        if !(self.rel_tol > 0.0) || !(self.abs_tol > 0.0) {
            return bad("tolerances must be positive".into());
        }
        if !(self.h0 > 0.0) || !self.h0.is_finite() {
            return bad("initial step must be positive".into());
        }
        if self.max_steps == 0 {
            return bad("max_steps must be positive".into());
        }
        if let Some(dt) = self.resample_dt {
            if !(dt > 0.0) || !dt.is_finite() {
                return bad("resample interval must be positive".into());
            }
        }
        if self.checkpoint_fractions.iter().any(|f| !(*f > 0.0 && *f < 1.0)) {
            return bad("checkpoint fractions must lie in (0, 1)".into());
        }
        Ok(())
    }

    pub fn stop_time(&self, horizon: f64) -> f64 {
        horizon * (1.0 - self.terminal_guard)
    }
}

/// Step accounting for one run.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StepStats {
    pub accepted: usize,
    pub rejected: usize,
    pub rhs_evals: usize,
    /// Largest `h / (η(T − t))` over accepted steps; never above 1.
    pub max_cap_usage: f64,
    pub final_time: f64,
}

const DP_C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const DP_A: [[f64; 6]; 7] = [
    [0.0; 6],
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
// Difference between the fifth- and fourth-order weights.
const DP_E: [f64; 7] =
    [71.0 / 57600.0, 0.0, -71.0 / 16695.0, 71.0 / 1920.0, -17253.0 / 339200.0, 22.0 / 525.0, -1.0 / 40.0];

fn all_finite(v: &DVector<f64>) -> bool {
    v.iter().all(|x| x.is_finite())
}

/// Integrates `ẏ = f(t, y)` from `t = 0` to `T(1 − ε_T)`.
///
/// `on_accept(t, y, ẏ)` is called for the initial point and every accepted
/// step. A non-finite state aborts with [`Error::Diverged`]; the caller owns
/// the last good sample.
pub fn integrate<F, G>(
    mut rhs: F,
    y0: DVector<f64>,
    horizon: f64,
    cfg: &IntegratorConfig,
    mut on_accept: G,
) -> Result<StepStats>
where
    F: FnMut(f64, &DVector<f64>) -> Result<DVector<f64>>,
    G: FnMut(f64, &DVector<f64>, &DVector<f64>) -> Result<()>,
{
    cfg.validate()?;
    if !(horizon > 0.0) || !horizon.is_finite() {
        return Err(Error::Domain(format!("horizon must be positive, got {horizon}")));
    }
    if !all_finite(&y0) {
        return Err(Error::Diverged { t: 0.0, last_good: None });
    }
    let t_stop = cfg.stop_time(horizon);
    let mut marks: Vec<f64> = cfg.checkpoint_fractions.iter().map(|f| f * horizon).filter(|t| *t < t_stop).collect();
    marks.sort_by(f64::total_cmp);
    marks.push(t_stop);
    let mut next_mark = 0;

    let mut stats = StepStats::default();
    let mut t = 0.0;
    let mut y = y0;
    let mut dy = rhs(t, &y)?;
    stats.rhs_evals += 1;
    on_accept(t, &y, &dy)?;
    let mut h = cfg.h0;

    while t < t_stop {
        if stats.accepted + stats.rejected >= cfg.max_steps {
            return Err(Error::StepBudget { steps: cfg.max_steps, t });
        }
        let cap = cfg.step_cap_ratio * (horizon - t);
        let to_mark = marks[next_mark] - t;
        let mut step = h.min(cap);
        let mut hits_mark = false;
        if step >= to_mark {
            step = to_mark;
            hits_mark = true;
        } else if step > 0.5 * to_mark && cfg.method == Method::Rk45 {
            // Avoid a sliver step right before the mark.
            step = 0.5 * to_mark;
        }

        match cfg.method {
            Method::Rk4 => {
                let k1 = &dy;
                let k2 = rhs(t + 0.5 * step, &(&y + k1 * (0.5 * step)))?;
                let k3 = rhs(t + 0.5 * step, &(&y + &k2 * (0.5 * step)))?;
                let k4 = rhs(t + step, &(&y + &k3 * step))?;
                let y_new = &y + (k1 + &k2 * 2.0 + &k3 * 2.0 + &k4) * (step / 6.0);
                stats.rhs_evals += 3;
                if !all_finite(&y_new) {
                    return Err(Error::Diverged { t: t + step, last_good: None });
                }
                let t_new = if hits_mark { marks[next_mark] } else { t + step };
                let dy_new = rhs(t_new, &y_new)?;
                stats.rhs_evals += 1;
                stats.max_cap_usage = stats.max_cap_usage.max(step / cap);
                stats.accepted += 1;
                t = t_new;
                y = y_new;
                dy = dy_new;
                on_accept(t, &y, &dy)?;
            }
            Method::Rk45 => {
                let mut k: Vec<DVector<f64>> = Vec::with_capacity(7);
                k.push(dy.clone());
                let mut trial_ok = true;
                for s in 1..7 {
                    let mut yi = y.clone();
                    for (j, kj) in k.iter().enumerate() {
                        let a = DP_A[s][j];
                        if a != 0.0 {
                            yi.axpy(step * a, kj, 1.0);
                        }
                    }
                    if !all_finite(&yi) {
                        trial_ok = false;
                        break;
                    }
                    let ts = if s == 6 && hits_mark { marks[next_mark] } else { t + DP_C[s] * step };
                    k.push(rhs(ts, &yi)?);
                    stats.rhs_evals += 1;
                }
                // Stage 7 sits at the new point with the fifth-order weights (FSAL).
                let err_norm = if trial_ok {
                    let y_new = {
                        let mut yn = y.clone();
                        for (j, kj) in k.iter().take(6).enumerate() {
                            let a = DP_A[6][j];
                            if a != 0.0 {
                                yn.axpy(step * a, kj, 1.0);
                            }
                        }
                        yn
                    };
                    let mut acc = 0.0;
                    for i in 0..y.len() {
                        let e: f64 = (0..7).map(|s| DP_E[s] * k[s][i]).sum::<f64>() * step;
                        let sc = cfg.abs_tol + cfg.rel_tol * y[i].abs().max(y_new[i].abs());
                        acc += (e / sc).powi(2);
                    }
                    let norm = (acc / y.len() as f64).sqrt();
                    if norm.is_finite() && norm <= 1.0 && all_finite(&y_new) {
                        stats.max_cap_usage = stats.max_cap_usage.max(step / cap);
                        stats.accepted += 1;
                        t = if hits_mark { marks[next_mark] } else { t + step };
                        y = y_new;
                        dy = k.pop().expect("seven stages");
                        on_accept(t, &y, &dy)?;
                        let grow = if norm == 0.0 { 5.0 } else { (0.9 * norm.powf(-0.2)).clamp(0.2, 5.0) };
                        h = step * grow;
                        if hits_mark && next_mark + 1 < marks.len() {
                            next_mark += 1;
                        }
                        continue;
                    }
                    norm
                } else {
                    f64::INFINITY
                };
                stats.rejected += 1;
                h = if err_norm.is_finite() { step * (0.9 * err_norm.powf(-0.2)).clamp(0.2, 1.0) } else { step * 0.25 };
                if h < 1e-15 * horizon.max(1.0) {
                    return Err(Error::Diverged { t, last_good: None });
                }
                continue;
            }
        }
        if hits_mark && next_mark + 1 < marks.len() {
            next_mark += 1;
        }
    }
    stats.final_time = t;
    Ok(stats)
}

/// Cubic Hermite interpolation between two nodes with derivatives.
pub fn hermite(
    t: f64,
    (t0, y0, d0): (f64, &DVector<f64>, &DVector<f64>),
    (t1, y1, d1): (f64, &DVector<f64>, &DVector<f64>),
) -> DVector<f64> {
    let h = t1 - t0;
    if h == 0.0 {
        return y0.clone();
    }
    let s = (t - t0) / h;
    let h00 = 2.0 * s.powi(3) - 3.0 * s * s + 1.0;
    let h10 = s.powi(3) - 2.0 * s * s + s;
    let h01 = -2.0 * s.powi(3) + 3.0 * s * s;
    let h11 = s.powi(3) - s * s;
    y0 * h00 + d0 * (h10 * h) + y1 * h01 + d1 * (h11 * h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn run(cfg: &IntegratorConfig, horizon: f64) -> (StepStats, Vec<(f64, f64)>) {
        let mut pts = Vec::new();
        // ẏ = −3y/(T−t) has y = (1 − t/T)³.
        let stats = integrate(
            |t, y| Ok(y * (-3.0 / (horizon - t))),
            DVector::from_vec(vec![1.0]),
            horizon,
            cfg,
            |t, y, _| {
                pts.push((t, y[0]));
                Ok(())
            },
        )
        .unwrap();
        (stats, pts)
    }

    #[test]
    fn rk45_tracks_singular_linear_decay() {
        let cfg = IntegratorConfig { abs_tol: 1e-14, ..IntegratorConfig::default() };
        let (stats, pts) = run(&cfg, 2.0);
        assert!(stats.max_cap_usage <= 1.0 + 1e-12);
        assert_relative_eq!(stats.final_time, 2.0 * (1.0 - 1e-6), max_relative = 1e-15);
        for (t, y) in pts {
            let exact = (1.0 - t / 2.0).powi(3);
            assert!((y - exact).abs() <= 1e-7 * exact + 1e-14, "t = {t}: {y} vs {exact}");
        }
    }

    #[test]
    fn rk4_respects_cap_and_lands_on_guard() {
        let cfg = IntegratorConfig::rk4(1e-3);
        let (stats, pts) = run(&cfg, 1.0);
        assert!(stats.max_cap_usage <= 1.0 + 1e-12);
        assert_eq!(pts.last().unwrap().0, 1.0 - 1e-6);
        assert!(pts.windows(2).all(|w| w[1].0 > w[0].0));
    }

    #[test]
    fn step_count_grows_logarithmically_in_guard() {
        let counts: Vec<usize> = [1e-3, 1e-6, 1e-9]
            .iter()
            .map(|g| run(&IntegratorConfig { terminal_guard: *g, ..IntegratorConfig::default() }, 1.0).0.accepted)
            .collect();
        let first = counts[1] - counts[0];
        let second = counts[2] - counts[1];
        assert!(second as f64 <= 2.0 * first as f64 && first as f64 <= 2.0 * second as f64, "{counts:?}");
        assert!(counts[2] < 2000, "{counts:?}");
    }

    #[test]
    fn checkpoints_are_hit_exactly() {
        let cfg = IntegratorConfig { checkpoint_fractions: vec![0.5, 0.999], ..IntegratorConfig::default() };
        let (_, pts) = run(&cfg, 2.0);
        assert!(pts.iter().any(|(t, _)| *t == 1.0));
        assert!(pts.iter().any(|(t, _)| *t == 0.999 * 2.0));
    }

    #[test]
    fn blow_up_is_reported() {
        let cfg = IntegratorConfig::rk4(0.1);
        let r =
            integrate(|_, y| Ok(y.map(|v| v * v * 1e200)), DVector::from_vec(vec![1e200]), 1.0, &cfg, |_, _, _| Ok(()));
        assert!(matches!(r, Err(Error::Diverged { .. })));
    }

    #[test]
    fn config_validation() {
        assert!(IntegratorConfig::default().validate().is_ok());
        assert!(IntegratorConfig { terminal_guard: 0.1, ..Default::default() }.validate().is_err());
        assert!(IntegratorConfig { step_cap_ratio: 0.6, ..Default::default() }.validate().is_err());
        assert!(IntegratorConfig { rel_tol: 0.0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn hermite_reproduces_cubic() {
        let f = |t: f64| t.powi(3) - 2.0 * t;
        let df = |t: f64| 3.0 * t * t - 2.0;
        let v = |x: f64| DVector::from_vec(vec![x]);
        let (a, b) = (0.5, 1.5);
        let y = hermite(1.1, (a, &v(f(a)), &v(df(a))), (b, &v(f(b)), &v(df(b))));
        assert_relative_eq!(y[0], f(1.1), max_relative = 1e-13);
    }
}
