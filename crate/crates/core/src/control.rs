//! Smooth time-varying feedback laws.
//!
//! State feedback (optionally with a known drift `c₀` in the `x₀` channel):
//!
//! ```text
//! u₀ = −3/(T−t) x₀ − β/2 e^{c₀t} (T−t)
//! u  = −β e^{c₀t} bᵀP(γ(t)) Lₙ(γ(t)) x,      γ(t) = 1/(T−t)
//! ```
//!
//! Observer-based output feedback from `y = [x₀, x₁]`:
//!
//! ```text
//! ξ̇ = βAξ + bu + βQ(γ)cᵀ(γ^{n−1} y₂ − cξ)
//! u = −β bᵀP(γ) ξ
//! ```

use std::sync::Arc;

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::model::to_transformed;
use crate::ple::{GainSchedule, PleBasis};

/// `((2n + δ_c)/n + 2dΛ) e^{|c₀|T}`.
pub fn beta_state_feedback(n: usize, delta_c: f64, d: f64, lambda: f64, c0: f64, horizon: f64) -> f64 {
    let n = n as f64;
    ((2.0 * n + delta_c) / n + 2.0 * d * lambda) * (c0.abs() * horizon).exp()
}

/// The two candidates whose maximum is the output-feedback gain.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OutputGainCandidates {
    pub beta1: f64,
    pub beta2: f64,
}

impl OutputGainCandidates {
    pub fn new(n: usize, delta_c: f64, d: f64, lambda: f64, k3: f64) -> Self {
        let nf = n as f64;
        let s2 = 2f64.sqrt();
        Self {
            beta1: 8.0 * s2 * nf * d * lambda * k3 + 2.0 * (2.0 + delta_c / nf),
            beta2: 4.0 * s2 * d * lambda + 2.0 * (2.0 * nf + 2.0 - 1.0 / nf),
        }
    }

    pub fn max(&self) -> f64 {
        self.beta1.max(self.beta2)
    }
}

pub fn beta_output_feedback(n: usize, delta_c: f64, d: f64, lambda: f64, k3: f64) -> f64 {
    OutputGainCandidates::new(n, delta_c, d, lambda, k3).max()
}

fn remaining(t: f64, horizon: f64) -> Result<f64> {
    if !(t >= 0.0) || t >= horizon {
        return Err(Error::Domain(format!("time {t} outside [0, {horizon})")));
    }
    Ok(horizon - t)
}

/// `u₀ = −3/(T−t) x₀ − β/2 e^{c₀t} (T−t)`.
pub fn u0_feedback(t: f64, x0: f64, beta: f64, horizon: f64, c0: f64) -> Result<f64> {
    let rem = remaining(t, horizon)?;
    Ok(-3.0 / rem * x0 - 0.5 * beta * (c0 * t).exp() * rem)
}

/// Closed-loop `x₀(t) = (T−t)² ((T−t) x₀(0)/T³ − βt/(2T)) e^{c₀t}`, continuous up to `t = T`.
pub fn closed_form_x0(t: f64, x0_init: f64, beta: f64, horizon: f64, c0: f64) -> f64 {
    let rem = horizon - t;
    rem * rem * (rem * x0_init / horizon.powi(3) - beta * t / (2.0 * horizon)) * (c0 * t).exp()
}

/// `θ(t) = −3 (T−t) (x₀(0)/T³ + β/(2T)) e^{c₀t}`.
pub fn open_loop_theta(t: f64, x0_init: f64, beta: f64, horizon: f64, c0: f64) -> f64 {
    -3.0 * (horizon - t) * (x0_init / horizon.powi(3) + beta / (2.0 * horizon)) * (c0 * t).exp()
}

/// Open-loop form of the closed-loop `u₀`: `(T−t)(θ(t) + β e^{c₀t})`.
pub fn open_loop_u0(t: f64, x0_init: f64, beta: f64, horizon: f64, c0: f64) -> f64 {
    (horizon - t) * (open_loop_theta(t, x0_init, beta, horizon, c0) + beta * (c0 * t).exp())
}

/// Envelope on `|x₀(t)|`: `(T−t)² e^{c₀t} ((T−t)|x₀(0)|/T³ + βt/(2T))`.
pub fn x0_envelope(t: f64, x0_init: f64, beta: f64, horizon: f64, c0: f64) -> f64 {
    let rem = horizon - t;
    rem * rem * (c0 * t).exp() * (rem * x0_init.abs() / horizon.powi(3) + beta * t / (2.0 * horizon))
}

/// Envelope on `|u₀(t)|`: `(T−t) e^{c₀t} (3(T−t)(|x₀(0)|/T³ + β/(2T)) + β)`.
pub fn u0_envelope(t: f64, x0_init: f64, beta: f64, horizon: f64, c0: f64) -> f64 {
    let rem = horizon - t;
    rem * (c0 * t).exp() * (3.0 * rem * (x0_init.abs() / horizon.powi(3) + beta / (2.0 * horizon)) + beta)
}

/// Where a law's gain came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GainOrigin {
    Formula,
    Override,
    /// Explicitly requested below the formula value; the guarantees do not apply.
    BelowFormula,
}

/// State feedback for the plant with drift `c₀` (`c₀ = 0` is the plain chain).
#[derive(Debug, Clone)]
pub struct StateFeedbackLaw {
    pub schedule: GainSchedule,
    pub basis: Arc<PleBasis>,
    pub beta: f64,
    pub beta_min: f64,
    pub c0: f64,
    pub origin: GainOrigin,
}

impl StateFeedbackLaw {
    /// Law with `β` at the formula value for uncertainty constant `d`.
    pub fn new(basis: Arc<PleBasis>, horizon: f64, d: f64, c0: f64) -> Result<Self> {
        let schedule = GainSchedule::new(horizon)?;
        if !d.is_finite() || d < 0.0 || !c0.is_finite() {
            return Err(Error::Domain("d must be finite and nonnegative, c0 finite".into()));
        }
        let beta_min = beta_state_feedback(basis.n, basis.delta_c, d, basis.lambda, c0, horizon);
        Ok(Self { schedule, basis, beta: beta_min, beta_min, c0, origin: GainOrigin::Formula })
    }

    /// Raises the gain; values below the formula are rejected.
    pub fn with_beta(mut self, beta: f64) -> Result<Self> {
        if !(beta >= self.beta_min) || !beta.is_finite() {
            return Err(Error::GainBelowFormula { beta, minimum: self.beta_min });
        }
        self.origin = if beta == self.beta_min { GainOrigin::Formula } else { GainOrigin::Override };
        self.beta = beta;
        Ok(self)
    }

    /// Sets any positive gain, marking it when it falls below the formula.
    pub fn with_beta_unchecked(mut self, beta: f64) -> Result<Self> {
        if !(beta > 0.0) || !beta.is_finite() {
            return Err(Error::Domain(format!("gain must be positive, got {beta}")));
        }
        self.origin = if beta < self.beta_min {
            GainOrigin::BelowFormula
        } else if beta == self.beta_min {
            GainOrigin::Formula
        } else {
            GainOrigin::Override
        };
        self.beta = beta;
        Ok(self)
    }

    pub fn horizon(&self) -> f64 {
        self.schedule.horizon()
    }

    pub fn u0(&self, t: f64, x0: f64) -> Result<f64> {
        u0_feedback(t, x0, self.beta, self.horizon(), self.c0)
    }

    /// `u = −β e^{c₀t} bᵀP(γ) z` with `z = Lₙ(γ) x`.
    pub fn u(&self, t: f64, x: &DVector<f64>) -> Result<f64> {
        let z = to_transformed(t, self.horizon(), x)?;
        self.u_transformed(t, &z)
    }

    /// The same control expressed in transformed coordinates.
    pub fn u_transformed(&self, t: f64, z: &DVector<f64>) -> Result<f64> {
        let gamma = self.schedule.gamma(t)?;
        let row = self.basis.feedback_gain_row(gamma)?;
        let u = -self.beta * (self.c0 * t).exp() * row.dot(&z.transpose());
        if !u.is_finite() {
            return Err(Error::Singularity { t, gamma });
        }
        Ok(u)
    }

    pub fn theta0(&self, x0_init: f64) -> f64 {
        crate::model::DerivedBounds::theta0(self.basis.n, self.horizon(), x0_init, self.beta)
    }
}

/// Observer-based output feedback; `u₀` is the state-feedback `x₀` law with `c₀ = 0`.
#[derive(Debug, Clone)]
pub struct ObserverLaw {
    pub schedule: GainSchedule,
    pub basis: Arc<PleBasis>,
    pub beta: f64,
    pub candidates: OutputGainCandidates,
    pub origin: GainOrigin,
}

impl ObserverLaw {
    pub fn new(basis: Arc<PleBasis>, horizon: f64, d: f64) -> Result<Self> {
        let schedule = GainSchedule::new(horizon)?;
        if !d.is_finite() || d < 0.0 {
            return Err(Error::Domain("d must be finite and nonnegative".into()));
        }
        let candidates = OutputGainCandidates::new(basis.n, basis.delta_c, d, basis.lambda, basis.k3);
        Ok(Self { schedule, basis, beta: candidates.max(), candidates, origin: GainOrigin::Formula })
    }

    pub fn beta_min(&self) -> f64 {
        self.candidates.max()
    }

    pub fn with_beta(mut self, beta: f64) -> Result<Self> {
        if !(beta >= self.beta_min()) || !beta.is_finite() {
            return Err(Error::GainBelowFormula { beta, minimum: self.beta_min() });
        }
        self.origin = if beta == self.beta_min() { GainOrigin::Formula } else { GainOrigin::Override };
        self.beta = beta;
        Ok(self)
    }

    pub fn with_beta_unchecked(mut self, beta: f64) -> Result<Self> {
        if !(beta > 0.0) || !beta.is_finite() {
            return Err(Error::Domain(format!("gain must be positive, got {beta}")));
        }
        self.origin = if beta < self.beta_min() {
            GainOrigin::BelowFormula
        } else if beta == self.beta_min() {
            GainOrigin::Formula
        } else {
            GainOrigin::Override
        };
        self.beta = beta;
        Ok(self)
    }

    pub fn horizon(&self) -> f64 {
        self.schedule.horizon()
    }

    pub fn u0(&self, t: f64, x0: f64) -> Result<f64> {
        u0_feedback(t, x0, self.beta, self.horizon(), 0.0)
    }

    /// `ξ̇ = βAξ + bu + βQ(γ)cᵀ(γ^{n−1}y₂ − cξ)`; `γ^{n−1}y₂` is the transformed `z₁`.
    pub fn observer_derivative(&self, t: f64, xi: &DVector<f64>, u: f64, y: [f64; 2]) -> Result<DVector<f64>> {
        let n = self.basis.n;
        if xi.len() != n {
            return Err(Error::Domain(format!("observer state has {} entries, expected {n}", xi.len())));
        }
        let gamma = self.schedule.gamma(t)?;
        let gain = self.basis.observer_gain_col(gamma)?;
        let innovation = gamma.powi(n as i32 - 1) * y[1] - xi[0];
        let mut d = DVector::zeros(n);
        for i in 0..n - 1 {
            d[i] = self.beta * xi[i + 1];
        }
        d[n - 1] += u;
        d += gain * (self.beta * innovation);
        if d.iter().any(|v| !v.is_finite()) {
            return Err(Error::Singularity { t, gamma });
        }
        Ok(d)
    }

    /// `u = −β bᵀP(γ) ξ`.
    pub fn u(&self, t: f64, xi: &DVector<f64>) -> Result<f64> {
        let gamma = self.schedule.gamma(t)?;
        let row = self.basis.feedback_gain_row(gamma)?;
        let u = -self.beta * row.dot(&xi.transpose());
        if !u.is_finite() {
            return Err(Error::Singularity { t, gamma });
        }
        Ok(u)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn basis2() -> Arc<PleBasis> {
        Arc::new(PleBasis::new(2).unwrap())
    }

    #[test]
    fn state_gain_n2_composes_verified_factors() {
        let b = basis2();
        let lambda = (3.0 + 5f64.sqrt()) / 2.0;
        let delta_c = 2.0 * (2.0 + 2f64.sqrt());
        let expected = (4.0 + delta_c) / 2.0 + 2.0 * lambda;
        let beta = beta_state_feedback(2, b.delta_c, 1.0, b.lambda, 0.0, 1.0);
        assert_relative_eq!(beta, expected, max_relative = 1e-12);
        assert_relative_eq!(beta, 10.650281539872886, max_relative = 1e-12);
    }

    #[test]
    fn state_gain_limits_and_linearity() {
        let b = basis2();
        let base = beta_state_feedback(2, b.delta_c, 1.0, b.lambda, 0.0, 1.0);
        let tiny_t = beta_state_feedback(2, b.delta_c, 1.0, b.lambda, 3.0, 1e-12);
        assert_relative_eq!(base, tiny_t, max_relative = 1e-10);
        let doubled = beta_state_feedback(2, b.delta_c, 2.0, b.lambda, 0.0, 1.0);
        assert_relative_eq!(doubled - base, 2.0 * b.lambda, max_relative = 1e-12);
        let drifted = beta_state_feedback(2, b.delta_c, 1.0, b.lambda, -0.3, 2.0);
        assert_relative_eq!(drifted, base * 0.6f64.exp(), max_relative = 1e-12);
    }

    #[test]
    fn output_gain_examples() {
        let b = basis2();
        let zero_d = beta_output_feedback(2, b.delta_c, 0.0, b.lambda, b.k3);
        let expected = (2.0 * (2.0 + b.delta_c / 2.0)).max(2.0 * (4.0 + 2.0 - 0.5));
        assert_relative_eq!(zero_d, expected, max_relative = 1e-14);

        // Oracle: k₃ from the explicit product [2, 1] P₂ [2, 1]ᵀ = 10.
        let k3 = 10.0;
        let lambda = (3.0 + 5f64.sqrt()) / 2.0;
        let s2 = 2f64.sqrt();
        let b1 = 8.0 * s2 * 2.0 * lambda * k3 + 2.0 * (2.0 + b.delta_c / 2.0);
        let b2 = 4.0 * s2 * lambda + 2.0 * (4.0 + 2.0 - 0.5);
        let c = OutputGainCandidates::new(2, b.delta_c, 1.0, b.lambda, b.k3);
        assert_relative_eq!(c.beta1, b1, max_relative = 1e-12);
        assert_relative_eq!(c.beta2, b2, max_relative = 1e-12);
        assert_relative_eq!(c.max(), b1, max_relative = 1e-12);

        let c_more = OutputGainCandidates::new(2, b.delta_c, 1.5, b.lambda, b.k3);
        assert!(c_more.beta1 > c.beta1 && c_more.beta2 > c.beta2);
    }

    #[test]
    fn u0_examples() {
        let (t_h, beta) = (2.5, 100.0);
        assert_relative_eq!(u0_feedback(0.0, 0.0, beta, t_h, 0.0).unwrap(), -beta * t_h / 2.0);
        // x₀(1) = 2.25 · (−20) = −45, then −3/1.5 · (−45) − 50 · 1.5 = 15.
        let x0 = closed_form_x0(1.0, 0.0, beta, t_h, 0.0);
        assert_relative_eq!(x0, -45.0, max_relative = 1e-14);
        assert_relative_eq!(u0_feedback(1.0, x0, beta, t_h, 0.0).unwrap(), 15.0, max_relative = 1e-13);
        assert_relative_eq!(open_loop_u0(1.0, 0.0, beta, t_h, 0.0), 15.0, max_relative = 1e-13);
        assert!(u0_feedback(t_h, 0.0, beta, t_h, 0.0).is_err());
    }

    #[test]
    fn closed_form_x0_endpoints() {
        for c0 in [0.0, 0.4, -1.2] {
            assert_relative_eq!(closed_form_x0(0.0, 1.7, 9.0, 2.0, c0), 1.7, max_relative = 1e-15);
            assert_eq!(closed_form_x0(2.0, 1.7, 9.0, 2.0, c0), 0.0);
            assert_eq!(open_loop_u0(2.0, 1.7, 9.0, 2.0, c0), 0.0);
        }
    }

    /// Oracle for the closed form: fine fixed-step RK4 on ẋ₀ = −3x₀/(T−t) + c₀x₀ − β/2 e^{c₀t}(T−t).
    #[test]
    fn closed_form_x0_matches_quadrature() {
        for &(x0i, beta, t_h, c0) in &[(0.0, 100.0, 2.5, 0.0), (1.0, 7.0, 1.0, 0.3), (-3.0, 12.0, 2.0, -0.5)] {
            let f = |t: f64, x: f64| -3.0 * x / (t_h - t) + c0 * x - 0.5 * beta * (c0 * t).exp() * (t_h - t);
            let (mut t, mut x) = (0.0, x0i);
            let h = 1e-4;
            let t_end = 0.5 * t_h;
            while t < t_end - 1e-12 {
                let k1 = f(t, x);
                let k2 = f(t + h / 2.0, x + h / 2.0 * k1);
                let k3 = f(t + h / 2.0, x + h / 2.0 * k2);
                let k4 = f(t + h, x + h * k3);
                x += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
                t += h;
            }
            let exact = closed_form_x0(t, x0i, beta, t_h, c0);
            assert_relative_eq!(x, exact, max_relative = 1e-9, epsilon = 1e-12);
        }
    }

    #[test]
    fn feedback_and_open_loop_u0_agree_on_dense_grid() {
        for &(x0i, beta, t_h, c0) in &[(0.0, 100.0, 2.5, 0.0), (2.0, 11.0, 1.0, 0.0), (-1.0, 30.0, 3.0, 0.7)] {
            for k in 0..1000 {
                let t = t_h * k as f64 / 1000.0;
                let x0 = closed_form_x0(t, x0i, beta, t_h, c0);
                let fb = u0_feedback(t, x0, beta, t_h, c0).unwrap();
                let ol = open_loop_u0(t, x0i, beta, t_h, c0);
                assert_relative_eq!(fb, ol, max_relative = 1e-12, epsilon = 1e-12);
                assert!(ol.abs() <= u0_envelope(t, x0i, beta, t_h, c0) * (1.0 + 1e-12));
                assert!(x0.abs() <= x0_envelope(t, x0i, beta, t_h, c0) * (1.0 + 1e-12) + 1e-300);
            }
        }
    }

    #[test]
    fn state_feedback_u_examples() {
        let law = StateFeedbackLaw::new(basis2(), 1.0, 1.0, 0.0).unwrap().with_beta_unchecked(1.0).unwrap();
        assert_eq!(law.origin, GainOrigin::BelowFormula);
        assert_eq!(law.u(0.0, &DVector::zeros(2)).unwrap(), 0.0);
        assert_eq!(law.u(0.0, &DVector::from_vec(vec![1.0, 0.0])).unwrap(), -1.0);
        // u = −β e^{c₀t} · row(γ) · z
        let law = StateFeedbackLaw::new(basis2(), 2.0, 0.5, 0.2).unwrap();
        let x = DVector::from_vec(vec![0.4, -1.1]);
        let t = 0.7;
        let z = to_transformed(t, 2.0, &x).unwrap();
        let row = law.basis.feedback_gain_row(1.0 / 1.3).unwrap();
        let expected = -law.beta * (0.2 * t).exp() * row.dot(&z.transpose());
        assert_relative_eq!(law.u(t, &x).unwrap(), expected, max_relative = 1e-14);
        assert!(law.u(2.0, &x).is_err());
    }

    #[test]
    fn gain_admissibility() {
        let law = StateFeedbackLaw::new(basis2(), 1.0, 1.0, 0.0).unwrap();
        assert_eq!(law.beta, law.beta_min);
        assert_eq!(law.origin, GainOrigin::Formula);
        assert!(matches!(law.clone().with_beta(law.beta_min * 0.99), Err(Error::GainBelowFormula { .. })));
        let up = law.clone().with_beta(100.0).unwrap();
        assert_eq!(up.origin, GainOrigin::Override);
        let obs = ObserverLaw::new(basis2(), 1.0, 1.0).unwrap();
        assert!(obs.clone().with_beta(obs.beta_min() - 1.0).is_err());
        assert!(obs.clone().with_beta(obs.beta_min() + 1.0).is_ok());
    }

    #[test]
    fn observer_derivative_examples() {
        let law = ObserverLaw::new(basis2(), 1.0, 1.0).unwrap().with_beta_unchecked(1.0).unwrap();
        let z = DVector::zeros(2);
        assert_eq!(law.observer_derivative(0.0, &z, 0.0, [0.0, 0.0]).unwrap(), z);
        let d = law.observer_derivative(0.0, &DVector::from_vec(vec![1.0, 0.0]), 0.0, [0.0, 0.0]).unwrap();
        assert_eq!(d, DVector::from_vec(vec![-2.0, -1.0]));

        // Perfect estimate: the innovation vanishes and ξ̇ = βAz + bu.
        let law = ObserverLaw::new(basis2(), 2.0, 1.0).unwrap();
        let t = 0.6;
        let x = DVector::from_vec(vec![0.3, -0.8]);
        let zt = to_transformed(t, 2.0, &x).unwrap();
        let d = law.observer_derivative(t, &zt, 0.25, [9.0, x[0]]).unwrap();
        assert_relative_eq!(d[0], law.beta * zt[1], max_relative = 1e-13);
        assert_relative_eq!(d[1], 0.25, max_relative = 1e-12);
    }

    #[test]
    fn output_feedback_u_examples() {
        let law = ObserverLaw::new(basis2(), 1.0, 1.0).unwrap().with_beta_unchecked(1.0).unwrap();
        assert_eq!(law.u(0.0, &DVector::zeros(2)).unwrap(), 0.0);
        assert_eq!(law.u(0.0, &DVector::from_vec(vec![1.0, 1.0])).unwrap(), -3.0);
    }
}
