use nalgebra::DVector;

use super::Sample;
use crate::control::{ObserverLaw, StateFeedbackLaw};
use crate::error::{Error, Result};
use crate::model::{from_transformed, psi, to_transformed, ChainedState, ChainedSystem};

/// A closed loop packed into one flat state vector.
pub trait ClosedLoop {
    fn dim(&self) -> usize;
    fn horizon(&self) -> f64;
    fn rhs(&self, t: f64, y: &DVector<f64>) -> Result<DVector<f64>>;
    fn sample(&self, t: f64, y: &DVector<f64>) -> Result<Sample>;
    /// Runtime check of the uncertainty bound at an accepted point.
    fn check_assumption(&self, t: f64, y: &DVector<f64>, u: f64) -> Result<()>;
}

fn assumption_tol(x: &DVector<f64>) -> f64 {
    1e-12 * (1.0 + x.amax())
}

fn split_plant(y: &DVector<f64>, n: usize) -> ChainedState {
    ChainedState { x0: y[0], x: y.rows(1, n).into_owned() }
}

/// `y = [x₀, x]`.
pub struct StateFeedbackLoop<'a> {
    sys: &'a ChainedSystem,
    law: &'a StateFeedbackLaw,
}

impl<'a> StateFeedbackLoop<'a> {
    pub fn new(sys: &'a ChainedSystem, law: &'a StateFeedbackLaw) -> Result<Self> {
        if law.basis.n != sys.n {
            return Err(Error::Usage(format!("law built for n = {} used on n = {}", law.basis.n, sys.n)));
        }
        if law.c0 != sys.c0 {
            return Err(Error::Usage("law drift coefficient differs from the plant's".into()));
        }
        Ok(Self { sys, law })
    }

    pub fn pack(&self, s: &ChainedState) -> DVector<f64> {
        let mut y = DVector::zeros(self.sys.n + 1);
        y[0] = s.x0;
        y.rows_mut(1, self.sys.n).copy_from(&s.x);
        y
    }

    fn controls(&self, t: f64, s: &ChainedState) -> Result<(f64, f64)> {
        Ok((self.law.u0(t, s.x0)?, self.law.u(t, &s.x)?))
    }
}

impl ClosedLoop for StateFeedbackLoop<'_> {
    fn dim(&self) -> usize {
        self.sys.n + 1
    }

    fn horizon(&self) -> f64 {
        self.law.horizon()
    }

    fn rhs(&self, t: f64, y: &DVector<f64>) -> Result<DVector<f64>> {
        let s = split_plant(y, self.sys.n);
        let (u0, u) = self.controls(t, &s)?;
        let d = self.sys.dynamics(t, &s, u0, u)?;
        Ok(self.pack(&d))
    }

    fn sample(&self, t: f64, y: &DVector<f64>) -> Result<Sample> {
        let s = split_plant(y, self.sys.n);
        let (u0, u) = self.controls(t, &s)?;
        let gamma = self.law.schedule.gamma(t)?;
        let z = to_transformed(t, self.horizon(), &s.x)?;
        let v = self.law.basis.lyapunov_value(gamma, &z)?;
        Ok(Sample { t, x0: s.x0, x: s.x, xi: None, u0, u, gamma, v: Some(v) })
    }

    fn check_assumption(&self, t: f64, y: &DVector<f64>, u: f64) -> Result<()> {
        let x = y.rows(1, self.sys.n).into_owned();
        self.sys.uncertainty.assert_assumption(t, u, &x, assumption_tol(&x))
    }
}

/// `y = [x₀, x, ξ]`.
pub struct OutputFeedbackLoop<'a> {
    sys: &'a ChainedSystem,
    law: &'a ObserverLaw,
}

impl<'a> OutputFeedbackLoop<'a> {
    pub fn new(sys: &'a ChainedSystem, law: &'a ObserverLaw) -> Result<Self> {
        if law.basis.n != sys.n {
            return Err(Error::Usage(format!("law built for n = {} used on n = {}", law.basis.n, sys.n)));
        }
        if sys.c0 != 0.0 {
            return Err(Error::Usage("output feedback is defined for the undrifted x0 channel".into()));
        }
        Ok(Self { sys, law })
    }

    pub fn pack(&self, s: &ChainedState, xi: &DVector<f64>) -> DVector<f64> {
        let n = self.sys.n;
        let mut y = DVector::zeros(2 * n + 1);
        y[0] = s.x0;
        y.rows_mut(1, n).copy_from(&s.x);
        y.rows_mut(n + 1, n).copy_from(xi);
        y
    }

    fn split(&self, y: &DVector<f64>) -> (ChainedState, DVector<f64>) {
        let n = self.sys.n;
        (split_plant(y, n), y.rows(n + 1, n).into_owned())
    }
}

impl ClosedLoop for OutputFeedbackLoop<'_> {
    fn dim(&self) -> usize {
        2 * self.sys.n + 1
    }

    fn horizon(&self) -> f64 {
        self.law.horizon()
    }

    fn rhs(&self, t: f64, y: &DVector<f64>) -> Result<DVector<f64>> {
        let (s, xi) = self.split(y);
        let u0 = self.law.u0(t, s.x0)?;
        let u = self.law.u(t, &xi)?;
        let d = self.sys.dynamics(t, &s, u0, u)?;
        let dxi = self.law.observer_derivative(t, &xi, u, s.output())?;
        Ok(self.pack(&d, &dxi))
    }

    fn sample(&self, t: f64, y: &DVector<f64>) -> Result<Sample> {
        let (s, xi) = self.split(y);
        let u0 = self.law.u0(t, s.x0)?;
        let u = self.law.u(t, &xi)?;
        let gamma = self.law.schedule.gamma(t)?;
        let z = to_transformed(t, self.horizon(), &s.x)?;
        let v = self.law.basis.lyapunov_value(gamma, &z)?;
        Ok(Sample { t, x0: s.x0, x: s.x, xi: Some(xi), u0, u, gamma, v: Some(v) })
    }

    fn check_assumption(&self, t: f64, y: &DVector<f64>, u: f64) -> Result<()> {
        let x = y.rows(1, self.sys.n).into_owned();
        self.sys.uncertainty.assert_assumption(t, u, &x, assumption_tol(&x))
    }
}

/// `y = [x₀, z]` with
/// `ż = βe^{c₀t}(A − bbᵀP(γ))z + θ(t)Az + ψ`, `θ = u₀/(T−t) − βe^{c₀t}`.
pub struct TransformedLoop<'a> {
    sys: &'a ChainedSystem,
    law: &'a StateFeedbackLaw,
}

impl<'a> TransformedLoop<'a> {
    pub fn new(sys: &'a ChainedSystem, law: &'a StateFeedbackLaw) -> Result<Self> {
        StateFeedbackLoop::new(sys, law)?;
        Ok(Self { sys, law })
    }
}

impl ClosedLoop for TransformedLoop<'_> {
    fn dim(&self) -> usize {
        self.sys.n + 1
    }

    fn horizon(&self) -> f64 {
        self.law.horizon()
    }

    fn rhs(&self, t: f64, y: &DVector<f64>) -> Result<DVector<f64>> {
        let n = self.sys.n;
        let horizon = self.horizon();
        let x0 = y[0];
        let z = y.rows(1, n).into_owned();
        let u0 = self.law.u0(t, x0)?;
        let scale = self.law.beta * (self.law.c0 * t).exp();
        let theta = u0 / (horizon - t) - scale;
        let gamma = self.law.schedule.gamma(t)?;
        let row = self.law.basis.feedback_gain_row(gamma)?;
        let pz = row.dot(&z.transpose());
        let u = -scale * pz;
        let psi = psi(&self.sys.uncertainty, t, u, horizon, &z)?;
        let mut dz = psi;
        for i in 0..n - 1 {
            dz[i] += (scale + theta) * z[i + 1];
        }
        dz[n - 1] -= scale * pz;
        let mut out = DVector::zeros(n + 1);
        out[0] = u0 + self.sys.c0 * x0;
        out.rows_mut(1, n).copy_from(&dz);
        Ok(out)
    }

    fn sample(&self, t: f64, y: &DVector<f64>) -> Result<Sample> {
        let n = self.sys.n;
        let z = y.rows(1, n).into_owned();
        let u0 = self.law.u0(t, y[0])?;
        let u = self.law.u_transformed(t, &z)?;
        let gamma = self.law.schedule.gamma(t)?;
        let v = self.law.basis.lyapunov_value(gamma, &z)?;
        Ok(Sample { t, x0: y[0], x: z, xi: None, u0, u, gamma, v: Some(v) })
    }

    fn check_assumption(&self, t: f64, y: &DVector<f64>, u: f64) -> Result<()> {
        let z = y.rows(1, self.sys.n).into_owned();
        let x = from_transformed(t, self.horizon(), &z)?;
        self.sys.uncertainty.assert_assumption(t, u, &x, assumption_tol(&x))
    }
}
