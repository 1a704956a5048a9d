//! The uncertain chained plant
//!
//! ```text
//! ẋ₀ = u₀ + c₀x₀
//! ẋᵢ = u₀xᵢ₊₁ + φᵢ(t, u, x),   i < n
//! ẋₙ = u + φₙ(t, u, x)
//! y  = [x₀, x₁]ᵀ
//! ```
//!
//! with uncertainties dominated row-wise by a lower-triangular table,
//! `|φᵢ| ≤ Σ_{j≤i} c_ij |x_j|`, and the time-varying change of coordinates
//! `z = Lₙ(1/(T−t)) x`.

use std::fmt;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::ple::{check_chain_length, ln_diagonal};

/// Known constants `c_ij ≥ 0` for `j ≤ i`.
#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintyBoundTable {
    n: usize,
    rows: Vec<Vec<f64>>,
}

impl UncertaintyBoundTable {
    /// `rows[i]` holds `c_{i1} … c_{ii}` (row `i` has `i + 1` entries, 0-based).
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
        let n = rows.len();
        if n == 0 {
            return Err(Error::Domain("bound table must have at least one row".into()));
        }
        for (i, row) in rows.iter().enumerate() {
            if row.len() != i + 1 {
                return Err(Error::Domain(format!(
                    "bound table row {} must have {} entries, got {}",
                    i + 1,
                    i + 1,
                    row.len()
                )));
            }
            if let Some(bad) = row.iter().find(|c| !(**c >= 0.0) || !c.is_finite()) {
                return Err(Error::Domain(format!("bound table entry {bad} is not a finite nonnegative number")));
            }
        }
        Ok(Self { n, rows })
    }

    pub fn zeros(n: usize) -> Self {
        Self { n, rows: (0..n).map(|i| vec![0.0; i + 1]).collect() }
    }

    /// Lower triangle of a square matrix; entries above the diagonal must be zero.
    pub fn from_matrix(m: &DMatrix<f64>) -> Result<Self> {
        let n = m.nrows();
        for i in 0..n {
            for j in (i + 1)..n {
                if m[(i, j)] != 0.0 {
                    return Err(Error::Domain(format!("bound table entry ({}, {}) above diagonal", i + 1, j + 1)));
                }
            }
        }
        Self::new((0..n).map(|i| (0..=i).map(|j| m[(i, j)]).collect()).collect())
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// `c_ij` with 0-based indices; zero above the diagonal.
    pub fn get(&self, i: usize, j: usize) -> f64 {
        if j > i {
            0.0
        } else {
            self.rows[i][j]
        }
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn scaled(&self, k: f64) -> Self {
        Self { n: self.n, rows: self.rows.iter().map(|r| r.iter().map(|c| c * k).collect()).collect() }
    }

    /// `Σ_{j≤i} c_ij |x_j|` per row.
    pub fn envelope(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(self.n, |i, _| (0..=i).map(|j| self.rows[i][j] * x[j].abs()).sum())
    }
}

pub type PhiFn = dyn Fn(f64, f64, &DVector<f64>) -> DVector<f64> + Send + Sync;

/// An uncertainty callable `φ(t, u, x)` together with the table that bounds it.
///
/// `φ` must be pure. Clones share one violation latch: once a runtime
/// assertion has seen the table violated, [`UncertaintySpec::bound_for_design`]
/// refuses to hand the table out.
#[derive(Clone)]
pub struct UncertaintySpec {
    label: String,
    bound: UncertaintyBoundTable,
    phi: Arc<PhiFn>,
    violated: Arc<AtomicBool>,
}

impl fmt::Debug for UncertaintySpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("UncertaintySpec")
            .field("label", &self.label)
            .field("bound", &self.bound)
            .field("violated", &self.is_violated())
            .finish()
    }
}

impl UncertaintySpec {
    pub fn new(label: impl Into<String>, bound: UncertaintyBoundTable, phi: Arc<PhiFn>) -> Self {
        Self { label: label.into(), bound, phi, violated: Arc::new(AtomicBool::new(false)) }
    }

    pub fn zero(n: usize) -> Self {
        Self::new("zero", UncertaintyBoundTable::zeros(n), Arc::new(move |_, _, _| DVector::zeros(n)))
    }

    /// `φᵢ = Σ_{j≤i} a_ij x_j` with the table `c_ij = |a_ij|`.
    pub fn linear(a: DMatrix<f64>) -> Result<Self> {
        let table = UncertaintyBoundTable::from_matrix(&a.abs())?;
        Self::linear_with_table(a, table)
    }

    /// Linear uncertainty with a user table; requires `|a_ij| ≤ c_ij`.
    pub fn linear_with_table(a: DMatrix<f64>, table: UncertaintyBoundTable) -> Result<Self> {
        let n = a.nrows();
        if a.ncols() != n || table.n() != n {
            return Err(Error::Domain("linear uncertainty must be square and match its table".into()));
        }
        for i in 0..n {
            for j in 0..n {
                if j > i && a[(i, j)] != 0.0 {
                    return Err(Error::Domain("linear uncertainty must be lower triangular".into()));
                }
                if j <= i && a[(i, j)].abs() > table.get(i, j) {
                    return Err(Error::Domain(format!(
                        "|a_{}{}| = {} exceeds table entry {}",
                        i + 1,
                        j + 1,
                        a[(i, j)].abs(),
                        table.get(i, j)
                    )));
                }
            }
        }
        Ok(Self::new("linear", table, Arc::new(move |_, _, x| &a * x)))
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn n(&self) -> usize {
        self.bound.n()
    }

    /// The table as declared, regardless of the latch.
    pub fn bound(&self) -> &UncertaintyBoundTable {
        &self.bound
    }

    /// The table, unless a runtime assertion has seen it violated.
    pub fn bound_for_design(&self) -> Result<&UncertaintyBoundTable> {
        if self.is_violated() {
            return Err(Error::Uncertainty {
                label: self.label.clone(),
                msg: "bound table was violated at runtime; derived constants are invalid".into(),
            });
        }
        Ok(&self.bound)
    }

    pub fn is_violated(&self) -> bool {
        self.violated.load(Ordering::Relaxed)
    }

    pub fn eval(&self, t: f64, u: f64, x: &DVector<f64>) -> Result<DVector<f64>> {
        let out = (self.phi)(t, u, x);
        if out.len() != self.n() {
            return Err(Error::Uncertainty {
                label: self.label.clone(),
                msg: format!("returned {} components, expected {}", out.len(), self.n()),
            });
        }
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::Uncertainty { label: self.label.clone(), msg: format!("non-finite output at t = {t}") });
        }
        Ok(out)
    }

    /// Slack `Σ_{j≤i} c_ij|x_j| − |φᵢ|`; nonnegative everywhere iff the table holds here.
    pub fn assumption_residual(&self, t: f64, u: f64, x: &DVector<f64>) -> Result<DVector<f64>> {
        let phi = self.eval(t, u, x)?;
        Ok(self.bound.envelope(x) - phi.abs())
    }

    /// Checks the table at one point, latching the violation flag on failure.
    /// `tol` is an absolute allowance for rounding.
    pub fn assert_assumption(&self, t: f64, u: f64, x: &DVector<f64>, tol: f64) -> Result<()> {
        let slack = self.assumption_residual(t, u, x)?;
        if let Some((row, s)) = slack.iter().enumerate().find(|(_, s)| **s < -tol) {
            self.violated.store(true, Ordering::Relaxed);
            return Err(Error::AssumptionViolated { label: self.label.clone(), t, row: row + 1, slack: *s });
        }
        Ok(())
    }
}

/// Plant description: chain length, drift of the `x₀` channel, and uncertainty.
#[derive(Debug, Clone)]
pub struct ChainedSystem {
    pub n: usize,
    pub c0: f64,
    pub uncertainty: UncertaintySpec,
}

/// `[x₀, xᵀ]ᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainedState {
    pub x0: f64,
    pub x: DVector<f64>,
}

impl ChainedState {
    pub fn new(x0: f64, x: Vec<f64>) -> Self {
        Self { x0, x: DVector::from_vec(x) }
    }

    pub fn zeros(n: usize) -> Self {
        Self { x0: 0.0, x: DVector::zeros(n) }
    }

    /// `y = [x₀, x₁]`.
    pub fn output(&self) -> [f64; 2] {
        [self.x0, self.x[0]]
    }

    pub fn is_finite(&self) -> bool {
        self.x0.is_finite() && self.x.iter().all(|v| v.is_finite())
    }
}

impl ChainedSystem {
    pub fn new(n: usize, c0: f64, uncertainty: UncertaintySpec) -> Result<Self> {
        check_chain_length(n)?;
        if !c0.is_finite() {
            return Err(Error::Domain("drift coefficient must be finite".into()));
        }
        if uncertainty.n() != n {
            return Err(Error::Domain(format!(
                "uncertainty has {} rows but the chain has length {n}",
                uncertainty.n()
            )));
        }
        Ok(Self { n, c0, uncertainty })
    }

    /// Right-hand side of the plant for given inputs.
    pub fn dynamics(&self, t: f64, s: &ChainedState, u0: f64, u: f64) -> Result<ChainedState> {
        let phi = self.uncertainty.eval(t, u, &s.x)?;
        let n = self.n;
        let mut dx = DVector::zeros(n);
        for i in 0..n - 1 {
            dx[i] = u0 * s.x[i + 1] + phi[i];
        }
        dx[n - 1] = u + phi[n - 1];
        Ok(ChainedState { x0: u0 + self.c0 * s.x0, x: dx })
    }

    pub fn derived_bounds(&self, horizon: f64) -> Result<DerivedBounds> {
        DerivedBounds::new(self.uncertainty.bound_for_design()?, horizon)
    }
}

fn check_time(t: f64, horizon: f64) -> Result<f64> {
    if !(horizon > 0.0) {
        return Err(Error::Domain(format!("prescribed time must be positive, got {horizon}")));
    }
    if !(t >= 0.0) || t >= horizon {
        return Err(Error::Domain(format!("time {t} outside [0, {horizon})")));
    }
    Ok(horizon - t)
}

/// `z = Lₙ(1/(T−t)) x`, i.e. `zᵢ = (T−t)^{i−n} xᵢ`.
pub fn to_transformed(t: f64, horizon: f64, x: &DVector<f64>) -> Result<DVector<f64>> {
    let rem = check_time(t, horizon)?;
    Ok(ln_diagonal(1.0 / rem, x.len())?.component_mul(x))
}

/// `x = Lₙ(T−t) z`.
pub fn from_transformed(t: f64, horizon: f64, z: &DVector<f64>) -> Result<DVector<f64>> {
    let rem = check_time(t, horizon)?;
    Ok(ln_diagonal(rem, z.len())?.component_mul(z))
}

/// `ψᵢ = (T−t)^{i−n} φᵢ(t, u, x) + (n−i)/(T−t) zᵢ` with `x` recovered from `z`.
pub fn psi(spec: &UncertaintySpec, t: f64, u: f64, horizon: f64, z: &DVector<f64>) -> Result<DVector<f64>> {
    let rem = check_time(t, horizon)?;
    let n = z.len();
    let x = from_transformed(t, horizon, z)?;
    let phi = spec.eval(t, u, &x)?;
    let scale = ln_diagonal(1.0 / rem, n)?;
    Ok(DVector::from_fn(n, |i, _| scale[i] * phi[i] + (n - 1 - i) as f64 / rem * z[i]))
}

/// Lower-triangular `g_ij = c_ij T^{i+1−j}` (j < i), `g_ii = c_ii T + n − i`.
pub type GTable = Vec<Vec<f64>>;

pub fn compute_g_table(bounds: &UncertaintyBoundTable, horizon: f64) -> Result<GTable> {
    if !(horizon > 0.0) || !horizon.is_finite() {
        return Err(Error::Domain(format!("prescribed time must be positive, got {horizon}")));
    }
    let n = bounds.n();
    Ok((0..n)
        .map(|i| {
            (0..=i)
                .map(|j| {
                    if j < i {
                        bounds.get(i, j) * horizon.powi((i + 1 - j) as i32)
                    } else {
                        bounds.get(i, i) * horizon + (n - 1 - i) as f64
                    }
                })
                .collect()
        })
        .collect())
}

/// `d = sqrt(max_j Σ_{i≥j} g_ij² · i / γ₀^{2(i−j)})` (1-based `i`).
pub fn compute_d(g: &GTable, gamma0: f64, n: usize) -> Result<f64> {
    if !(gamma0 > 0.0) {
        return Err(Error::Domain(format!("gamma0 must be positive, got {gamma0}")));
    }
    if g.len() != n {
        return Err(Error::Domain("g table size does not match n".into()));
    }
    let col = |j: usize| -> f64 {
        (j..n).map(|i| g[i][j] * g[i][j] * (i + 1) as f64 / gamma0.powi(2 * (i - j) as i32)).sum()
    };
    Ok((0..n).map(col).fold(0.0, f64::max).sqrt())
}

/// Constants obtained from the bound table and the prescribed time.
#[derive(Debug, Clone, PartialEq)]
pub struct DerivedBounds {
    pub g: GTable,
    pub d: f64,
}

impl DerivedBounds {
    pub fn new(bounds: &UncertaintyBoundTable, horizon: f64) -> Result<Self> {
        let g = compute_g_table(bounds, horizon)?;
        let d = compute_d(&g, 1.0 / horizon, bounds.n())?;
        Ok(Self { g, d })
    }

    /// Growth rate of the state-feedback Lyapunov envelope:
    /// `θ₀ = 6 (|x₀(0)|/T³ + β/(2T)) √3 n`.
    pub fn theta0(n: usize, horizon: f64, x0_init: f64, beta: f64) -> f64 {
        6.0 * (x0_init.abs() / horizon.powi(3) + beta / (2.0 * horizon)) * 3f64.sqrt() * n as f64
    }
}

pub type ThetaFn = dyn Fn(f64) -> f64 + Send + Sync;

/// The uncertain bilinear model
///
/// ```text
/// ẋ₀ = (1 − ε²/2) v,   ż₁ = z₂ v,   ż₂ = u + ϕ(z₁),   ϕ(z₁) = z₁ (1 + θ₁(t)²)
/// ```
///
/// The uncertainty term is read as `z₁ (1 + θ₁²)`, i.e. linear in its argument.
#[derive(Clone)]
pub struct BilinearScenario {
    pub eps: f64,
    pub theta1: Arc<ThetaFn>,
    /// An upper bound on `sup_t θ₁(t)²`.
    pub theta1_sq_sup: f64,
    pub horizon: f64,
    pub beta: Option<f64>,
}

impl fmt::Debug for BilinearScenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("BilinearScenario")
            .field("eps", &self.eps)
            .field("theta1_sq_sup", &self.theta1_sq_sup)
            .field("horizon", &self.horizon)
            .field("beta", &self.beta)
            .finish()
    }
}

impl BilinearScenario {
    /// `θ₁ = sin t`, `T = 2.5`, `β = 100`.
    pub fn with_eps(eps: f64) -> Self {
        Self { eps, theta1: Arc::new(f64::sin), theta1_sq_sup: 1.0, horizon: 2.5, beta: Some(100.0) }
    }

    pub fn reference() -> Self {
        Self::with_eps(0.1)
    }

    /// Reference initial condition `[x₀, z₁, z₂] = [0, −1, 1]`.
    pub fn reference_initial() -> [f64; 3] {
        [0.0, -1.0, 1.0]
    }
}

/// Input and state maps between the bilinear model and its chained image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BilinearMaps {
    pub eps: f64,
}

impl BilinearMaps {
    /// `2/(2 − ε²)`.
    pub fn k(&self) -> f64 {
        2.0 / (2.0 - self.eps * self.eps)
    }

    pub fn v_to_u0(&self, v: f64) -> f64 {
        (1.0 - self.eps * self.eps / 2.0) * v
    }

    pub fn u0_to_v(&self, u0: f64) -> f64 {
        u0 / (1.0 - self.eps * self.eps / 2.0)
    }

    pub fn z2_to_x2(&self, z2: f64) -> f64 {
        self.k() * z2
    }

    pub fn x2_to_z2(&self, x2: f64) -> f64 {
        x2 / self.k()
    }

    pub fn u_to_u1(&self, u: f64) -> f64 {
        self.k() * u
    }

    pub fn u1_to_u(&self, u1: f64) -> f64 {
        u1 / self.k()
    }

    /// `(x₀, z₁, z₂) ↦ (x₀, x₁, x₂)`.
    pub fn to_chained(&self, s: [f64; 3]) -> ChainedState {
        ChainedState::new(s[0], vec![s[1], self.z2_to_x2(s[2])])
    }

    pub fn from_chained(&self, s: &ChainedState) -> [f64; 3] {
        [s.x0, s.x[0], self.x2_to_z2(s.x[1])]
    }
}

fn check_eps(eps: f64) -> Result<()> {
    if !eps.is_finite() || eps.abs() >= 2f64.sqrt() {
        return Err(Error::Domain(format!("orientation bias must satisfy |eps| < sqrt(2), got {eps}")));
    }
    Ok(())
}

/// Right-hand side of the bilinear model in its own coordinates.
pub fn bilinear_dynamics(sc: &BilinearScenario, t: f64, s: [f64; 3], v: f64, u: f64) -> Result<[f64; 3]> {
    check_eps(sc.eps)?;
    let th = (sc.theta1)(t);
    Ok([(1.0 - sc.eps * sc.eps / 2.0) * v, s[2] * v, u + s[1] * (1.0 + th * th)])
}

/// Chained image of the bilinear model: `n = 2`, `c₀ = 0`,
/// `φ₂ = 2/(2−ε²) · x₁ (1 + θ₁²)` bounded by `c₂₁ = 2/(2−ε²) · (1 + sup θ₁²)`.
pub fn bilinear_to_chained(sc: &BilinearScenario) -> Result<(ChainedSystem, BilinearMaps)> {
    check_eps(sc.eps)?;
    if !(sc.theta1_sq_sup >= 0.0) {
        return Err(Error::Domain("sup of theta1^2 must be nonnegative".into()));
    }
    let maps = BilinearMaps { eps: sc.eps };
    let k = maps.k();
    let table = UncertaintyBoundTable::new(vec![vec![0.0], vec![k * (1.0 + sc.theta1_sq_sup), 0.0]])?;
    let theta = sc.theta1.clone();
    let phi: Arc<PhiFn> = Arc::new(move |t, _u, x: &DVector<f64>| {
        let th = theta(t);
        DVector::from_vec(vec![0.0, k * x[0] * (1.0 + th * th)])
    });
    let spec = UncertaintySpec::new(format!("bilinear_example:{}", sc.eps), table, phi);
    Ok((ChainedSystem::new(2, 0.0, spec)?, maps))
}
