//! Parametric Lyapunov equations for the canonical chain.
//!
//! For the shift pair `(A, b)` and its dual `(A, c)` the equations
//!
//! ```text
//! AᵀP + PA − PbbᵀP = −γP        AQ + QAᵀ − QcᵀcQ = −γQ
//! ```
//!
//! have unique positive definite solutions that scale self-similarly in γ:
//! `P(γ) = γ L(γ) Pₙ L(γ)` and `Q(γ) = γ^{2n−1} L(γ)⁻¹ Qₙ L(γ)⁻¹` with
//! `L(γ) = diag(γ^{n−1}, …, γ, 1)`. The unit solutions `Pₙ`, `Qₙ` are the
//! inverses of integer Gramians with unit determinant, so they are integer
//! matrices and are computed exactly here.

use nalgebra::{DMatrix, DVector, RowDVector};

use crate::error::{Error, Result};
use crate::linalg::{
    binomial, diag_congruence, fro, generalized_sym_eigenvalues, sym_eigenvalues, symmetrize, unimodular_inverse,
};

pub const MIN_CHAIN: usize = 2;
pub const MAX_CHAIN: usize = 12;

/// Largest admissible value of γ^{2n−1} in [`PleBasis::eval_p`] / [`PleBasis::eval_q`].
pub const GAIN_POWER_LIMIT: f64 = 1e300;

pub fn check_chain_length(n: usize) -> Result<()> {
    if (MIN_CHAIN..=MAX_CHAIN).contains(&n) {
        Ok(())
    } else {
        Err(Error::ChainLength { n, min: MIN_CHAIN, max: MAX_CHAIN })
    }
}

/// The canonical chain triple: `A` upper shift, `b = eₙ`, `c = e₁ᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainMatrices {
    pub n: usize,
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    pub c: RowDVector<f64>,
}

impl ChainMatrices {
    pub fn new(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::Domain("chain length must be positive".into()));
        }
        let a = DMatrix::from_fn(n, n, |i, j| if j == i + 1 { 1.0 } else { 0.0 });
        let mut b = DVector::zeros(n);
        b[n - 1] = 1.0;
        let mut c = RowDVector::zeros(n);
        c[0] = 1.0;
        Ok(Self { n, a, b, c })
    }

    /// Rank of `[b, Ab, …, A^{n−1}b]`.
    pub fn controllability_rank(&self) -> usize {
        let mut k = DMatrix::zeros(self.n, self.n);
        let mut col = self.b.clone();
        for j in 0..self.n {
            k.set_column(j, &col);
            col = &self.a * col;
        }
        k.rank(1e-12)
    }

    /// Rank of `[c; cA; …; cA^{n−1}]`.
    pub fn observability_rank(&self) -> usize {
        let mut o = DMatrix::zeros(self.n, self.n);
        let mut row = self.c.clone();
        for i in 0..self.n {
            o.set_row(i, &row);
            row = &row * &self.a;
        }
        o.rank(1e-12)
    }
}

/// Diagonal of `Lₙ(γ) = diag(γ^{n−1}, …, γ, 1)`.
pub fn ln_diagonal(gamma: f64, n: usize) -> Result<DVector<f64>> {
    if !(gamma > 0.0) || !gamma.is_finite() {
        return Err(Error::Domain(format!("scaling parameter must be positive and finite, got {gamma}")));
    }
    if n == 0 {
        return Err(Error::Domain("chain length must be positive".into()));
    }
    Ok(DVector::from_fn(n, |i, _| gamma.powi((n - 1 - i) as i32)))
}

pub fn ln_scaling(gamma: f64, n: usize) -> Result<DMatrix<f64>> {
    Ok(DMatrix::from_diagonal(&ln_diagonal(gamma, n)?))
}

/// `Eₙ = diag(n−1, …, 1, 0)`.
pub fn e_matrix(n: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, n, |i, j| if i == j { (n - 1 - i) as f64 } else { 0.0 })
}

/// Gramian whose inverse is `Pₙ`: `w_ij = (−1)^{i+j} C(2n−i−j, n−i)` (1-based).
pub fn unit_gramian(n: usize) -> Vec<Vec<i128>> {
    (0..n)
        .map(|i| {
            (0..n)
                .map(|j| {
                    let sign = if (i + j) % 2 == 0 { 1 } else { -1 };
                    sign * binomial((2 * n - 2 - i - j) as u32, (n - 1 - i) as u32)
                })
                .collect()
        })
        .collect()
}

/// Gramian whose inverse is `Qₙ`: `v_ij = (−1)^{i+j} C(i+j−2, i−1)` (1-based).
pub fn unit_dual_gramian(n: usize) -> Vec<Vec<i128>> {
    (0..n)
        .map(|i| {
            (0..n)
                .map(|j| {
                    let sign = if (i + j) % 2 == 0 { 1 } else { -1 };
                    sign * binomial((i + j) as u32, i as u32)
                })
                .collect()
        })
        .collect()
}

fn to_f64(m: &[Vec<i128>]) -> DMatrix<f64> {
    let n = m.len();
    DMatrix::from_fn(n, n, |i, j| m[i][j] as f64)
}

/// `‖AᵀP + PA − PbbᵀP + γP‖_F`.
pub fn ple_residual(chain: &ChainMatrices, gamma: f64, p: &DMatrix<f64>) -> f64 {
    let pb = p * &chain.b;
    let r = chain.a.transpose() * p + p * &chain.a - &pb * pb.transpose() + p * gamma;
    fro(&r)
}

/// `‖AQ + QAᵀ − QcᵀcQ + γQ‖_F`.
pub fn dual_ple_residual(chain: &ChainMatrices, gamma: f64, q: &DMatrix<f64>) -> f64 {
    let qc = q * chain.c.transpose();
    let r = &chain.a * q + q * chain.a.transpose() - &qc * qc.transpose() + q * gamma;
    fro(&r)
}

const UNIT_RESIDUAL_TOL: f64 = 1e-9;

/// Positive definite solution of `AᵀP + PA − PbbᵀP = −P`.
pub fn solve_unit_ple(n: usize) -> Result<DMatrix<f64>> {
    check_chain_length(n)?;
    let p = to_f64(&unimodular_inverse(&unit_gramian(n))?);
    let chain = ChainMatrices::new(n)?;
    let res = ple_residual(&chain, 1.0, &p);
    if res > UNIT_RESIDUAL_TOL * fro(&p) {
        return Err(Error::Numerical { stage: "unit PLE", residual: res });
    }
    Ok(p)
}

/// Positive definite solution of `AQ + QAᵀ − QcᵀcQ = −Q`.
pub fn solve_unit_dual_ple(n: usize) -> Result<DMatrix<f64>> {
    check_chain_length(n)?;
    let q = to_f64(&unimodular_inverse(&unit_dual_gramian(n))?);
    let chain = ChainMatrices::new(n)?;
    let res = dual_ple_residual(&chain, 1.0, &q);
    if res > UNIT_RESIDUAL_TOL * fro(&q) {
        return Err(Error::Numerical { stage: "unit dual PLE", residual: res });
    }
    Ok(q)
}

/// `n (1 + λ_max(E + P E P⁻¹))`.
///
/// `E + PEP⁻¹` is similar to a symmetric matrix; its spectrum is taken from
/// the pencil `(EP + PE, P)`.
pub fn delta_c_from(p_n: &DMatrix<f64>, e: &DMatrix<f64>) -> Result<f64> {
    let n = p_n.nrows();
    let ep = e * p_n;
    let ev = generalized_sym_eigenvalues(&(&ep + ep.transpose()), p_n)?;
    Ok(n as f64 * (1.0 + ev[n - 1]))
}

pub fn compute_delta_c(basis: &PleBasis) -> Result<f64> {
    delta_c_from(&basis.p_n, &basis.e_n)
}

/// Unit solutions and the scalar constants derived from them.
#[derive(Debug, Clone)]
pub struct PleBasis {
    pub n: usize,
    pub chain: ChainMatrices,
    pub p_n: DMatrix<f64>,
    pub q_n: DMatrix<f64>,
    /// Shared extreme eigenvalue: `λ_max(Pₙ) = 1/λ_min(Pₙ)`.
    pub lambda: f64,
    pub delta_c: f64,
    /// `c Qₙ Pₙ Qₙ cᵀ`.
    pub k3: f64,
    pub e_n: DMatrix<f64>,
    /// Upper factor `R` with `Pₙ = RᵀR`.
    pub p_factor: DMatrix<f64>,
}

impl PleBasis {
    pub fn new(n: usize) -> Result<Self> {
        let p_n = solve_unit_ple(n)?;
        let q_n = solve_unit_dual_ple(n)?;
        Self::from_unit_solutions(p_n, q_n)
    }

    /// Derives the constants from externally supplied unit solutions without
    /// checking them. Used to build negative controls.
    pub fn from_unit_solutions(p_n: DMatrix<f64>, q_n: DMatrix<f64>) -> Result<Self> {
        let n = p_n.nrows();
        if n < MIN_CHAIN || p_n.ncols() != n || q_n.shape() != (n, n) {
            return Err(Error::Domain("unit solutions must be square of equal size n >= 2".into()));
        }
        let chain = ChainMatrices::new(n)?;
        let e_n = e_matrix(n);
        let lambda = *sym_eigenvalues(&p_n).last().expect("n >= 2");
        let delta_c = delta_c_from(&p_n, &e_n)?;
        let q_col = q_n.column(0).into_owned();
        let k3 = (q_col.transpose() * &p_n * &q_col)[(0, 0)];
        let p_factor = symmetrize(&p_n)
            .cholesky()
            .ok_or(Error::Numerical { stage: "cholesky of unit solution", residual: f64::NAN })?
            .l()
            .transpose();
        Ok(Self { n, chain, p_n, q_n, lambda, delta_c, k3, e_n, p_factor })
    }

    fn check_gamma(&self, gamma: f64) -> Result<()> {
        if !(gamma > 0.0) || !gamma.is_finite() {
            return Err(Error::Domain(format!("gamma must be positive and finite, got {gamma}")));
        }
        let power = 2 * self.n as i32 - 1;
        if gamma.powi(power) > GAIN_POWER_LIMIT {
            return Err(Error::GainOverflow { gamma, power, limit: GAIN_POWER_LIMIT });
        }
        Ok(())
    }

    /// `P(γ) = γ Lₙ(γ) Pₙ Lₙ(γ)`, entrywise `γ^{2n−i−j+1} Pₙ[i,j]` (1-based).
    pub fn eval_p(&self, gamma: f64) -> Result<DMatrix<f64>> {
        self.check_gamma(gamma)?;
        let n = self.n;
        Ok(DMatrix::from_fn(n, n, |i, j| gamma.powi((2 * n - 1 - i - j) as i32) * self.p_n[(i, j)]))
    }

    /// `Q(γ) = γ^{2n−1} Lₙ(γ)⁻¹ Qₙ Lₙ(γ)⁻¹`, entrywise `γ^{i+j−1} Qₙ[i,j]` (1-based).
    pub fn eval_q(&self, gamma: f64) -> Result<DMatrix<f64>> {
        self.check_gamma(gamma)?;
        let n = self.n;
        Ok(DMatrix::from_fn(n, n, |i, j| gamma.powi((i + j + 1) as i32) * self.q_n[(i, j)]))
    }

    /// `bᵀP(γ)`: the last row of `P(γ)`.
    pub fn feedback_gain_row(&self, gamma: f64) -> Result<RowDVector<f64>> {
        self.check_gamma(gamma)?;
        let n = self.n;
        Ok(RowDVector::from_fn(n, |_, j| gamma.powi((n - j) as i32) * self.p_n[(n - 1, j)]))
    }

    /// `Q(γ)cᵀ`: the first column of `Q(γ)`.
    pub fn observer_gain_col(&self, gamma: f64) -> Result<DVector<f64>> {
        self.check_gamma(gamma)?;
        Ok(DVector::from_fn(self.n, |i, _| gamma.powi(i as i32 + 1) * self.q_n[(i, 0)]))
    }

    pub fn p_inverse(&self) -> Result<DMatrix<f64>> {
        invert_spd(&self.p_n)
    }

    pub fn q_inverse(&self) -> Result<DMatrix<f64>> {
        invert_spd(&self.q_n)
    }

    /// `γ zᵀP(γ)z`, evaluated as `γ² ‖R Lz‖²` so it is never negative.
    pub fn lyapunov_value(&self, gamma: f64, z: &DVector<f64>) -> Result<f64> {
        self.check_gamma(gamma)?;
        let lz = ln_diagonal(gamma, self.n)?.component_mul(z);
        Ok(gamma * gamma * (&self.p_factor * lz).norm_squared())
    }

    /// Eigenvalues of `Pₙ` and `Qₙ` and their inverses, each ascending.
    pub fn spectra(&self) -> Result<[Vec<f64>; 4]> {
        Ok([
            sym_eigenvalues(&self.p_n),
            sym_eigenvalues(&self.q_n),
            sym_eigenvalues(&self.p_inverse()?),
            sym_eigenvalues(&self.q_inverse()?),
        ])
    }

    /// Normalises a matrix built at γ back to unit scale by the congruence
    /// `Lₙ(γ)⁻¹ M Lₙ(γ)⁻¹ / γ`, which maps `P(γ)` to `Pₙ`.
    pub fn unscale_p_like(&self, gamma: f64, m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let inv = ln_diagonal(gamma, self.n)?.map(|v| 1.0 / v);
        Ok(diag_congruence(&inv, m) / gamma)
    }

    /// Normalises by `Lₙ(γ) M Lₙ(γ) / γ^{2n−1}`, which maps `Q(γ)` to `Qₙ`.
    pub fn unscale_q_like(&self, gamma: f64, m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let l = ln_diagonal(gamma, self.n)?;
        Ok(diag_congruence(&l, m) / gamma.powi(2 * self.n as i32 - 1))
    }
}

fn invert_spd(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let chol = symmetrize(m).cholesky().ok_or(Error::Numerical { stage: "cholesky", residual: f64::NAN })?;
    Ok(symmetrize(&chol.inverse()))
}

/// `γ(t) = T/(T−t) · γ₀ = 1/(T−t)` on `[0, T)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GainSchedule {
    horizon: f64,
}

impl GainSchedule {
    pub fn new(horizon: f64) -> Result<Self> {
        if !(horizon > 0.0) || !horizon.is_finite() {
            return Err(Error::Domain(format!("prescribed time must be positive, got {horizon}")));
        }
        Ok(Self { horizon })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn gamma0(&self) -> f64 {
        1.0 / self.horizon
    }

    pub fn remaining(&self, t: f64) -> Result<f64> {
        if !(t >= 0.0) || t >= self.horizon {
            return Err(Error::Domain(format!("time {t} outside [0, {}) of the gain schedule", self.horizon)));
        }
        Ok(self.horizon - t)
    }

    pub fn gamma(&self, t: f64) -> Result<f64> {
        let rem = self.remaining(t)?;
        Ok(self.horizon / rem * self.gamma0())
    }
}
