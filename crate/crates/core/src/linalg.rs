//! Small dense helpers on top of nalgebra for symmetric problems.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// `(m + mᵀ) / 2`.
pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Eigenvalues of the symmetric part of `m`, ascending.
pub fn sym_eigenvalues(m: &DMatrix<f64>) -> Vec<f64> {
    let mut ev: Vec<f64> = symmetrize(m).symmetric_eigenvalues().iter().copied().collect();
    ev.sort_by(f64::total_cmp);
    ev
}

pub fn sym_min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    sym_eigenvalues(m)[0]
}

pub fn sym_max_eigenvalue(m: &DMatrix<f64>) -> f64 {
    *sym_eigenvalues(m).last().expect("non-empty matrix")
}

/// Eigenvalues of the pencil `(a, b)` with `b` positive definite, ascending.
///
/// Reduced to the standard problem `C⁻¹ a C⁻ᵀ` with `b = C Cᵀ`.
pub fn generalized_sym_eigenvalues(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<Vec<f64>> {
    let chol =
        symmetrize(b).cholesky().ok_or(Error::Numerical { stage: "cholesky of pencil metric", residual: f64::NAN })?;
    let l = chol.l();
    let l_inv = l.clone().try_inverse().ok_or(Error::Numerical { stage: "triangular inverse", residual: f64::NAN })?;
    let reduced = &l_inv * symmetrize(a) * l_inv.transpose();
    Ok(sym_eigenvalues(&reduced))
}

/// Diagonal congruence `D m D` for a diagonal given as a vector.
pub fn diag_congruence(d: &DVector<f64>, m: &DMatrix<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| d[i] * m[(i, j)] * d[j])
}

/// Frobenius norm.
pub fn fro(m: &DMatrix<f64>) -> f64 {
    m.norm()
}

/// Euclidean norm scaled by the largest entry, so it does not underflow for
/// vectors of subnormal size.
pub fn stable_norm(v: &DVector<f64>) -> f64 {
    let m = v.amax();
    if m == 0.0 || !m.is_finite() {
        return m;
    }
    m * (v / m).norm()
}

/// Binomial coefficient in 128-bit arithmetic.
pub fn binomial(n: u32, k: u32) -> i128 {
    let k = k.min(n - k);
    let mut acc: i128 = 1;
    for i in 0..k {
        acc = acc * (n - i) as i128 / (i + 1) as i128;
    }
    acc
}

/// Exact inverse of a unimodular integer matrix.
///
/// A floating-point inverse is rounded and then refined with exact integer
/// residuals `R = I − W X` until `W X = I` holds exactly.
pub fn unimodular_inverse(w: &[Vec<i128>]) -> Result<Vec<Vec<i128>>> {
    let n = w.len();
    let wf = DMatrix::from_fn(n, n, |i, j| w[i][j] as f64);
    let inv_f =
        wf.clone().lu().try_inverse().ok_or(Error::Numerical { stage: "gramian inverse", residual: f64::INFINITY })?;
    let mut x: Vec<Vec<i128>> = (0..n).map(|i| (0..n).map(|j| inv_f[(i, j)].round() as i128).collect()).collect();
    let mut worst = f64::INFINITY;
    for _ in 0..16 {
        let mut r = vec![vec![0i128; n]; n];
        let mut clean = true;
        for i in 0..n {
            for j in 0..n {
                let wx: i128 = (0..n).map(|k| w[i][k] * x[k][j]).sum();
                r[i][j] = i128::from(i == j) - wx;
                clean &= r[i][j] == 0;
            }
        }
        if clean {
            return Ok(x);
        }
        worst = r.iter().flatten().map(|v| v.unsigned_abs() as f64).fold(0.0, f64::max);
        let rf = DMatrix::from_fn(n, n, |i, j| r[i][j] as f64);
        let delta = &inv_f * rf;
        for i in 0..n {
            for j in 0..n {
                x[i][j] += delta[(i, j)].round() as i128;
            }
        }
    }
    Err(Error::Numerical { stage: "integer refinement of gramian inverse", residual: worst })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binomials() {
        assert_eq!(binomial(0, 0), 1);
        assert_eq!(binomial(5, 2), 10);
        assert_eq!(binomial(22, 11), 705_432);
    }

    #[test]
    fn stable_norm_survives_subnormals() {
        let v = DVector::from_vec(vec![3e-310, 4e-310]);
        assert_eq!(v.norm(), 0.0);
        assert!((stable_norm(&v) / 5e-310 - 1.0).abs() < 1e-6);
        assert_eq!(stable_norm(&DVector::from_vec(vec![3.0, 4.0])), 5.0);
        assert_eq!(stable_norm(&DVector::zeros(3)), 0.0);
    }

    #[test]
    fn unimodular_inverse_small() {
        let w = vec![vec![2, -1], vec![-1, 1]];
        let p = unimodular_inverse(&w).unwrap();
        assert_eq!(p, vec![vec![1, 1], vec![1, 2]]);
    }

    #[test]
    fn singular_integer_matrix_is_rejected() {
        let w = vec![vec![1, 2], vec![2, 4]];
        assert!(unimodular_inverse(&w).is_err());
    }

    #[test]
    fn pencil_eigenvalues_match_direct_for_identity_metric() {
        let a = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 3.0]);
        let b = DMatrix::identity(2, 2);
        let g = generalized_sym_eigenvalues(&a, &b).unwrap();
        let d = sym_eigenvalues(&a);
        for (x, y) in g.iter().zip(&d) {
            assert!((x - y).abs() < 1e-14);
        }
    }
}
