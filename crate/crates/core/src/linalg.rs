//! Small dense linear-algebra helpers with an explicit positive-definiteness
//! guard.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::data::DatasetTable;
use crate::error::{Result, UnlearnError};
use crate::params::ParamVector;

/// Smallest eigenvalue a curvature matrix may have before it is treated as
/// singular.
pub const MIN_EIGENVALUE: f64 = 1e-10;

pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(m.clone()).eigenvalues.min()
}

fn guard(m: &DMatrix<f64>) -> Result<()> {
    if m.nrows() != m.ncols() {
        return Err(UnlearnError::shape(m.nrows(), m.ncols()));
    }
    let lo = min_eigenvalue(m);
    if lo.is_nan() || lo <= MIN_EIGENVALUE {
        return Err(UnlearnError::SingularCurvature { min_eigenvalue: lo });
    }
    Ok(())
}

/// Solves `M x = b` for symmetric positive-definite `M` through a Cholesky
/// factorization.
pub fn solve_spd(m: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    guard(m)?;
    if b.len() != m.nrows() {
        return Err(UnlearnError::shape(m.nrows(), b.len()));
    }
    let chol = m
        .clone()
        .cholesky()
        .ok_or(UnlearnError::SingularCurvature { min_eigenvalue: min_eigenvalue(m) })?;
    Ok(chol.solve(b))
}

/// `Q Λ^{-1/4} Qᵀ` for a symmetric positive-definite `F = Q Λ Qᵀ`.
pub fn inverse_quarter_root(f: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    guard(f)?;
    let eig = SymmetricEigen::new(f.clone());
    let scaled = DVector::from_iterator(
        eig.eigenvalues.len(),
        eig.eigenvalues.iter().map(|l| l.powf(-0.25)),
    );
    let q = &eig.eigenvectors;
    let r = q * DMatrix::from_diagonal(&scaled) * q.transpose();
    Ok((&r + r.transpose()) * 0.5)
}

/// Minimizer of `(1/2n) Σ (xᵢᵀw + b − yᵢ)² + (λ/2)‖w‖² + cᵀθ` via the normal
/// equations. `linear` is the optional coefficient vector `c`.
pub fn ridge_closed_form(data: &DatasetTable, lambda: f64, linear: Option<&[f64]>) -> Result<ParamVector> {
    if data.is_empty() {
        return Err(UnlearnError::degenerate("ridge solution of an empty table"));
    }
    let p = data.p();
    let d = p + 1;
    let nf = data.n() as f64;
    let mut a = DMatrix::<f64>::zeros(d, d);
    let mut rhs = DVector::<f64>::zeros(d);
    let mut xt = vec![0.0; d];
    for i in 0..data.n() {
        xt[..p].copy_from_slice(data.row(i));
        xt[p] = 1.0;
        let y = data.label(i) as f64;
        for r in 0..d {
            rhs[r] += xt[r] * y / nf;
            for c in 0..d {
                a[(r, c)] += xt[r] * xt[c] / nf;
            }
        }
    }
    for j in 0..p {
        a[(j, j)] += lambda;
    }
    if let Some(c) = linear {
        if c.len() != d {
            return Err(UnlearnError::shape(d, c.len()));
        }
        for r in 0..d {
            rhs[r] -= c[r];
        }
    }
    Ok(ParamVector::from_dvector(&solve_spd(&a, &rhs)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::random_spd;

    #[test]
    fn quarter_root_of_identity() {
        let r = inverse_quarter_root(&DMatrix::identity(3, 3)).unwrap();
        assert!((r - DMatrix::<f64>::identity(3, 3)).norm() < 1e-14);
    }

    #[test]
    fn quarter_root_of_diagonal() {
        let f = DMatrix::from_diagonal(&DVector::from_vec(vec![16.0, 81.0]));
        let r = inverse_quarter_root(&f).unwrap();
        assert!((r[(0, 0)] - 0.5).abs() < 1e-14);
        assert!((r[(1, 1)] - 1.0 / 3.0).abs() < 1e-14);
        assert!(r[(0, 1)].abs() < 1e-14);
    }

    #[test]
    fn quarter_root_reconstructs_inverse() {
        for seed in 0..10 {
            let f = random_spd(5, seed);
            let r = inverse_quarter_root(&f).unwrap();
            let r4 = &r * &r * &r * &r;
            let err = (r4 * &f - DMatrix::<f64>::identity(5, 5)).norm();
            assert!(err < 1e-8, "seed {seed}: {err}");
            assert!((&r - r.transpose()).norm() < 1e-14);
            assert!(min_eigenvalue(&r) > 0.0);
        }
    }

    #[test]
    fn non_pd_is_rejected() {
        let f = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, -1.0]));
        assert!(matches!(
            inverse_quarter_root(&f),
            Err(UnlearnError::SingularCurvature { min_eigenvalue }) if min_eigenvalue < 0.0
        ));
        let z = DMatrix::<f64>::zeros(2, 2);
        assert!(solve_spd(&z, &DVector::zeros(2)).is_err());
    }

    #[test]
    fn spd_solve_round_trips() {
        let f = random_spd(6, 3);
        let x = DVector::from_fn(6, |i, _| i as f64 - 2.5);
        let b = &f * &x;
        let y = solve_spd(&f, &b).unwrap();
        assert!((y - x).norm() < 1e-10);
    }
}
