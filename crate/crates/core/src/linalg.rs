//! Small dense symmetric solves used by the weighted least-squares steps.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};

/// Reciprocal-condition threshold below which a system is treated as singular.
pub const RCOND_MIN: f64 = 1e-12;

/// Cholesky factor of a Jacobi-scaled symmetric positive-definite matrix.
///
/// `A = D S D` with `D = diag(sqrt(A_ii))`; the factor is taken on `S`, so the
/// condition estimate does not depend on the units of the regressors.
pub struct SpdFactor {
    chol: Cholesky<f64, Dyn>,
    inv_scale: DVector<f64>,
    rcond: f64,
}

impl SpdFactor {
    /// Factorizes `a`; returns the reciprocal condition estimate as the error
    /// when the matrix is not positive definite or is too ill-conditioned.
    pub fn new(a: &DMatrix<f64>) -> Result<Self, f64> {
        let n = a.nrows();
        let mut inv_scale = DVector::zeros(n);
        for i in 0..n {
            let d = a[(i, i)];
            if !(d > 0.0) || !d.is_finite() {
                return Err(0.0);
            }
            inv_scale[i] = 1.0 / d.sqrt();
        }
        let mut scaled = a.clone();
        for i in 0..n {
            for j in 0..n {
                scaled[(i, j)] *= inv_scale[i] * inv_scale[j];
            }
        }
        let chol = Cholesky::new(scaled).ok_or(0.0)?;
        let l = chol.l_dirty();
        let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
        for i in 0..n {
            let v = l[(i, i)].abs();
            lo = lo.min(v);
            hi = hi.max(v);
        }
        let rcond = if n == 0 { 1.0 } else { (lo / hi).powi(2) };
        if !(rcond >= RCOND_MIN) {
            return Err(rcond);
        }
        Ok(Self {
            chol,
            inv_scale,
            rcond,
        })
    }

    pub fn rcond(&self) -> f64 {
        self.rcond
    }

    /// Solves `A X = B`.
    pub fn solve(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut rhs = b.clone();
        for i in 0..rhs.nrows() {
            let s = self.inv_scale[i];
            rhs.row_mut(i).iter_mut().for_each(|v| *v *= s);
        }
        self.chol.solve_mut(&mut rhs);
        for i in 0..rhs.nrows() {
            let s = self.inv_scale[i];
            rhs.row_mut(i).iter_mut().for_each(|v| *v *= s);
        }
        rhs
    }

    pub fn solve_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        let mut rhs = b.component_mul(&self.inv_scale);
        self.chol.solve_mut(&mut rhs);
        rhs.component_mul(&self.inv_scale)
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        self.solve(&DMatrix::identity(self.inv_scale.len(), self.inv_scale.len()))
    }
}

/// Symmetric inverse square root via the eigendecomposition. `None` when a
/// non-positive eigenvalue is met.
pub fn sym_inv_sqrt(a: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let sym = (a + a.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    if eig.eigenvalues.iter().any(|&l| !(l > 0.0)) {
        return None;
    }
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| 1.0 / l.sqrt()));
    Some(&eig.eigenvectors * d * eig.eigenvectors.transpose())
}

/// Symmetrizes in place (averages with the transpose).
pub fn symmetrize(a: &mut DMatrix<f64>) {
    let t = a.transpose();
    *a += t;
    *a *= 0.5;
}

/// Row-major `n x n` slice into a matrix.
pub fn square_from_slice(values: &[f64], n: usize) -> DMatrix<f64> {
    DMatrix::from_row_slice(n, n, values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn solve_matches_inverse() {
        let a = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 0.5, 1.0, 3.0, 0.2, 0.5, 0.2, 2.0]);
        let f = SpdFactor::new(&a).unwrap();
        let b = DVector::from_vec(vec![1.0, -2.0, 0.5]);
        let x = f.solve_vec(&b);
        let direct = a.clone().try_inverse().unwrap() * &b;
        for i in 0..3 {
            assert_relative_eq!(x[i], direct[i], epsilon = 1e-13);
        }
        let inv = f.inverse();
        assert_relative_eq!((inv * &a - DMatrix::identity(3, 3)).norm(), 0.0, epsilon = 1e-13);
    }

    #[test]
    fn scale_free_condition() {
        let a = DMatrix::from_row_slice(2, 2, &[1e-10, 0.0, 0.0, 1e10]);
        let f = SpdFactor::new(&a).unwrap();
        assert_relative_eq!(f.rcond(), 1.0, epsilon = 1e-12);
        let singular = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        assert!(SpdFactor::new(&singular).is_err());
        assert!(SpdFactor::new(&DMatrix::zeros(1, 1)).is_err());
    }

    #[test]
    fn inverse_square_root() {
        let v = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 0.5]);
        let r = sym_inv_sqrt(&v).unwrap();
        let check = &r * &r * &v;
        assert_relative_eq!((check - DMatrix::identity(2, 2)).norm(), 0.0, epsilon = 1e-8);
    }
}
