use nalgebra::{DMatrix, DVector};

/// Solves `a x = b` for a symmetric matrix, trying Cholesky first and
/// falling back to LU when `a` is not numerically positive definite.
pub(crate) fn solve_symmetric(a: DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    if let Some(chol) = a.clone().cholesky() {
        return Some(chol.solve(b));
    }
    a.lu().solve(b)
}
