//! Small dense helpers on top of `ndarray`, with `nalgebra` for factorizations.

use nalgebra::DMatrix;
use ndarray::{Array1, Array2, ArrayView2};

use crate::error::{Error, Result};

pub(crate) fn to_na(m: ArrayView2<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| m[[i, j]])
}

pub(crate) fn from_na(m: &DMatrix<f64>) -> Array2<f64> {
    Array2::from_shape_fn((m.nrows(), m.ncols()), |(i, j)| m[(i, j)])
}

/// Solve `A x = b` for symmetric positive (semi-)definite `A`.
///
/// Uses Cholesky when it succeeds and falls back to an SVD least-squares
/// (minimum-norm) solve for singular systems.
pub(crate) fn solve_spd(a: &Array2<f64>, b: &Array1<f64>) -> Result<Array1<f64>> {
    let na = to_na(a.view());
    let nb = nalgebra::DVector::from_iterator(b.len(), b.iter().copied());
    let x = match na.clone().cholesky() {
        Some(ch) => ch.solve(&nb),
        None => {
            let svd = na.svd(true, true);
            let max_sv = svd.singular_values.max();
            svd.solve(&nb, max_sv * 1e-12)
                .map_err(|e| Error::Numeric(format!("svd solve failed: {e}")))?
        }
    };
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("linear solve produced non-finite values".into()));
    }
    Ok(Array1::from_iter(x.iter().copied()))
}

/// Least-squares solution of `A X = B` (minimum norm when underdetermined).
pub(crate) fn lstsq(a: &Array2<f64>, b: &Array2<f64>) -> Result<Array2<f64>> {
    let svd = to_na(a.view()).svd(true, true);
    let max_sv = svd.singular_values.max();
    let x = svd
        .solve(&to_na(b.view()), max_sv * 1e-12)
        .map_err(|e| Error::Numeric(format!("least squares failed: {e}")))?;
    Ok(from_na(&x))
}

/// Modified Gram-Schmidt on the rows of `m`, with one re-orthogonalization pass.
pub(crate) fn orthonormalize_rows(m: &mut Array2<f64>) -> Result<()> {
    for i in 0..m.nrows() {
        for _pass in 0..2 {
            for j in 0..i {
                let proj = m.row(i).dot(&m.row(j));
                let rj = m.row(j).to_owned();
                m.row_mut(i).scaled_add(-proj, &rj);
            }
        }
        let norm = m.row(i).dot(&m.row(i)).sqrt();
        if norm < 1e-10 {
            return Err(Error::Numeric("rows are linearly dependent".into()));
        }
        m.row_mut(i).mapv_inplace(|v| v / norm);
    }
    Ok(())
}

pub(crate) fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        None
    } else {
        Some(dot / (na * nb))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn gram_schmidt_gives_orthonormal_rows() {
        let mut m = array![[1.0, 1.0, 0.0], [1.0, 0.0, 1.0], [0.0, 1.0, 1.0]];
        orthonormalize_rows(&mut m).unwrap();
        let g = m.dot(&m.t());
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((g[[i, j]] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn singular_system_falls_back_to_min_norm() {
        let a = array![[1.0, 1.0], [1.0, 1.0]];
        let b = array![2.0, 2.0];
        let x = solve_spd(&a, &b).unwrap();
        assert!((x[0] - 1.0).abs() < 1e-10 && (x[1] - 1.0).abs() < 1e-10);
    }
}
