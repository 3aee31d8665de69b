//! Small dense linear-algebra helpers on top of `nalgebra`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Reciprocal condition numbers below this are treated as singular.
pub const RCOND_FLOOR: f64 = 1e-12;

/// Relative cut-off under which eigenvalues of a PSD matrix are treated as zero.
pub const EIGEN_CLAMP: f64 = 1e-10;

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub fn is_symmetric(m: &DMatrix<f64>, tol: f64) -> bool {
    if !m.is_square() {
        return false;
    }
    let scale = m.amax().max(1.0);
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            if (m[(i, j)] - m[(j, i)]).abs() > tol * scale {
                return false;
            }
        }
    }
    true
}

/// Eigen-decomposition of a symmetric matrix with eigenvalues sorted descending.
pub fn sym_eigen_desc(m: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = m.nrows();
    let eig = SymmetricEigen::new(symmetrize(m));
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut vectors = DMatrix::zeros(n, n);
    for (k, &i) in order.iter().enumerate() {
        vectors.set_column(k, &eig.eigenvectors.column(i));
    }
    (values, vectors)
}

/// Reciprocal 2-norm condition number of a symmetric matrix (0 when indefinite or zero).
pub fn rcond_sym(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 1.0;
    }
    let (vals, _) = sym_eigen_desc(m);
    let max = vals[0];
    let min = vals[vals.len() - 1];
    if max <= 0.0 || min <= 0.0 {
        0.0
    } else {
        min / max
    }
}

fn check_conditioning(m: &DMatrix<f64>, hint: &str) -> Result<()> {
    let rcond = rcond_sym(m);
    if rcond < RCOND_FLOOR {
        return Err(Error::SingularCovariance { rcond, hint: hint.to_string() });
    }
    Ok(())
}

/// Lower Cholesky factor `L` with `m = L Lᵀ`.
pub fn cholesky_lower(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    nalgebra::Cholesky::new(symmetrize(m))
        .map(|c| c.l())
        .ok_or_else(|| Error::NotPositiveDefinite(format!("{}x{} matrix has no Cholesky factor", m.nrows(), m.ncols())))
}

/// Solve `m x = b` for symmetric positive definite `m`, refusing ill-conditioned systems.
pub fn solve_spd(m: &DMatrix<f64>, b: &DVector<f64>, hint: &str) -> Result<DVector<f64>> {
    check_conditioning(m, hint)?;
    let chol = nalgebra::Cholesky::new(symmetrize(m))
        .ok_or_else(|| Error::SingularCovariance { rcond: 0.0, hint: hint.to_string() })?;
    Ok(chol.solve(b))
}

/// Inverse of a symmetric positive definite matrix, refusing ill-conditioned input.
pub fn inverse_spd(m: &DMatrix<f64>, hint: &str) -> Result<DMatrix<f64>> {
    check_conditioning(m, hint)?;
    let chol = nalgebra::Cholesky::new(symmetrize(m))
        .ok_or_else(|| Error::SingularCovariance { rcond: 0.0, hint: hint.to_string() })?;
    Ok(symmetrize(&chol.inverse()))
}

/// A factor `G` (p×k, k = numerical rank) with `m = G Gᵀ` for symmetric PSD `m`.
///
/// Eigenvalues below `EIGEN_CLAMP * max` are dropped.
pub fn psd_factor(m: &DMatrix<f64>) -> DMatrix<f64> {
    let p = m.nrows();
    let (vals, vecs) = sym_eigen_desc(m);
    let max = if p == 0 { 0.0 } else { vals[0] };
    let rank = vals.iter().take_while(|&&v| max > 0.0 && v > EIGEN_CLAMP * max).count();
    let mut g = DMatrix::zeros(p, rank);
    for k in 0..rank {
        let s = vals[k].sqrt();
        g.set_column(k, &(vecs.column(k) * s));
    }
    g
}

/// `xᵀ m x`.
pub fn quad_form(m: &DMatrix<f64>, x: &DVector<f64>) -> f64 {
    let n = x.len();
    let mut acc = 0.0;
    for j in 0..n {
        let mut col = 0.0;
        for i in 0..n {
            col += m[(i, j)] * x[i];
        }
        acc += col * x[j];
    }
    acc
}


/// Serde adapters storing matrices as arrays of rows and vectors as plain arrays.
pub mod serde_rows {
    use nalgebra::{DMatrix, DVector};
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<Vec<f64>> = m.row_iter().map(|r| r.iter().cloned().collect()).collect();
        rows.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
        let rows: Vec<Vec<f64>> = Vec::deserialize(d)?;
        let nrows = rows.len();
        let ncols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != ncols) {
            return Err(serde::de::Error::custom("ragged matrix rows"));
        }
        Ok(DMatrix::from_row_iterator(nrows, ncols, rows.into_iter().flatten()))
    }

    pub mod vector {
        use super::*;

        pub fn serialize<S: Serializer>(v: &DVector<f64>, s: S) -> Result<S::Ok, S::Error> {
            v.as_slice().serialize(s)
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DVector<f64>, D::Error> {
            Ok(DVector::from_vec(Vec::deserialize(d)?))
        }
    }
}
