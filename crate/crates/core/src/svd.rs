//! Economy-size SVD factors and the pairwise factor merge.
//!
//! `SvdFactors` keeps only the left singular vectors `U` and the singular
//! values `S` of a factorization `A = U S V^T`; the right singular vectors
//! are never needed here and are discarded at the source. Two factor sets
//! over the same row space can be merged: the scaled products
//! `U_a diag(S_a)` and `U_b diag(S_b)` are concatenated column-wise and
//! re-factorized, which reproduces the singular values and left singular
//! vectors of the column-concatenated source matrices. That identity is
//! what lets a coordinator assemble a global factorization from per-client
//! pieces without ever seeing the underlying data.

use ndarray::{Array1, Array2, ArrayView2};

use crate::error::{Error, Result};

/// Left singular vectors and singular values of an economy-size SVD.
///
/// Invariants, maintained by every constructor:
/// - columns of `u` are orthonormal,
/// - `s` is non-negative and sorted non-increasing,
/// - `u.ncols() == s.len() == rank`.
///
/// The sign of each `u` column is arbitrary. Consumers must only use `U`
/// in sign-cancelling forms such as `U g(S) U^T`.
#[derive(Debug, Clone, PartialEq)]
pub struct SvdFactors {
    u: Array2<f64>,
    s: Array1<f64>,
}

impl SvdFactors {
    /// A rank-zero factor set over `num_rows` rows.
    pub fn empty(num_rows: usize) -> Self {
        Self {
            u: Array2::zeros((num_rows, 0)),
            s: Array1::zeros(0),
        }
    }

    /// Reassembles factors from a scaled-column product `U diag(S)`.
    ///
    /// The singular values are the column norms and `U` is the column-wise
    /// normalization, so the caller must pass a genuine product of
    /// orthonormal columns by non-negative scales. Columns are re-sorted by
    /// norm and zero columns are dropped.
    pub fn from_scaled_columns(us: ArrayView2<'_, f64>) -> Result<Self> {
        if us.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain(
                "scaled-column factor contains a non-finite entry".into(),
            ));
        }
        let mut cols: Vec<(f64, usize)> = (0..us.ncols())
            .map(|j| (us.column(j).dot(&us.column(j)).sqrt(), j))
            .filter(|(norm, _)| *norm > 0.0)
            .collect();
        cols.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());

        let rank = cols.len();
        let mut u = Array2::zeros((us.nrows(), rank));
        let mut s = Array1::zeros(rank);
        for (k, (norm, j)) in cols.into_iter().enumerate() {
            let scaled = us.column(j).mapv(|v| v / norm);
            u.column_mut(k).assign(&scaled);
            s[k] = norm;
        }
        Ok(Self { u, s })
    }

    pub fn num_rows(&self) -> usize {
        self.u.nrows()
    }

    /// Number of retained singular values.
    pub fn rank(&self) -> usize {
        self.s.len()
    }

    pub fn u(&self) -> &Array2<f64> {
        &self.u
    }

    pub fn singular_values(&self) -> &Array1<f64> {
        &self.s
    }

    /// The scaled product `U diag(S)`, the form factors travel in.
    pub fn product(&self) -> Array2<f64> {
        let mut out = self.u.clone();
        for (j, mut col) in out.columns_mut().into_iter().enumerate() {
            col.mapv_inplace(|v| v * self.s[j]);
        }
        out
    }
}

/// Economy-size SVD of `a`, keeping singular values above the truncation
/// threshold `max(nrows, ncols) * eps * s_max` together with the matching
/// columns of `U`. The right singular vectors are not computed.
pub fn economy_svd(a: ArrayView2<'_, f64>) -> Result<SvdFactors> {
    let (rows, cols) = a.dim();
    if rows == 0 || cols == 0 {
        return Err(Error::Argument(format!(
            "cannot factorize an empty matrix ({rows}x{cols})"
        )));
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("matrix contains a non-finite entry".into()));
    }

    // a.t() iterates column-major over `a`, which is the fill order
    // nalgebra expects.
    let m = nalgebra::DMatrix::from_iterator(rows, cols, a.t().iter().copied());
    let svd = m
        .try_svd(true, false, f64::EPSILON, 10_000)
        .ok_or_else(|| Error::Numeric("singular value decomposition did not converge".into()))?;
    let u = svd.u.expect("u requested");
    let sv = svd.singular_values;

    let s_max = sv.iter().fold(0.0f64, |acc, &v| acc.max(v));
    let tau = rows.max(cols) as f64 * f64::EPSILON * s_max;
    let rank = sv.iter().take_while(|&&v| v > tau).count();

    let mut u_out = Array2::zeros((rows, rank));
    let mut s_out = Array1::zeros(rank);
    for j in 0..rank {
        s_out[j] = sv[j];
        for i in 0..rows {
            u_out[[i, j]] = u[(i, j)];
        }
    }
    Ok(SvdFactors { u: u_out, s: s_out })
}

/// Merges two factor sets over the same row space.
///
/// Equivalent to the economy SVD of the column concatenation of the two
/// source matrices, computed from their factors alone. Rank-zero inputs
/// act as the identity and are returned unchanged from the other side.
pub fn merge_svd(left: &SvdFactors, right: &SvdFactors) -> Result<SvdFactors> {
    if left.num_rows() != right.num_rows() {
        return Err(Error::Shape(format!(
            "cannot merge factors with {} rows into factors with {} rows",
            right.num_rows(),
            left.num_rows()
        )));
    }
    if right.rank() == 0 {
        return Ok(left.clone());
    }
    if left.rank() == 0 {
        return Ok(right.clone());
    }

    let rows = left.num_rows();
    let mut stacked = Array2::zeros((rows, left.rank() + right.rank()));
    stacked
        .slice_mut(ndarray::s![.., ..left.rank()])
        .assign(&left.product());
    stacked
        .slice_mut(ndarray::s![.., left.rank()..])
        .assign(&right.product());
    economy_svd(stacked.view())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::arr2;

    #[test]
    fn identity_singular_values() {
        let f = economy_svd(arr2(&[[1.0, 0.0], [0.0, 1.0]]).view()).unwrap();
        assert_eq!(f.rank(), 2);
        assert_abs_diff_eq!(f.singular_values()[0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(f.singular_values()[1], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn column_vector_norm() {
        let f = economy_svd(arr2(&[[3.0], [4.0]]).view()).unwrap();
        assert_eq!(f.rank(), 1);
        assert_abs_diff_eq!(f.singular_values()[0], 5.0, epsilon = 1e-12);
    }

    #[test]
    fn empty_matrix_rejected() {
        assert!(economy_svd(Array2::zeros((0, 3)).view()).is_err());
        assert!(economy_svd(Array2::zeros((3, 0)).view()).is_err());
    }

    #[test]
    fn non_finite_rejected() {
        assert!(economy_svd(arr2(&[[1.0, f64::NAN]]).view()).is_err());
    }

    #[test]
    fn zero_matrix_has_rank_zero() {
        let f = economy_svd(Array2::zeros((4, 2)).view()).unwrap();
        assert_eq!(f.rank(), 0);
        assert_eq!(f.num_rows(), 4);
    }

    #[test]
    fn rank_deficiency_truncated() {
        // two identical columns plus a zero column: rank 1
        let a = arr2(&[[1.0, 1.0, 0.0], [2.0, 2.0, 0.0], [3.0, 3.0, 0.0]]);
        let f = economy_svd(a.view()).unwrap();
        assert_eq!(f.rank(), 1);
        let expected = (2.0f64 * (1.0 + 4.0 + 9.0)).sqrt();
        assert_abs_diff_eq!(f.singular_values()[0], expected, epsilon = 1e-10);
    }

    #[test]
    fn merge_with_rank_zero_is_identity() {
        let f = economy_svd(arr2(&[[1.0, 2.0], [0.5, -1.0], [3.0, 0.0]]).view()).unwrap();
        let z = SvdFactors::empty(3);
        let merged = merge_svd(&f, &z).unwrap();
        assert_eq!(merged.singular_values(), f.singular_values());
        let merged = merge_svd(&z, &f).unwrap();
        assert_eq!(merged.singular_values(), f.singular_values());
    }

    #[test]
    fn merge_row_mismatch_rejected() {
        let a = economy_svd(arr2(&[[1.0], [2.0]]).view()).unwrap();
        let b = economy_svd(arr2(&[[1.0], [2.0], [3.0]]).view()).unwrap();
        assert!(matches!(merge_svd(&a, &b), Err(Error::Shape(_))));
    }

    #[test]
    fn merge_doubles_frobenius_energy() {
        let a = arr2(&[[1.0, 2.0, -1.0], [0.0, 1.5, 2.5]]);
        let f = economy_svd(a.view()).unwrap();
        let merged = merge_svd(&f, &f).unwrap();
        let energy: f64 = f.singular_values().iter().map(|s| s * s).sum();
        let merged_energy: f64 = merged.singular_values().iter().map(|s| s * s).sum();
        assert_abs_diff_eq!(merged_energy, 2.0 * energy, epsilon = 1e-9 * merged_energy);
    }

    #[test]
    fn scaled_column_round_trip() {
        let a = arr2(&[[2.0, 1.0], [0.0, 3.0], [1.0, -1.0]]);
        let f = economy_svd(a.view()).unwrap();
        let rebuilt = SvdFactors::from_scaled_columns(f.product().view()).unwrap();
        assert_eq!(rebuilt.rank(), f.rank());
        for j in 0..f.rank() {
            assert_abs_diff_eq!(
                rebuilt.singular_values()[j],
                f.singular_values()[j],
                epsilon = 1e-12
            );
        }
    }

    #[test]
    fn u_columns_orthonormal() {
        let a = arr2(&[
            [1.0, 2.0, 3.0, 4.0],
            [0.5, -1.0, 2.0, 0.0],
            [3.0, 0.0, -2.0, 1.0],
        ]);
        let f = economy_svd(a.view()).unwrap();
        let gram = f.u().t().dot(f.u());
        for i in 0..f.rank() {
            for j in 0..f.rank() {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert_abs_diff_eq!(gram[[i, j]], expect, epsilon = 1e-10);
            }
        }
    }
}
