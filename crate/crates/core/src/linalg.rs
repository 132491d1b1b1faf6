//! Small dense linear-algebra helpers shared by the constructions and
//! featurizer builders: rank-revealing SVD wrappers, minimum-norm solves,
//! and deterministic orthonormal bases/completions.

use nalgebra::{DMatrix, DVector};

/// Relative singular-value cutoff used for rank decisions and pseudo-inverses.
pub const SV_RTOL: f64 = 1e-10;

/// Numerical rank with cutoff `rtol * s_max`.
pub fn rank(m: &DMatrix<f64>, rtol: f64) -> usize {
    if m.is_empty() {
        return 0;
    }
    let sv = m.clone().singular_values();
    let smax = sv.max();
    if smax == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > rtol * smax).count()
}

/// Ratio of smallest to largest singular value (0 for rank-deficient input).
pub fn inverse_condition(m: &DMatrix<f64>) -> f64 {
    let sv = m.clone().singular_values();
    let smax = sv.max();
    if smax == 0.0 {
        return 0.0;
    }
    sv.iter().cloned().fold(f64::INFINITY, f64::min) / smax
}

/// Applies the Moore-Penrose pseudo-inverse of `m` to `rhs`, truncating
/// singular values below `rtol * s_max`.
pub fn pinv_apply(m: &DMatrix<f64>, rhs: &DVector<f64>, rtol: f64) -> DVector<f64> {
    let svd = m.clone().svd(true, true);
    let u = svd.u.as_ref().expect("svd u");
    let vt = svd.v_t.as_ref().expect("svd v_t");
    let smax = svd.singular_values.max();
    let mut y = u.transpose() * rhs;
    for (i, s) in svd.singular_values.iter().enumerate() {
        if smax > 0.0 && *s > rtol * smax {
            y[i] /= *s;
        } else {
            y[i] = 0.0;
        }
    }
    vt.transpose() * y
}

/// Full pseudo-inverse matrix with the same truncation rule.
pub fn pinv(m: &DMatrix<f64>, rtol: f64) -> DMatrix<f64> {
    let svd = m.clone().svd(true, true);
    let u = svd.u.as_ref().expect("svd u");
    let vt = svd.v_t.as_ref().expect("svd v_t");
    let smax = svd.singular_values.max();
    let mut sinv = DMatrix::zeros(vt.nrows(), u.ncols());
    for (i, s) in svd.singular_values.iter().enumerate() {
        if smax > 0.0 && *s > rtol * smax {
            sinv[(i, i)] = 1.0 / *s;
        }
    }
    vt.transpose() * sinv * u.transpose()
}

/// Orthonormal basis for the column span of `m`, ordered by singular value.
pub fn span_basis(m: &DMatrix<f64>, rtol: f64) -> DMatrix<f64> {
    let r = rank(m, rtol);
    let svd = m.clone().svd(true, false);
    let u = svd.u.as_ref().expect("svd u");
    u.columns(0, r).into_owned()
}

/// Orthonormal basis for the null space of `m` (right null vectors as columns).
pub fn null_space(m: &DMatrix<f64>, rtol: f64) -> DMatrix<f64> {
    let n = m.ncols();
    let r = rank(m, rtol);
    let svd = m.clone().svd(false, true);
    let vt = svd.v_t.as_ref().expect("svd v_t");
    // Rows of V^T past the rank span the null space; V^T from nalgebra has
    // min(nrows, ncols) rows, so complete the basis when m is wide.
    if vt.nrows() >= n {
        return vt.rows(r, n - r).transpose().into_owned();
    }
    let v = vt.transpose().into_owned();
    let head = v.columns(0, r).into_owned();
    let completion = orthonormal_completion(&head);
    completion
}

/// Deterministic orthonormal completion: columns orthogonal to the columns of
/// `basis`, spanning the rest of the ambient space. Built by projecting the
/// identity and orthonormalizing in index order.
pub fn orthonormal_completion(basis: &DMatrix<f64>) -> DMatrix<f64> {
    let dim = basis.nrows();
    let have = basis.ncols();
    let want = dim - have;
    let mut cols: Vec<DVector<f64>> = basis.column_iter().map(|c| c.into_owned()).collect();
    let mut out: Vec<DVector<f64>> = Vec::with_capacity(want);
    for i in 0..dim {
        if out.len() == want {
            break;
        }
        let mut v = DVector::zeros(dim);
        v[i] = 1.0;
        // two rounds of Gram-Schmidt for numerical orthogonality
        for _ in 0..2 {
            for c in &cols {
                let proj = c.dot(&v);
                v -= c * proj;
            }
        }
        let norm = v.norm();
        if norm > 1e-8 {
            v /= norm;
            cols.push(v.clone());
            out.push(v);
        }
    }
    assert_eq!(out.len(), want, "orthonormal completion failed");
    DMatrix::from_columns(&out)
}

/// Minimum-norm solution of `m^T x = rhs` over x in the column span of `m`.
pub fn min_norm_row_solve(m: &DMatrix<f64>, rhs: &DVector<f64>, rtol: f64) -> DVector<f64> {
    pinv_apply(&m.transpose(), rhs, rtol)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn rank_and_nullspace_of_wide_matrix() {
        // rows (1,0,0) and (0,1,0): rank 2, null space spanned by e3
        let m = DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        assert_eq!(rank(&m, SV_RTOL), 2);
        let ns = null_space(&m, SV_RTOL);
        assert_eq!(ns.ncols(), 1);
        assert_relative_eq!(ns[(2, 0)].abs(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn pinv_apply_matches_exact_inverse() {
        let m = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 0.5, 3.0]);
        let rhs = DVector::from_column_slice(&[1.0, -1.0]);
        let x = pinv_apply(&m, &rhs, SV_RTOL);
        let back = &m * &x;
        assert_relative_eq!(back[0], 1.0, epsilon = 1e-12);
        assert_relative_eq!(back[1], -1.0, epsilon = 1e-12);
    }

    #[test]
    fn completion_is_orthonormal() {
        let b = DMatrix::from_column_slice(3, 1, &[1.0 / 2f64.sqrt(), 1.0 / 2f64.sqrt(), 0.0]);
        let c = orthonormal_completion(&b);
        assert_eq!(c.ncols(), 2);
        let full = {
            let mut cols: Vec<_> = b.column_iter().map(|x| x.into_owned()).collect();
            cols.extend(c.column_iter().map(|x| x.into_owned()));
            DMatrix::from_columns(&cols)
        };
        let gram = full.transpose() * &full;
        assert_relative_eq!(gram, DMatrix::identity(3, 3), epsilon = 1e-10);
    }
}
