//! Small dense linear-algebra helpers used by the block solvers.

use nalgebra::{DMatrix, DVector};

/// Outcome of a bordered (KKT) solve.
#[derive(Debug, Clone)]
pub struct KktSolution {
    pub x: DVector<f64>,
    pub multipliers: DVector<f64>,
    /// Set when the factorization failed and the minimum-norm least-squares
    /// answer was used instead.
    pub degenerate: bool,
}

/// Solves `[H C^T; C 0] [x; y] = [g; e]`.
///
/// Uses LU first and falls back to an SVD pseudo-inverse on singular systems.
pub fn solve_kkt(h: &DMatrix<f64>, c: &DMatrix<f64>, g: &DVector<f64>, e: &DVector<f64>) -> KktSolution {
    let n = h.nrows();
    let m = c.nrows();
    if m == 0 {
        if let Some(chol) = h.clone().cholesky() {
            return KktSolution {
                x: chol.solve(g),
                multipliers: DVector::zeros(0),
                degenerate: false,
            };
        }
    }
    let mut k = DMatrix::zeros(n + m, n + m);
    k.view_mut((0, 0), (n, n)).copy_from(h);
    if m > 0 {
        k.view_mut((n, 0), (m, n)).copy_from(c);
        k.view_mut((0, n), (n, m)).copy_from(&c.transpose());
    }
    let mut rhs = DVector::zeros(n + m);
    rhs.rows_mut(0, n).copy_from(g);
    if m > 0 {
        rhs.rows_mut(n, m).copy_from(e);
    }
    let scale = k.amax().max(1.0);
    let lu = k.clone().lu();
    if let Some(sol) = lu.solve(&rhs) {
        if sol.iter().all(|v| v.is_finite()) {
            let resid = (&k * &sol - &rhs).amax();
            if resid <= 1e-8 * scale * (1.0 + rhs.amax()) {
                return KktSolution {
                    x: sol.rows(0, n).into_owned(),
                    multipliers: sol.rows(n, m).into_owned(),
                    degenerate: false,
                };
            }
        }
    }
    let sol = pseudo_solve(&k, &rhs);
    KktSolution {
        x: sol.rows(0, n).into_owned(),
        multipliers: sol.rows(n, m).into_owned(),
        degenerate: true,
    }
}

/// Minimum-norm least-squares solution of `a x = b`.
pub fn pseudo_solve(a: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let svd = a.clone().svd(true, true);
    let tol = svd.singular_values.max() * 1e-12 * (a.nrows().max(a.ncols()) as f64);
    svd.solve(b, tol).unwrap_or_else(|_| DVector::zeros(a.ncols()))
}

/// Largest eigenvalue of a symmetric matrix.
pub fn max_eigenvalue(a: &DMatrix<f64>) -> f64 {
    if a.nrows() == 0 {
        return 0.0;
    }
    a.clone().symmetric_eigenvalues().max()
}

pub fn min_eigenvalue(a: &DMatrix<f64>) -> f64 {
    if a.nrows() == 0 {
        return 0.0;
    }
    a.clone().symmetric_eigenvalues().min()
}

/// Orthogonal projection of `x` onto `{y : c y = e}`.
pub fn project_affine(x: &DVector<f64>, c: &DMatrix<f64>, e: &DVector<f64>) -> DVector<f64> {
    if c.nrows() == 0 {
        return x.clone();
    }
    let resid = e - c * x;
    let cct = c * c.transpose();
    let y = match cct.clone().cholesky() {
        Some(ch) => ch.solve(&resid),
        None => pseudo_solve(&cct, &resid),
    };
    x + c.transpose() * y
}

/// Orthonormal basis (as columns) of the null space of `c` with `n` columns.
pub fn null_space(c: &DMatrix<f64>, n: usize) -> DMatrix<f64> {
    if c.nrows() == 0 {
        return DMatrix::identity(n, n);
    }
    // Pad to square so the full right singular basis is available.
    let rows = c.nrows().max(n);
    let mut padded = DMatrix::zeros(rows, n);
    padded.view_mut((0, 0), (c.nrows(), n)).copy_from(c);
    let svd = padded.svd(false, true);
    let vt = svd.v_t.expect("requested");
    let smax = svd.singular_values.max().max(1e-300);
    let cols: Vec<DVector<f64>> = (0..n)
        .filter(|&k| svd.singular_values[k] <= 1e-10 * smax)
        .map(|k| vt.row(k).transpose())
        .collect();
    if cols.is_empty() {
        DMatrix::zeros(n, 0)
    } else {
        DMatrix::from_columns(&cols)
    }
}

/// Indices of a maximal linearly independent subset of rows, greedily in
/// order, using Gram-Schmidt residual norms relative to `tol`.
pub fn independent_rows(rows: &[DVector<f64>], tol: f64) -> Vec<usize> {
    let mut basis: Vec<DVector<f64>> = Vec::new();
    let mut keep = Vec::new();
    for (k, r) in rows.iter().enumerate() {
        let norm = r.norm();
        if norm == 0.0 {
            continue;
        }
        let mut v = r / norm;
        // Two passes of modified Gram-Schmidt for stability.
        for _ in 0..2 {
            for b in &basis {
                let c = b.dot(&v);
                v -= b * c;
            }
        }
        let n = v.norm();
        if n > tol {
            basis.push(v / n);
            keep.push(k);
        }
    }
    keep
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn kkt_matches_hand_solution() {
        // min x^2 + y^2 s.t. x + y = 2 -> (1, 1).
        let h = DMatrix::identity(2, 2) * 2.0;
        let c = DMatrix::from_row_slice(1, 2, &[1.0, 1.0]);
        let sol = solve_kkt(&h, &c, &DVector::zeros(2), &DVector::from_element(1, 2.0));
        assert!(!sol.degenerate);
        assert_abs_diff_eq!(sol.x, DVector::from_element(2, 1.0), epsilon = 1e-12);
    }

    #[test]
    fn kkt_singular_falls_back() {
        let h = DMatrix::zeros(2, 2);
        let c = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let sol = solve_kkt(&h, &c, &DVector::zeros(2), &DVector::from_element(2, 2.0));
        assert!(sol.degenerate);
        assert_abs_diff_eq!(sol.x, DVector::from_element(2, 1.0), epsilon = 1e-9);
    }

    #[test]
    fn projection_lands_on_set() {
        let c = DMatrix::from_row_slice(1, 3, &[1.0, 2.0, -1.0]);
        let e = DVector::from_element(1, 4.0);
        let x = DVector::from_column_slice(&[0.3, -0.2, 5.0]);
        let y = project_affine(&x, &c, &e);
        assert_abs_diff_eq!((&c * &y)[0], 4.0, epsilon = 1e-12);
    }

    #[test]
    fn null_space_is_orthogonal() {
        let c = DMatrix::from_row_slice(1, 3, &[1.0, 1.0, 0.0]);
        let z = null_space(&c, 3);
        assert_eq!(z.ncols(), 2);
        assert!((&c * &z).amax() < 1e-12);
    }

    #[test]
    fn independent_rows_drops_duplicates() {
        let rows = vec![
            DVector::from_column_slice(&[1.0, 0.0]),
            DVector::from_column_slice(&[2.0, 0.0]),
            DVector::from_column_slice(&[0.0, 1.0]),
        ];
        assert_eq!(independent_rows(&rows, 1e-10), vec![0, 2]);
    }
}
