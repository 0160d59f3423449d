//! Compact singular value decomposition by one-sided (Hestenes) Jacobi.
//!
//! Columns of the input are rotated pairwise until they are mutually
//! orthogonal; the column norms are then the singular values. The method
//! is slow for large matrices but computes small singular values to high
//! relative accuracy, and every factor it returns is orthonormal to
//! working precision.

use crate::error::{Error, Result};
use crate::tensor::matrix::{dot, norm, Matrix};

/// Rotation threshold on the cosine between two columns.
pub const JACOBI_TOL: f64 = 1e-15;
/// Sweep cap before `NoConvergence` is reported.
pub const MAX_SWEEPS: usize = 100;

/// Relative size below which a singular value is treated as zero when
/// completing the left basis.
const NULL_RELATIVE: f64 = 1e-14;

/// `m = w * diag(sigma) * v^T` with `w` of size d x n, `v` of size n x n.
#[derive(Debug, Clone)]
pub struct Svd {
    pub w: Matrix,
    pub sigma: Vec<f64>,
    pub v: Matrix,
}

impl Svd {
    pub fn reconstruct(&self) -> Matrix {
        let scaled = {
            let mut w = self.w.clone();
            for r in 0..w.rows() {
                for (c, s) in self.sigma.iter().enumerate() {
                    let v = w.get(r, c) * s;
                    w.set_unchecked(r, c, v);
                }
            }
            w
        };
        scaled.matmul_t(&self.v).expect("svd factors are conformant")
    }

    /// Number of singular values above `rel_tol * sigma_max`.
    pub fn rank(&self, rel_tol: f64) -> usize {
        let max = self.sigma.first().copied().unwrap_or(0.0);
        if max == 0.0 {
            return 0;
        }
        self.sigma.iter().filter(|s| **s > rel_tol * max).count()
    }
}

/// Compact SVD of a `d x n` matrix with `d >= n`.
///
/// Singular values come back sorted in descending order. Each right
/// singular vector is signed so that its first nonzero component is
/// positive, which makes the factorization deterministic.
pub fn svd_compact(m: &Matrix) -> Result<Svd> {
    let (d, n) = m.shape();
    if !m.is_finite() {
        return Err(Error::InvalidInput("svd input has non-finite entries".into()));
    }
    if d < n {
        return Err(Error::InvalidInput(format!(
            "svd_compact needs rows >= cols, got {d}x{n}"
        )));
    }

    // Columns of `m` as contiguous rows.
    let mut cols = m.transpose();
    // Rows of `vt` are the columns of V.
    let mut vt = Matrix::identity(n);

    let mut converged = n < 2;
    let mut sweeps = 0;
    while !converged {
        if sweeps == MAX_SWEEPS {
            return Err(Error::NoConvergence {
                sweeps,
                tol: JACOBI_TOL,
            });
        }
        sweeps += 1;
        let mut rotated = false;
        for i in 0..n - 1 {
            for j in i + 1..n {
                let alpha = dot(cols.row(i), cols.row(i));
                let beta = dot(cols.row(j), cols.row(j));
                let gamma = dot(cols.row(i), cols.row(j));
                if alpha == 0.0 || beta == 0.0 {
                    continue;
                }
                if gamma.abs() <= JACOBI_TOL * (alpha.sqrt() * beta.sqrt()) {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = if zeta.abs() > 1e150 {
                    0.5 / zeta
                } else {
                    zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate_rows(&mut cols, i, j, c, s);
                rotate_rows(&mut vt, i, j, c, s);
            }
        }
        converged = !rotated;
    }

    let mut order: Vec<usize> = (0..n).collect();
    let norms: Vec<f64> = (0..n).map(|i| norm(cols.row(i))).collect();
    // Stable sort keeps ties in column order.
    order.sort_by(|a, b| norms[*b].total_cmp(&norms[*a]));

    let sigma: Vec<f64> = order.iter().map(|i| norms[*i]).collect();
    let sigma_max = sigma.first().copied().unwrap_or(0.0);

    let mut w_cols: Vec<Option<Vec<f64>>> = Vec::with_capacity(n);
    let mut v_cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    for (k, &src) in order.iter().enumerate() {
        v_cols.push(vt.row(src).to_vec());
        if sigma[k] > 0.0 && sigma[k] > NULL_RELATIVE * sigma_max {
            w_cols.push(Some(cols.row(src).iter().map(|x| x / sigma[k]).collect()));
        } else {
            w_cols.push(None);
        }
    }
    let w_cols = complete_basis(d, w_cols);

    let mut w_cols = w_cols;
    for (wc, vc) in w_cols.iter_mut().zip(v_cols.iter_mut()) {
        if let Some(first) = vc.iter().find(|x| x.abs() > 1e-12) {
            if *first < 0.0 {
                vc.iter_mut().for_each(|x| *x = -*x);
                wc.iter_mut().for_each(|x| *x = -*x);
            }
        }
    }

    Ok(Svd {
        w: Matrix::from_columns(&w_cols)?.reshaped_or_empty(d, n),
        sigma,
        v: Matrix::from_columns(&v_cols)?.reshaped_or_empty(n, n),
    })
}

fn rotate_rows(m: &mut Matrix, i: usize, j: usize, c: f64, s: f64) {
    let cols = m.cols();
    let data = m.data_mut();
    let (head, tail) = data.split_at_mut(j * cols);
    let ri = &mut head[i * cols..(i + 1) * cols];
    let rj = &mut tail[..cols];
    for (a, b) in ri.iter_mut().zip(rj.iter_mut()) {
        let x = *a;
        let y = *b;
        *a = c * x - s * y;
        *b = s * x + c * y;
    }
}

/// Fills missing columns with unit vectors orthogonal to all others. Each
/// one is the standard basis vector with the largest component outside the
/// span accepted so far (lowest index on ties), so completion never fails
/// while fewer than `d` columns are accepted.
fn complete_basis(d: usize, cols: Vec<Option<Vec<f64>>>) -> Vec<Vec<f64>> {
    let mut accepted: Vec<Vec<f64>> = cols.iter().flatten().cloned().collect();
    let residual = |i: usize, accepted: &[Vec<f64>]| {
        let mut v = vec![0.0; d];
        v[i] = 1.0;
        for _ in 0..2 {
            for u in accepted {
                let p = dot(&v, u);
                v.iter_mut().zip(u).for_each(|(x, y)| *x -= p * y);
            }
        }
        v
    };
    cols.into_iter()
        .map(|c| match c {
            Some(v) => v,
            None => {
                assert!(accepted.len() < d, "cannot complete more than {d} orthonormal columns");
                let mut best = (residual(0, &accepted), 0.0);
                best.1 = norm(&best.0);
                for i in 1..d {
                    let v = residual(i, &accepted);
                    let nv = norm(&v);
                    if nv > best.1 {
                        best = (v, nv);
                    }
                }
                let (mut v, nv) = best;
                v.iter_mut().for_each(|x| *x /= nv);
                accepted.push(v.clone());
                v
            }
        })
        .collect()
}

impl Matrix {
    // `from_columns` of an empty list yields 0x0; keep the declared shape.
    fn reshaped_or_empty(self, rows: usize, cols: usize) -> Matrix {
        if self.rows() == rows && self.cols() == cols {
            self
        } else {
            Matrix::zeros(rows, cols)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn orthonormality_error(m: &Matrix) -> f64 {
        let g = m.t_matmul(m).unwrap();
        g.sub(&Matrix::identity(m.cols())).unwrap().max_abs()
    }

    #[test]
    fn identity_has_unit_singular_values() {
        let svd = svd_compact(&Matrix::identity(3)).unwrap();
        assert_eq!(svd.sigma, vec![1.0, 1.0, 1.0]);
        let u = svd.w.matmul_t(&svd.v).unwrap();
        assert!(orthonormality_error(&u) < 1e-15);
    }

    #[test]
    fn diagonal_values_come_back_sorted() {
        let m = Matrix::diag(&[2.0, 3.0]);
        let svd = svd_compact(&m).unwrap();
        assert_eq!(svd.sigma, vec![3.0, 2.0]);
        assert!(svd.reconstruct().sub(&m).unwrap().max_abs() < 1e-15);
    }

    #[test]
    fn completion_succeeds_when_null_directions_are_nearly_spanned() {
        // Centered 64 columns in 65 dimensions: one null singular value and
        // only two free directions left for the completion to choose from.
        let (d, n) = (65, 64);
        let mut g = crate::rng::gaussian(11, &[]);
        let m = Matrix::new(d, n, g.vector(d * n)).unwrap();
        let centered = m.matmul(&Matrix::centering(n)).unwrap();
        let svd = svd_compact(&centered).unwrap();
        assert_eq!(svd.rank(1e-9), n - 1);
        assert!(orthonormality_error(&svd.w) < 1e-10);
    }

    #[test]
    fn rank_deficient_input_gets_complete_left_basis() {
        // Two identical columns plus a zero column.
        let m = Matrix::new(4, 3, vec![1.0, 1.0, 0.0, 2.0, 2.0, 0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 0.0]).unwrap();
        let svd = svd_compact(&m).unwrap();
        assert_eq!(svd.rank(1e-12), 1);
        assert!(orthonormality_error(&svd.w) < 1e-12);
        assert!(orthonormality_error(&svd.v) < 1e-12);
        assert!(svd.reconstruct().sub(&m).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn wide_input_rejected() {
        assert!(matches!(svd_compact(&Matrix::zeros(2, 3)), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn zero_matrix_is_handled() {
        let svd = svd_compact(&Matrix::zeros(3, 2)).unwrap();
        assert_eq!(svd.sigma, vec![0.0, 0.0]);
        assert!(orthonormality_error(&svd.w) < 1e-15);
    }

    #[test]
    fn right_vectors_have_positive_leading_entry() {
        let m = Matrix::new(3, 2, vec![-1.0, 2.0, 0.5, -3.0, 4.0, 1.0]).unwrap();
        let svd = svd_compact(&m).unwrap();
        for c in 0..2 {
            let col = svd.v.column(c);
            let first = col.iter().find(|x| x.abs() > 1e-12).unwrap();
            assert!(*first > 0.0);
        }
    }
}
