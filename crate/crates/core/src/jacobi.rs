//! Cyclic Jacobi eigensolver for small Hermitian matrices.
//!
//! Each rotation first removes the phase of the pivot `a_pq` and then applies the classical
//! real rotation, so the iteration never leaves the Hermitian class.

use num_complex::Complex64;

use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct HermitianEigen {
    /// Eigenvalues in descending order.
    pub values: Vec<f64>,
    /// `vectors[k]` is the unit eigenvector belonging to `values[k]`.
    pub vectors: Vec<Vec<Complex64>>,
    pub sweeps: usize,
    /// Frobenius norm of the remaining off-diagonal part.
    pub off_norm: f64,
}

fn off_diagonal_norm(a: &[Vec<Complex64>]) -> f64 {
    let n = a.len();
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                s += a[i][j].norm_sqr();
            }
        }
    }
    s.sqrt()
}

/// Diagonalizes `a` until the off-diagonal Frobenius norm drops below `tol`.
///
/// # Input
/// `a` must be square and Hermitian up to rounding; the strictly lower part is ignored.
///
/// # Output
/// Eigenvalues sorted descending with matching eigenvectors.
pub fn hermitian_eigen(a: &[Vec<Complex64>], tol: f64, max_sweeps: usize) -> Result<HermitianEigen> {
    let n = a.len();
    if a.iter().any(|row| row.len() != n) {
        return Err(Error::InvalidDomain("matrix is not square".into()));
    }
    let mut m: Vec<Vec<Complex64>> = vec![vec![Complex64::new(0.0, 0.0); n]; n];
    for i in 0..n {
        m[i][i] = Complex64::new(a[i][i].re, 0.0);
        for j in (i + 1)..n {
            m[i][j] = a[i][j];
            m[j][i] = a[i][j].conj();
        }
    }
    let mut v: Vec<Vec<Complex64>> = (0..n)
        .map(|i| (0..n).map(|j| Complex64::new(if i == j { 1.0 } else { 0.0 }, 0.0)).collect())
        .collect();

    let mut sweeps = 0;
    let mut off = off_diagonal_norm(&m);
    while off > tol && sweeps < max_sweeps {
        sweeps += 1;
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[p][q];
                let mag = apq.norm();
                if mag == 0.0 {
                    continue;
                }
                let phase = apq / mag;
                let app = m[p][p].re;
                let aqq = m[q][q].re;
                let tau = (aqq - app) / (2.0 * mag);
                let t = if tau >= 0.0 {
                    1.0 / (tau + (1.0 + tau * tau).sqrt())
                } else {
                    -1.0 / (-tau + (1.0 + tau * tau).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                // Columns p, q of the rotation: (phase*c, -s) and (phase*s, c).
                let jpp = phase * c;
                let jpq = phase * s;
                let jqp = Complex64::new(-s, 0.0);
                let jqq = Complex64::new(c, 0.0);
                for row in m.iter_mut() {
                    let (xp, xq) = (row[p], row[q]);
                    row[p] = xp * jpp + xq * jqp;
                    row[q] = xp * jpq + xq * jqq;
                }
                for k in 0..n {
                    let (xp, xq) = (m[p][k], m[q][k]);
                    m[p][k] = jpp.conj() * xp + jqp.conj() * xq;
                    m[q][k] = jpq.conj() * xp + jqq.conj() * xq;
                }
                m[p][q] = Complex64::new(0.0, 0.0);
                m[q][p] = Complex64::new(0.0, 0.0);
                m[p][p] = Complex64::new(m[p][p].re, 0.0);
                m[q][q] = Complex64::new(m[q][q].re, 0.0);
                for row in v.iter_mut() {
                    let (xp, xq) = (row[p], row[q]);
                    row[p] = xp * jpp + xq * jqp;
                    row[q] = xp * jpq + xq * jqq;
                }
            }
        }
        off = off_diagonal_norm(&m);
    }
    if off > tol {
        return Err(Error::PrecisionNotReached { rel_err: off, tol });
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[j][j].re.total_cmp(&m[i][i].re));
    let values = order.iter().map(|&i| m[i][i].re).collect();
    let vectors = order.iter().map(|&i| (0..n).map(|r| v[r][i]).collect()).collect();
    Ok(HermitianEigen { values, vectors, sweeps, off_norm: off })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    #[test]
    fn two_by_two_with_phase() {
        // [[2, i], [-i, 2]] has eigenvalues 3 and 1.
        let a = vec![vec![c(2.0, 0.0), c(0.0, 1.0)], vec![c(0.0, -1.0), c(2.0, 0.0)]];
        let e = hermitian_eigen(&a, 1e-14, 20).unwrap();
        assert!((e.values[0] - 3.0).abs() < 1e-14);
        assert!((e.values[1] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn reconstructs_random_matrix() {
        let n = 7;
        let mut a = vec![vec![c(0.0, 0.0); n]; n];
        let mut seed = 12345u64;
        let mut next = || {
            seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((seed >> 11) as f64) / ((1u64 << 53) as f64) - 0.5
        };
        for i in 0..n {
            a[i][i] = c(next(), 0.0);
            for j in (i + 1)..n {
                a[i][j] = c(next(), next());
                a[j][i] = a[i][j].conj();
            }
        }
        let e = hermitian_eigen(&a, 1e-13, 50).unwrap();
        for i in 0..n {
            for j in 0..n {
                let mut s = c(0.0, 0.0);
                for k in 0..n {
                    s += e.vectors[k][i] * e.values[k] * e.vectors[k][j].conj();
                }
                assert!((s - a[i][j]).norm() < 1e-12, "entry ({i},{j})");
            }
        }
        for w in e.values.windows(2) {
            assert!(w[0] >= w[1]);
        }
    }
}
