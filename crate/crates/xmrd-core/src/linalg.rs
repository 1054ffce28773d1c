//! Dense symmetric eigendecomposition and singular value decomposition.
//!
//! Both routines are cyclic Jacobi iterations: rotation-based, deterministic,
//! and generic over the scalar type. They target the small covariance and
//! coupling matrices produced by the correlation analysis (dimensions in the
//! tens to low hundreds), not large-scale factorizations.

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};
use crate::scalar::{cast, Scalar};

const MAX_SWEEPS: usize = 64;

/// Eigendecomposition of a symmetric matrix: `a = vectors * diag(values) * vectors^T`.
///
/// `values` are sorted in descending order; `vectors` holds the matching
/// eigenvectors as columns and is orthogonal.
#[derive(Debug, Clone)]
pub struct SymEigen<F> {
    pub values: Array1<F>,
    pub vectors: Array2<F>,
}

/// Thin singular value decomposition: `a = u * diag(s) * vt` with
/// `k = min(m, n)` columns in `u`, singular values sorted in descending
/// order, and orthonormal `u` columns and `vt` rows.
#[derive(Debug, Clone)]
pub struct Svd<F> {
    pub u: Array2<F>,
    pub s: Array1<F>,
    pub vt: Array2<F>,
}

/// Jacobi eigendecomposition of a symmetric matrix.
///
/// The input is symmetrized as `(a + a^T) / 2` before iterating, so tiny
/// asymmetries from accumulated rounding are tolerated. Fails on
/// non-square input or if the rotations do not converge.
pub fn sym_eigen<F: Scalar>(a: &Array2<F>) -> Result<SymEigen<F>> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::ShapeMismatch {
            context: "sym_eigen".into(),
            expected: format!("{n}x{n}"),
            actual: format!("{}x{}", a.nrows(), a.ncols()),
        });
    }
    let mut m = symmetrize(a);
    let mut v = Array2::<F>::eye(n);
    if n < 2 {
        return Ok(sorted_eigen(m.diag().to_owned(), v));
    }

    let norm = frobenius(&m);
    let tol = F::convergence_tol() * norm.max(F::min_positive_value());
    let mut converged = false;
    for _ in 0..MAX_SWEEPS {
        if off_diagonal_norm(&m) <= tol {
            converged = true;
            break;
        }
        for p in 0..n - 1 {
            for q in p + 1..n {
                let apq = m[[p, q]];
                if apq == F::zero() {
                    continue;
                }
                let (c, s, t) = rotation(m[[p, p]], m[[q, q]], apq);
                m[[p, p]] = m[[p, p]] - t * apq;
                m[[q, q]] = m[[q, q]] + t * apq;
                m[[p, q]] = F::zero();
                m[[q, p]] = F::zero();
                for k in 0..n {
                    if k == p || k == q {
                        continue;
                    }
                    let akp = m[[k, p]];
                    let akq = m[[k, q]];
                    m[[k, p]] = c * akp - s * akq;
                    m[[p, k]] = m[[k, p]];
                    m[[k, q]] = s * akp + c * akq;
                    m[[q, k]] = m[[k, q]];
                }
                rotate_columns(&mut v, p, q, c, s);
            }
        }
    }
    if !converged && off_diagonal_norm(&m) > tol {
        return Err(Error::NoConvergence {
            routine: "jacobi eigendecomposition".into(),
            sweeps: MAX_SWEEPS,
        });
    }
    Ok(sorted_eigen(m.diag().to_owned(), v))
}

/// One-sided Jacobi singular value decomposition.
///
/// Works on any rectangular matrix; wide inputs are handled by decomposing
/// the transpose. Zero singular values get orthonormal `u` columns via
/// completion, so `u^T u = I` holds even for rank-deficient input.
pub fn svd<F: Scalar>(a: &Array2<F>) -> Result<Svd<F>> {
    if a.nrows() >= a.ncols() {
        svd_tall(a)
    } else {
        let t = svd_tall(&a.t().to_owned())?;
        Ok(Svd {
            u: t.vt.t().to_owned(),
            s: t.s,
            vt: t.u.t().to_owned(),
        })
    }
}

fn svd_tall<F: Scalar>(a: &Array2<F>) -> Result<Svd<F>> {
    let (m, n) = (a.nrows(), a.ncols());
    debug_assert!(m >= n);
    let mut g = a.clone();
    let mut v = Array2::<F>::eye(n);
    let tol = F::convergence_tol();

    if n > 1 {
        let mut converged = false;
        for _ in 0..MAX_SWEEPS {
            let mut rotated = false;
            for p in 0..n - 1 {
                for q in p + 1..n {
                    let mut alpha = F::zero();
                    let mut beta = F::zero();
                    let mut gamma = F::zero();
                    for k in 0..m {
                        let gp = g[[k, p]];
                        let gq = g[[k, q]];
                        alpha = alpha + gp * gp;
                        beta = beta + gq * gq;
                        gamma = gamma + gp * gq;
                    }
                    if gamma == F::zero() || gamma.abs() <= tol * (alpha * beta).sqrt() {
                        continue;
                    }
                    rotated = true;
                    let (c, s, _) = rotation(alpha, beta, gamma);
                    rotate_columns(&mut g, p, q, c, s);
                    rotate_columns(&mut v, p, q, c, s);
                }
            }
            if !rotated {
                converged = true;
                break;
            }
        }
        if !converged {
            return Err(Error::NoConvergence {
                routine: "jacobi svd".into(),
                sweeps: MAX_SWEEPS,
            });
        }
    }

    // Column norms are the singular values; sort descending.
    let mut order: Vec<usize> = (0..n).collect();
    let norms: Vec<F> = (0..n)
        .map(|j| g.column(j).iter().map(|&x| x * x).sum::<F>().sqrt())
        .collect();
    order.sort_by(|&i, &j| norms[j].partial_cmp(&norms[i]).expect("finite norms"));

    let mut s = Array1::<F>::zeros(n);
    let mut u = Array2::<F>::zeros((m, n));
    let mut vt = Array2::<F>::zeros((n, n));
    let sigma_max = norms[order[0]];
    let cutoff = sigma_max * cast::<F>(m as f64) * F::epsilon();
    let mut needs_fill = Vec::new();
    for (rank, &j) in order.iter().enumerate() {
        vt.row_mut(rank).assign(&v.column(j));
        s[rank] = norms[j];
        if norms[j] > cutoff && norms[j] > F::zero() {
            let inv = F::one() / norms[j];
            for k in 0..m {
                u[[k, rank]] = g[[k, j]] * inv;
            }
        } else {
            s[rank] = norms[j];
            needs_fill.push(rank);
        }
    }
    if !needs_fill.is_empty() {
        complete_orthonormal(&mut u, &needs_fill)?;
    }
    Ok(Svd { u, s, vt })
}

/// Fills the listed columns of `u` with unit vectors orthogonal to all
/// other columns, drawn from the standard basis by Gram-Schmidt.
fn complete_orthonormal<F: Scalar>(u: &mut Array2<F>, fill: &[usize]) -> Result<()> {
    let (m, n) = (u.nrows(), u.ncols());
    let mut filled: Vec<usize> = (0..n).filter(|j| !fill.contains(j)).collect();
    let mut next_basis = 0usize;
    for &col in fill {
        let mut placed = false;
        while next_basis < m {
            let mut cand = Array1::<F>::zeros(m);
            cand[next_basis] = F::one();
            next_basis += 1;
            for &j in &filled {
                let dot = (0..m).map(|k| cand[k] * u[[k, j]]).sum::<F>();
                for k in 0..m {
                    cand[k] = cand[k] - dot * u[[k, j]];
                }
            }
            let norm = cand.iter().map(|&x| x * x).sum::<F>().sqrt();
            if norm > cast::<F>(0.5) {
                let inv = F::one() / norm;
                for k in 0..m {
                    u[[k, col]] = cand[k] * inv;
                }
                filled.push(col);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::NoConvergence {
                routine: "orthonormal completion".into(),
                sweeps: m,
            });
        }
    }
    Ok(())
}

/// Stable Jacobi rotation for the 2x2 subproblem: returns `(cos, sin, tan)`.
fn rotation<F: Scalar>(app: F, aqq: F, apq: F) -> (F, F, F) {
    let theta = (aqq - app) / (apq * cast::<F>(2.0));
    let t = if theta >= F::zero() {
        F::one() / (theta + (theta * theta + F::one()).sqrt())
    } else {
        -F::one() / (-theta + (theta * theta + F::one()).sqrt())
    };
    let c = F::one() / (t * t + F::one()).sqrt();
    (c, t * c, t)
}

fn rotate_columns<F: Scalar>(m: &mut Array2<F>, p: usize, q: usize, c: F, s: F) {
    for k in 0..m.nrows() {
        let kp = m[[k, p]];
        let kq = m[[k, q]];
        m[[k, p]] = c * kp - s * kq;
        m[[k, q]] = s * kp + c * kq;
    }
}

fn symmetrize<F: Scalar>(a: &Array2<F>) -> Array2<F> {
    let half = cast::<F>(0.5);
    let mut out = a.clone();
    for i in 0..a.nrows() {
        for j in 0..a.ncols() {
            out[[i, j]] = (a[[i, j]] + a[[j, i]]) * half;
        }
    }
    out
}

fn frobenius<F: Scalar>(a: &Array2<F>) -> F {
    a.iter().map(|&x| x * x).sum::<F>().sqrt()
}

fn off_diagonal_norm<F: Scalar>(a: &Array2<F>) -> F {
    let mut acc = F::zero();
    for i in 0..a.nrows() {
        for j in 0..a.ncols() {
            if i != j {
                acc = acc + a[[i, j]] * a[[i, j]];
            }
        }
    }
    acc.sqrt()
}

fn sorted_eigen<F: Scalar>(values: Array1<F>, vectors: Array2<F>) -> SymEigen<F> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| values[j].partial_cmp(&values[i]).expect("finite eigenvalues"));
    let mut sv = Array1::<F>::zeros(n);
    let mut sm = Array2::<F>::zeros(vectors.dim());
    for (rank, &j) in order.iter().enumerate() {
        sv[rank] = values[j];
        sm.column_mut(rank).assign(&vectors.column(j));
    }
    SymEigen {
        values: sv,
        vectors: sm,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, m: usize, n: usize) -> Array2<f64> {
        Array2::from_shape_fn((m, n), |_| rng.random_range(-1.0..1.0))
    }

    fn random_symmetric(rng: &mut ChaCha8Rng, n: usize) -> Array2<f64> {
        let a = random_matrix(rng, n, n);
        &a + &a.t()
    }

    fn max_abs_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
        a.iter()
            .zip(b.iter())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn eigen_of_diagonal_is_exact() {
        let a = array![[4.0, 0.0], [0.0, 9.0]];
        let e = sym_eigen(&a).unwrap();
        assert_eq!(e.values[0], 9.0);
        assert_eq!(e.values[1], 4.0);
    }

    #[test]
    fn eigen_reconstructs_random_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for n in [1usize, 2, 3, 5, 8, 13] {
            let a = random_symmetric(&mut rng, n);
            let e = sym_eigen(&a).unwrap();
            let recon = e.vectors.dot(&Array2::from_diag(&e.values)).dot(&e.vectors.t());
            assert!(max_abs_diff(&a, &recon) < 1e-12, "n={n}");
            let gram = e.vectors.t().dot(&e.vectors);
            assert!(max_abs_diff(&gram, &Array2::eye(n)) < 1e-13, "n={n}");
            for i in 1..n {
                assert!(e.values[i - 1] >= e.values[i]);
            }
        }
    }

    #[test]
    fn eigen_matches_external_solver() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for n in [2usize, 4, 7, 10] {
            let a = random_symmetric(&mut rng, n);
            let mine = sym_eigen(&a).unwrap();
            let na = nalgebra::DMatrix::from_fn(n, n, |i, j| a[[i, j]]);
            let mut theirs: Vec<f64> = na.symmetric_eigen().eigenvalues.iter().copied().collect();
            theirs.sort_by(|x, y| y.partial_cmp(x).unwrap());
            for (i, &t) in theirs.iter().enumerate() {
                assert!((mine.values[i] - t).abs() < 1e-11, "n={n} i={i}");
            }
        }
    }

    #[test]
    fn eigen_works_in_single_precision() {
        let a = array![[2.0f32, 1.0], [1.0, 2.0]];
        let e = sym_eigen(&a).unwrap();
        assert!((e.values[0] - 3.0).abs() < 1e-5);
        assert!((e.values[1] - 1.0).abs() < 1e-5);
    }

    #[test]
    fn eigen_rejects_rectangular_input() {
        let a = Array2::<f64>::zeros((2, 3));
        assert!(matches!(
            sym_eigen(&a),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn svd_of_diagonal_matrix() {
        let a: Array2<f64> = array![[3.0, 0.0], [0.0, -2.0]];
        let d = svd(&a).unwrap();
        assert!((d.s[0] - 3.0).abs() < 1e-14);
        assert!((d.s[1] - 2.0).abs() < 1e-14);
    }

    #[test]
    fn svd_reconstructs_random_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for (m, n) in [(5usize, 3usize), (3, 5), (6, 6), (1, 4), (4, 1)] {
            let a = random_matrix(&mut rng, m, n);
            let d = svd(&a).unwrap();
            let k = m.min(n);
            assert_eq!(d.u.dim(), (m, k));
            assert_eq!(d.s.len(), k);
            assert_eq!(d.vt.dim(), (k, n));
            let recon = d.u.dot(&Array2::from_diag(&d.s)).dot(&d.vt);
            assert!(max_abs_diff(&a, &recon) < 1e-12, "{m}x{n}");
            let gram = d.u.t().dot(&d.u);
            assert!(max_abs_diff(&gram, &Array2::eye(k)) < 1e-13, "{m}x{n}");
        }
    }

    #[test]
    fn svd_matches_external_solver() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        for (m, n) in [(6usize, 4usize), (4, 6), (5, 5)] {
            let a = random_matrix(&mut rng, m, n);
            let mine = svd(&a).unwrap();
            let na = nalgebra::DMatrix::from_fn(m, n, |i, j| a[[i, j]]);
            let mut theirs: Vec<f64> = na.svd(false, false).singular_values.iter().copied().collect();
            theirs.sort_by(|x, y| y.partial_cmp(x).unwrap());
            for (i, &t) in theirs.iter().enumerate() {
                assert!((mine.s[i] - t).abs() < 1e-11, "{m}x{n} i={i}");
            }
        }
    }

    #[test]
    fn svd_handles_rank_deficiency_and_zero() {
        let mut a = Array2::<f64>::zeros((4, 3));
        for i in 0..4 {
            a[[i, 0]] = (i + 1) as f64;
            a[[i, 1]] = 2.0 * (i + 1) as f64;
        }
        let d = svd(&a).unwrap();
        assert!(d.s[1] < 1e-12);
        assert!(d.s[2] < 1e-12);
        let gram = d.u.t().dot(&d.u);
        assert!(max_abs_diff(&gram, &Array2::eye(3)) < 1e-12);

        let z = Array2::<f64>::zeros((3, 2));
        let dz = svd(&z).unwrap();
        assert_eq!(dz.s[0], 0.0);
        let gram = dz.u.t().dot(&dz.u);
        assert!(max_abs_diff(&gram, &Array2::eye(2)) < 1e-12);
    }
}
