//! Covariance estimation and symmetric eigendecomposition.
//!
//! The eigensolver is a cyclic Jacobi iteration: adequate and robust for the
//! band counts this toolkit works with (a few hundred), and deterministic for
//! a fixed input, which the persistence and reproducibility guarantees rely
//! on.

use crate::error::{HsdrError, Result};
use crate::mat::Mat;
use crate::scalar::Scalar;

/// Default cap on Jacobi sweeps before reporting failure.
pub const DEFAULT_MAX_SWEEPS: usize = 100;

/// Absolute tolerance for the symmetry precondition of [`eigh_symmetric`].
pub const SYMMETRY_TOL: f64 = 1e-9;

/// Second-moment summary of a pixel set: sample count, mean spectrum and
/// population covariance (divisor `M`, not `M-1`).
#[derive(Debug, Clone)]
pub struct CovarianceStats<F> {
    pub count: usize,
    pub mean: Vec<F>,
    pub covariance: Mat<F>,
}

/// Eigendecomposition of a symmetric matrix. `eigenvectors` stores the
/// orthogonal matrix whose column `i` pairs with `eigenvalues[i]`; the
/// eigenvalues are sorted non-increasing.
#[derive(Debug, Clone)]
pub struct EigenDecomposition<F> {
    pub eigenvalues: Vec<F>,
    pub eigenvectors: Mat<F>,
}

impl<F: Scalar> EigenDecomposition<F> {
    /// `max |U^T U - I|`, used by invariant tests.
    pub fn orthonormality_residual(&self) -> F {
        let u = &self.eigenvectors;
        let gram = u.transpose().matmul(u);
        gram.sub(&Mat::identity(u.rows())).max_abs()
    }

    /// `max |U diag(lambda) U^T - c|`.
    pub fn reconstruction_residual(&self, c: &Mat<F>) -> F {
        let u = &self.eigenvectors;
        let n = u.rows();
        let mut scaled = u.clone();
        for i in 0..n {
            for j in 0..n {
                scaled[(i, j)] = u[(i, j)] * self.eigenvalues[j];
            }
        }
        scaled.matmul(&u.transpose()).sub(c).max_abs()
    }
}

/// Mean spectrum and population covariance of the sample rows.
pub fn covariance<F: Scalar>(samples: &Mat<F>) -> Result<CovarianceStats<F>> {
    let m = samples.rows();
    let l = samples.cols();
    if m == 0 {
        return Err(HsdrError::EmptyInput("covariance samples"));
    }
    if !samples.all_finite() {
        return Err(HsdrError::NonFinite("covariance samples".into()));
    }

    let inv_m = F::one() / F::from_usize(m).unwrap();
    let mut mean = vec![F::zero(); l];
    for row in samples.iter_rows() {
        for (acc, v) in mean.iter_mut().zip(row) {
            *acc += *v;
        }
    }
    for v in &mut mean {
        *v *= inv_m;
    }

    let mut cov = Mat::zeros(l, l);
    let mut centered = vec![F::zero(); l];
    for row in samples.iter_rows() {
        for ((c, v), mu) in centered.iter_mut().zip(row).zip(&mean) {
            *c = *v - *mu;
        }
        for i in 0..l {
            let ci = centered[i];
            let dst = &mut cov.row_mut(i)[i..];
            for (d, cj) in dst.iter_mut().zip(&centered[i..]) {
                *d += ci * *cj;
            }
        }
    }
    for i in 0..l {
        for j in i..l {
            let v = cov[(i, j)] * inv_m;
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }

    Ok(CovarianceStats {
        count: m,
        mean,
        covariance: cov,
    })
}

/// Eigendecomposition of a symmetric matrix with the default sweep cap.
pub fn eigh_symmetric<F: Scalar>(c: &Mat<F>) -> Result<EigenDecomposition<F>> {
    eigh_symmetric_with(c, DEFAULT_MAX_SWEEPS)
}

/// Cyclic Jacobi eigendecomposition.
///
/// Converges when the off-diagonal Frobenius norm drops below
/// `1e-12 * ||C||_F`. The output is deterministic: eigenvalues sorted
/// non-increasing (stable under ties) and each eigenvector's
/// largest-magnitude entry made positive, earliest index winning ties.
pub fn eigh_symmetric_with<F: Scalar>(
    c: &Mat<F>,
    max_sweeps: usize,
) -> Result<EigenDecomposition<F>> {
    if !c.is_square() || c.rows() == 0 {
        return Err(HsdrError::DimensionMismatch {
            expected: "non-empty square matrix".into(),
            actual: format!("{}x{}", c.rows(), c.cols()),
        });
    }
    if !c.all_finite() {
        return Err(HsdrError::NonFinite("eigendecomposition input".into()));
    }
    let n = c.rows();
    let sym_tol = F::of(SYMMETRY_TOL);
    for i in 0..n {
        for j in (i + 1)..n {
            let delta = (c[(i, j)] - c[(j, i)]).abs();
            if delta > sym_tol {
                return Err(HsdrError::NotSymmetric {
                    row: i,
                    col: j,
                    delta: delta.to_f64().unwrap_or(f64::INFINITY),
                });
            }
        }
    }

    let mut a = c.clone();
    let mut v: Mat<F> = Mat::identity(n);
    let tol = F::of(1e-12) * c.frobenius_norm();

    let mut converged = false;
    for _ in 0..max_sweeps {
        let mut off = F::zero();
        for p in 0..n {
            for q in (p + 1)..n {
                off += a[(p, q)] * a[(p, q)];
            }
        }
        if (off + off).sqrt() <= tol {
            converged = true;
            break;
        }

        for p in 0..(n - 1) {
            for q in (p + 1)..n {
                let apq = a[(p, q)];
                if apq == F::zero() {
                    continue;
                }
                let h = a[(q, q)] - a[(p, p)];
                // tan of the rotation angle; the guard keeps theta^2 from
                // overflowing when the diagonal gap dwarfs the off-diagonal.
                let t = if h.abs() * F::of(1e-20) > apq.abs() {
                    apq / h
                } else {
                    let theta = h / (apq + apq);
                    let mut t = F::one() / (theta.abs() + (F::one() + theta * theta).sqrt());
                    if theta < F::zero() {
                        t = -t;
                    }
                    t
                };
                let cos = F::one() / (F::one() + t * t).sqrt();
                let sin = t * cos;
                let tau = sin / (F::one() + cos);
                let tapq = t * apq;

                a[(p, p)] = a[(p, p)] - tapq;
                a[(q, q)] = a[(q, q)] + tapq;
                a[(p, q)] = F::zero();
                for r in 0..p {
                    let arp = a[(r, p)];
                    let arq = a[(r, q)];
                    a[(r, p)] = arp - sin * (arq + tau * arp);
                    a[(r, q)] = arq + sin * (arp - tau * arq);
                }
                for r in (p + 1)..q {
                    let apr = a[(p, r)];
                    let arq = a[(r, q)];
                    a[(p, r)] = apr - sin * (arq + tau * apr);
                    a[(r, q)] = arq + sin * (apr - tau * arq);
                }
                for r in (q + 1)..n {
                    let apr = a[(p, r)];
                    let aqr = a[(q, r)];
                    a[(p, r)] = apr - sin * (aqr + tau * apr);
                    a[(q, r)] = aqr + sin * (apr - tau * aqr);
                }
                for r in 0..n {
                    let vrp = v[(r, p)];
                    let vrq = v[(r, q)];
                    v[(r, p)] = vrp - sin * (vrq + tau * vrp);
                    v[(r, q)] = vrq + sin * (vrp - tau * vrq);
                }
            }
        }
    }
    if !converged {
        return Err(HsdrError::NoConvergence {
            what: "Jacobi eigendecomposition".into(),
            iterations: max_sweeps,
        });
    }

    let mut eigenvalues: Vec<F> = (0..n).map(|i| a[(i, i)]).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        eigenvalues[j]
            .partial_cmp(&eigenvalues[i])
            .expect("finite eigenvalues")
    });

    let mut vectors = Mat::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        let mut flip = false;
        let mut best = F::zero();
        for r in 0..n {
            let mag = v[(r, src)].abs();
            if mag > best {
                best = mag;
                flip = v[(r, src)] < F::zero();
            }
        }
        for r in 0..n {
            let val = v[(r, src)];
            vectors[(r, dst)] = if flip { -val } else { val };
        }
    }
    eigenvalues = order.iter().map(|&i| eigenvalues[i]).collect();

    Ok(EigenDecomposition {
        eigenvalues,
        eigenvectors: vectors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;

    fn mat2(a: f64, b: f64, c: f64, d: f64) -> Mat<f64> {
        Mat::from_vec(2, 2, vec![a, b, c, d]).unwrap()
    }

    #[test]
    fn covariance_two_points_on_diagonal() {
        let samples = Mat::from_vec(2, 2, vec![0.0, 0.0, 2.0, 2.0]).unwrap();
        let stats = covariance(&samples).unwrap();
        assert_eq!(stats.count, 2);
        assert_eq!(stats.mean, vec![1.0, 1.0]);
        assert_eq!(stats.covariance.as_slice(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn covariance_single_sample_is_zero() {
        let samples = Mat::from_vec(1, 2, vec![5.0, 3.0]).unwrap();
        let stats = covariance(&samples).unwrap();
        assert_eq!(stats.mean, vec![5.0, 3.0]);
        assert_eq!(stats.covariance.as_slice(), &[0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn covariance_cross_pattern() {
        let samples =
            Mat::from_vec(4, 2, vec![1.0, 0.0, -1.0, 0.0, 0.0, 1.0, 0.0, -1.0]).unwrap();
        let stats = covariance(&samples).unwrap();
        assert_eq!(stats.mean, vec![0.0, 0.0]);
        assert_eq!(stats.covariance.as_slice(), &[0.5, 0.0, 0.0, 0.5]);
    }

    #[test]
    fn covariance_rejects_empty_and_nonfinite() {
        let empty = Mat::<f64>::zeros(0, 3);
        assert!(matches!(
            covariance(&empty),
            Err(HsdrError::EmptyInput(_))
        ));
        let bad = Mat::from_vec(1, 2, vec![1.0, f64::NAN]).unwrap();
        assert!(matches!(covariance(&bad), Err(HsdrError::NonFinite(_))));
    }

    #[test]
    fn eigh_diagonal_input() {
        let c = mat2(3.0, 0.0, 0.0, 1.0);
        let eig = eigh_symmetric(&c).unwrap();
        assert_eq!(eig.eigenvalues, vec![3.0, 1.0]);
        assert_eq!(eig.eigenvectors.as_slice(), &[1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn eigh_two_by_two_hand_solution() {
        let c = mat2(2.0, 1.0, 1.0, 2.0);
        let eig = eigh_symmetric(&c).unwrap();
        let s = std::f64::consts::FRAC_1_SQRT_2;
        assert!((eig.eigenvalues[0] - 3.0).abs() < 1e-12);
        assert!((eig.eigenvalues[1] - 1.0).abs() < 1e-12);
        let u = &eig.eigenvectors;
        for (got, want) in [
            (u[(0, 0)], s),
            (u[(1, 0)], s),
            (u[(0, 1)], s),
            (u[(1, 1)], -s),
        ] {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn eigh_identity_degenerate_spectrum() {
        let c = Mat::<f64>::identity(4);
        let eig = eigh_symmetric(&c).unwrap();
        for lam in &eig.eigenvalues {
            assert!((lam - 1.0).abs() < 1e-12);
        }
        assert!(eig.orthonormality_residual() < 1e-12);
        assert!(eig.reconstruction_residual(&c) < 1e-12);
    }

    #[test]
    fn eigh_rejects_asymmetric() {
        let c = mat2(1.0, 0.5, 0.0, 1.0);
        assert!(matches!(
            eigh_symmetric(&c),
            Err(HsdrError::NotSymmetric { .. })
        ));
    }

    #[test]
    fn eigh_reports_no_convergence_with_zero_sweeps() {
        let c = mat2(2.0, 1.0, 1.0, 2.0);
        assert!(matches!(
            eigh_symmetric_with(&c, 0),
            Err(HsdrError::NoConvergence { .. })
        ));
    }

    fn random_psd(rng: &mut SeededRng, n: usize) -> Mat<f64> {
        let mut b = Mat::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                b[(i, j)] = rng.uniform_in(-1.0, 1.0);
            }
        }
        let mut c = b.transpose().matmul(&b);
        for i in 0..n {
            c[(i, i)] += 0.1;
        }
        c
    }

    #[test]
    fn trace_is_conserved_on_random_psd() {
        let mut rng = SeededRng::new(11);
        for trial in 0..50 {
            let n = 2 + (trial % 63);
            let c = random_psd(&mut rng, n);
            let eig = eigh_symmetric(&c).unwrap();
            let sum: f64 = eig.eigenvalues.iter().sum();
            let tr = c.trace();
            assert!(
                (sum - tr).abs() <= 1e-6 * tr.abs().max(1.0),
                "n={n}: {sum} vs {tr}"
            );
        }
    }

    #[test]
    fn eigenvalues_sorted_non_increasing() {
        let mut rng = SeededRng::new(13);
        for trial in 0..1000 {
            let n = 2 + (trial % 7);
            let c = random_psd(&mut rng, n);
            let eig = eigh_symmetric(&c).unwrap();
            for w in eig.eigenvalues.windows(2) {
                assert!(w[0] >= w[1]);
            }
        }
    }

    #[test]
    fn eigh_deterministic_for_fixed_input() {
        let mut rng = SeededRng::new(17);
        let c = random_psd(&mut rng, 12);
        let a = eigh_symmetric(&c).unwrap();
        let b = eigh_symmetric(&c).unwrap();
        assert_eq!(a.eigenvalues, b.eigenvalues);
        assert_eq!(a.eigenvectors, b.eigenvectors);
    }

    #[test]
    fn eigh_works_in_f32() {
        let c = Mat::<f32>::from_vec(2, 2, vec![2.0, 1.0, 1.0, 2.0]).unwrap();
        let eig = eigh_symmetric(&c).unwrap();
        assert!((eig.eigenvalues[0] - 3.0).abs() < 1e-5);
        assert!((eig.eigenvalues[1] - 1.0).abs() < 1e-5);
    }
}
