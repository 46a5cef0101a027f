//! Small dense symmetric eigenproblems.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Eigenvalues of a symmetric `n×n` row-major matrix, sorted descending,
/// computed with cyclic Jacobi rotations.
pub fn symmetric_eigenvalues<S: Scalar>(matrix: &[S], n: usize) -> Result<Vec<S>> {
    if matrix.len() != n * n {
        return Err(Error::Dimension(format!("{} values for a {n}x{n} matrix", matrix.len())));
    }
    if matrix.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("eigen decomposition input".into()));
    }
    let mut a = matrix.to_vec();
    let scale = a.iter().fold(S::zero(), |m, v| m.max(v.abs()));
    let tol = S::epsilon() * S::epsilon() * scale * scale;
    for _sweep in 0..100 {
        let mut off = S::zero();
        for i in 0..n {
            for j in (i + 1)..n {
                off += a[i * n + j] * a[i * n + j];
            }
        }
        if off <= tol {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[p * n + q];
                if apq == S::zero() {
                    continue;
                }
                let app = a[p * n + p];
                let aqq = a[q * n + q];
                let theta = (aqq - app) / (S::lit(2.0) * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + S::one()).sqrt());
                let c = S::one() / (t * t + S::one()).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut eig: Vec<S> = (0..n).map(|i| a[i * n + i]).collect();
    eig.sort_by(|x, y| y.partial_cmp(x).unwrap());
    Ok(eig)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diagonal_and_rank_one() {
        let e = symmetric_eigenvalues(&[3.0f64, 0.0, 0.0, -1.0], 2).unwrap();
        assert_eq!(e, vec![3.0, -1.0]);
        let e = symmetric_eigenvalues(&[1.0f64, 2.0, 2.0, 4.0], 2).unwrap();
        assert!((e[0] - 5.0).abs() < 1e-12 && e[1].abs() < 1e-12);
        let e = symmetric_eigenvalues(&[2.0f32, 1.0, 1.0, 2.0], 2).unwrap();
        assert!((e[0] - 3.0).abs() < 1e-5 && (e[1] - 1.0).abs() < 1e-5);
        assert!(symmetric_eigenvalues(&[1.0f64; 3], 2).is_err());
    }
}
