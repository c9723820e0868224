//! Conjugate gradients for symmetric positive-definite operators.

use crate::error::{Error, Result};

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Solves `A x = b` from `x0` until `‖b − A x‖ ≤ tol · ‖b‖`. `apply(x, out)`
/// writes `A x` into `out`. Returns the solution and the iteration count.
pub(crate) fn conjugate_gradient(
    apply: impl Fn(&[f64], &mut [f64]),
    b: &[f64],
    x0: Vec<f64>,
    tol: f64,
    max_iter: usize,
) -> Result<(Vec<f64>, usize)> {
    let n = b.len();
    let mut x = x0;
    let b_norm = dot(b, b).sqrt();
    let mut ax = vec![0.0; n];
    apply(&x, &mut ax);
    let mut r: Vec<f64> = b.iter().zip(&ax).map(|(b, a)| b - a).collect();
    let target = if b_norm > 0.0 { tol * b_norm } else { tol };
    let mut rr = dot(&r, &r);
    if rr.sqrt() <= target {
        return Ok((x, 0));
    }
    let mut p = r.clone();
    let mut ap = vec![0.0; n];
    for it in 1..=max_iter {
        apply(&p, &mut ap);
        let pap = dot(&p, &ap);
        if !(pap > 0.0) {
            break;
        }
        let alpha = rr / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        let rr_new = dot(&r, &r);
        if rr_new.sqrt() <= target {
            return Ok((x, it));
        }
        let beta = rr_new / rr;
        rr = rr_new;
        for i in 0..n {
            p[i] = r[i] + beta * p[i];
        }
    }
    Err(Error::NotConverged {
        iterations: max_iter,
        residual: rr.sqrt() / b_norm.max(f64::MIN_POSITIVE),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tridiag(x: &[f64], out: &mut [f64]) {
        let n = x.len();
        for i in 0..n {
            out[i] = 4.0 * x[i] - if i > 0 { x[i - 1] } else { 0.0 } - if i + 1 < n { x[i + 1] } else { 0.0 };
        }
    }

    #[test]
    fn solves_tridiagonal() {
        let truth: Vec<f64> = (0..50).map(|i| (i as f64 * 0.3).sin()).collect();
        let mut b = vec![0.0; 50];
        tridiag(&truth, &mut b);
        let (x, it) = conjugate_gradient(tridiag, &b, vec![0.0; 50], 1e-13, 500).unwrap();
        assert!(it <= 50);
        for (a, t) in x.iter().zip(&truth) {
            assert!((a - t).abs() < 1e-11);
        }
    }

    #[test]
    fn reports_non_convergence() {
        let b: Vec<f64> = (0..50).map(|i| i as f64).collect();
        match conjugate_gradient(tridiag, &b, vec![0.0; 50], 1e-14, 2) {
            Err(Error::NotConverged { iterations, residual }) => {
                assert_eq!(iterations, 2);
                assert!(residual > 1e-14);
            }
            other => panic!("{other:?}"),
        }
    }
}
