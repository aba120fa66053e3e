//! Conjugate gradient for symmetric positive-definite operators given as a
//! matrix-vector product.

use super::matrix::{axpy, dot, norm2};
use super::LinalgError;

#[derive(Debug, Clone, PartialEq)]
pub struct CgSolution {
    pub x: Vec<f64>,
    pub iterations: usize,
    /// `‖A·x − b‖ / ‖b‖` of the returned iterate (recomputed, not recurrence).
    pub relative_residual: f64,
}

/// Solves `A·x = b` starting from `x = 0`.
///
/// `apply_a(p, out)` must write `A·p` into `out`. Returns
/// [`LinalgError::NotConverged`] carrying the best iterate when the relative
/// residual does not reach `tol` within `max_iter` iterations.
pub fn conjugate_gradient_solve<F>(
    mut apply_a: F,
    b: &[f64],
    tol: f64,
    max_iter: usize,
) -> Result<CgSolution, LinalgError>
where
    F: FnMut(&[f64], &mut [f64]),
{
    assert!(tol > 0.0, "tolerance must be positive");
    let n = b.len();
    let b_norm = norm2(b);
    let mut x = vec![0.0; n];
    if b_norm == 0.0 {
        return Ok(CgSolution {
            x,
            iterations: 0,
            relative_residual: 0.0,
        });
    }

    let mut r = b.to_vec();
    let mut p = r.clone();
    let mut ap = vec![0.0; n];
    let mut rs_old = dot(&r, &r);
    let mut best = (x.clone(), 1.0);
    let mut iterations = 0;

    while iterations < max_iter {
        apply_a(&p, &mut ap);
        let pap = dot(&p, &ap);
        if pap.is_nan() || pap <= 0.0 {
            // Operator is not positive definite along p (or p vanished).
            break;
        }
        let step = rs_old / pap;
        axpy(step, &p, &mut x);
        axpy(-step, &ap, &mut r);
        iterations += 1;

        let rs_new = dot(&r, &r);
        let rel = rs_new.sqrt() / b_norm;
        if rel < best.1 {
            best = (x.clone(), rel);
        }
        if rel <= tol {
            break;
        }
        let beta = rs_new / rs_old;
        for (pi, ri) in p.iter_mut().zip(&r) {
            *pi = ri + beta * *pi;
        }
        rs_old = rs_new;
    }

    let (x, _) = best;
    let relative_residual = true_residual(&mut apply_a, &x, b) / b_norm;
    if relative_residual <= tol {
        Ok(CgSolution {
            x,
            iterations,
            relative_residual,
        })
    } else {
        Err(LinalgError::NotConverged {
            iterations,
            relative_residual,
            best_iterate: x,
        })
    }
}

fn true_residual<F>(apply_a: &mut F, x: &[f64], b: &[f64]) -> f64
where
    F: FnMut(&[f64], &mut [f64]),
{
    let mut ax = vec![0.0; b.len()];
    apply_a(x, &mut ax);
    ax.iter()
        .zip(b)
        .map(|(a, b)| (b - a) * (b - a))
        .sum::<f64>()
        .sqrt()
}
