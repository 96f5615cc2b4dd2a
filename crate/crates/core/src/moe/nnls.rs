//! Lawson-Hanson active-set nonnegative least squares.
//!
//! Each passive-set subproblem is solved through an SVD pseudo-inverse, so a
//! rank-deficient system yields the minimum-norm solution of that subproblem
//! instead of failing. Tolerance and iteration cap are fixed functions of the
//! problem shape, which keeps the fit deterministic.

use nalgebra::{DMatrix, DVector};

#[derive(Debug, Clone, PartialEq)]
pub struct NnlsSolution {
    pub x: Vec<f64>,
    /// Euclidean norm of `A x - b`.
    pub residual_norm: f64,
    pub iterations: usize,
    /// Numerical rank of `A`.
    pub rank: usize,
    pub converged: bool,
}

pub fn rank(a: &DMatrix<f64>) -> usize {
    let sv = a.clone().svd(false, false).singular_values;
    let max = sv.iter().cloned().fold(0.0, f64::max);
    let tol = a.nrows().max(a.ncols()) as f64 * f64::EPSILON * max;
    sv.iter().filter(|&&s| s > tol).count()
}

fn solve_passive(a: &DMatrix<f64>, b: &DVector<f64>, passive: &[bool]) -> DVector<f64> {
    let cols: Vec<usize> = (0..a.ncols()).filter(|&j| passive[j]).collect();
    let mut z = DVector::zeros(a.ncols());
    if cols.is_empty() {
        return z;
    }
    let sub = a.select_columns(&cols);
    let svd = sub.svd(true, true);
    let max = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    let eps = a.nrows().max(cols.len()) as f64 * f64::EPSILON * max;
    let sol = svd.solve(b, eps).expect("u and v_t were computed");
    for (k, &j) in cols.iter().enumerate() {
        z[j] = sol[k];
    }
    z
}

/// Minimizes `||A x - b||` subject to `x >= 0`.
pub fn nnls(a: &DMatrix<f64>, b: &DVector<f64>) -> NnlsSolution {
    let n = a.ncols();
    let tol = 10.0 * f64::EPSILON * a.abs().column_sum().max() * a.nrows().max(n) as f64;
    let max_iter = 3 * n.max(1);
    let mut x = DVector::zeros(n);
    let mut passive = vec![false; n];
    let mut iterations = 0;
    let mut converged = false;

    loop {
        let w = a.transpose() * (b - a * &x);
        let candidate = (0..n).filter(|&j| !passive[j] && w[j] > tol).max_by(|&i, &j| w[i].total_cmp(&w[j]));
        let Some(j) = candidate else {
            converged = true;
            break;
        };
        if iterations >= max_iter {
            break;
        }
        iterations += 1;
        passive[j] = true;

        let mut z = solve_passive(a, b, &passive);
        while (0..n).any(|k| passive[k] && z[k] <= tol) {
            let alpha = (0..n)
                .filter(|&k| passive[k] && z[k] <= tol)
                .map(|k| x[k] / (x[k] - z[k]))
                .fold(f64::INFINITY, f64::min);
            x += (&z - &x) * alpha;
            for k in 0..n {
                if passive[k] && x[k] <= tol {
                    passive[k] = false;
                    x[k] = 0.0;
                }
            }
            z = solve_passive(a, b, &passive);
        }
        x = z;
    }

    NnlsSolution {
        residual_norm: (a * &x - b).norm(),
        x: x.iter().copied().collect(),
        iterations,
        rank: rank(a),
        converged,
    }
}
