//! Small dense linear solves for the regression estimators.
//!
//! The design matrices here have at most a dozen columns, so Gauss-Jordan
//! elimination with partial pivoting on the normal equations is plenty.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("singular system: pivot below tolerance at column {column}")]
pub struct SingularMatrix {
    pub column: usize,
}

/// Solves `a·x = rhs` and returns `(x, a⁻¹)` in one elimination pass.
///
/// `pivot_tol` is an absolute threshold: any pivot with magnitude at or below
/// it declares the system singular.
pub fn solve_and_invert(
    a: &[Vec<f64>],
    rhs: &[f64],
    pivot_tol: f64,
) -> Result<(Vec<f64>, Vec<Vec<f64>>), SingularMatrix> {
    let n = a.len();
    debug_assert!(a.iter().all(|row| row.len() == n) && rhs.len() == n);

    // Augmented system [A | rhs | I].
    let width = n + 1 + n;
    let mut m = vec![vec![0.0; width]; n];
    for i in 0..n {
        m[i][..n].copy_from_slice(&a[i]);
        m[i][n] = rhs[i];
        m[i][n + 1 + i] = 1.0;
    }

    for col in 0..n {
        let pivot_row = (col..n)
            .max_by(|&r, &s| m[r][col].abs().total_cmp(&m[s][col].abs()))
            .expect("non-empty range");
        if m[pivot_row][col].abs() <= pivot_tol {
            return Err(SingularMatrix { column: col });
        }
        m.swap(col, pivot_row);
        let pivot = m[col][col];
        for value in m[col].iter_mut() {
            *value /= pivot;
        }
        for row in 0..n {
            if row == col {
                continue;
            }
            let factor = m[row][col];
            if factor == 0.0 {
                continue;
            }
            let (pivot_row_ref, target_row) = if row < col {
                let (head, tail) = m.split_at_mut(col);
                (&tail[0], &mut head[row])
            } else {
                let (head, tail) = m.split_at_mut(row);
                (&head[col], &mut tail[0])
            };
            for (t, p) in target_row.iter_mut().zip(pivot_row_ref.iter()) {
                *t -= factor * p;
            }
        }
    }

    let x = (0..n).map(|i| m[i][n]).collect();
    let inv = (0..n)
        .map(|i| m[i][n + 1..].to_vec())
        .collect();
    Ok((x, inv))
}

/// Solves `a·x = rhs`, discarding the inverse.
pub fn solve(a: &[Vec<f64>], rhs: &[f64], pivot_tol: f64) -> Result<Vec<f64>, SingularMatrix> {
    solve_and_invert(a, rhs, pivot_tol).map(|(x, _)| x)
}
