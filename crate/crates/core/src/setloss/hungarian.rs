//! Minimum-cost injective assignment of rows to columns.

use crate::error::{Error, Result};
use crate::nn::Tensor;

/// Shortest-augmenting-path solver with row/column potentials. Returns the
/// column of each row and the total cost. Requires `n ≤ m`.
fn solve(cost: &[f64], m: usize, rows: &[usize], cols: &[usize]) -> (Vec<usize>, f64) {
    let k = rows.len();
    let l = cols.len();
    debug_assert!(k <= l);
    let at = |i: usize, j: usize| cost[rows[i] * m + cols[j]];
    let inf = f64::INFINITY;
    // 1-based indices; p[j] is the row matched to column j, 0 when free.
    let mut u = vec![0.0; k + 1];
    let mut v = vec![0.0; l + 1];
    let mut p = vec![0usize; l + 1];
    let mut way = vec![0usize; l + 1];
    for i in 1..=k {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; l + 1];
        let mut used = vec![false; l + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=l {
                if used[j] {
                    continue;
                }
                let cur = at(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=l {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0; k];
    for j in 1..=l {
        if p[j] != 0 {
            assign[p[j] - 1] = cols[j - 1];
        }
    }
    let total = assign
        .iter()
        .enumerate()
        .map(|(i, &c)| cost[rows[i] * m + c])
        .sum();
    (assign, total)
}

/// Optimal assignment `row → column` for an `[N x M]` cost matrix, `N ≤ M`.
///
/// Among all optimal assignments the lexicographically smallest column
/// vector is returned, so equal-cost ties resolve deterministically.
pub fn hungarian(cost: &Tensor) -> Result<Vec<usize>> {
    let (n, m) = (cost.rows(), cost.cols());
    if n > m {
        return Err(Error::config(format!(
            "{n} rows cannot be injectively assigned to {m} columns"
        )));
    }
    if !cost.is_finite() {
        return Err(Error::Numerical("non-finite assignment cost".into()));
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    let c = cost.data();
    let all_rows: Vec<usize> = (0..n).collect();
    let all_cols: Vec<usize> = (0..m).collect();
    let (mut assign, best) = solve(c, m, &all_rows, &all_cols);
    let tol = 1e-11 * (1.0 + best.abs());

    // Walk rows in order, moving each to the smallest column that still
    // admits an optimal completion of the remaining rows.
    let mut used = vec![false; m];
    let mut fixed = 0.0;
    for i in 0..n {
        let rest_rows: Vec<usize> = (i + 1..n).collect();
        for j in 0..assign[i] {
            if used[j] {
                continue;
            }
            let rest_cols: Vec<usize> = (0..m).filter(|&c| !used[c] && c != j).collect();
            let (sub, sub_cost) = if rest_rows.is_empty() {
                (Vec::new(), 0.0)
            } else {
                solve(c, m, &rest_rows, &rest_cols)
            };
            if fixed + c[i * m + j] + sub_cost <= best + tol {
                assign[i] = j;
                assign[i + 1..].copy_from_slice(&sub);
                break;
            }
        }
        used[assign[i]] = true;
        fixed += c[i * m + assign[i]];
    }
    Ok(assign)
}

/// Sum of `cost[i, assign[i]]` in row order.
pub fn assignment_cost(cost: &Tensor, assign: &[usize]) -> f64 {
    assign.iter().enumerate().map(|(i, &j)| cost.at(i, j)).sum()
}
