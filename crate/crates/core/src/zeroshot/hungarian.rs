use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Minimum-cost assignment of every row to a distinct column, `rows <= cols`.
/// Returns the column of each row.
fn min_cost_assignment(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    let m = cost[0].len();
    // Potentials and matching are 1-based; column 0 is a sentinel.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
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
    let mut out = vec![0; n];
    for j in 1..=m {
        if p[j] != 0 {
            out[p[j] - 1] = j - 1;
        }
    }
    out
}

pub fn assignment_score(scores: &[Vec<f64>], assignment: &[usize]) -> f64 {
    assignment.iter().enumerate().map(|(i, &j)| scores[i][j]).sum()
}

fn best_total(scores: &[Vec<f64>], rows: &[usize], cols: &[usize]) -> f64 {
    if rows.is_empty() {
        return 0.0;
    }
    let cost: Vec<Vec<f64>> = rows
        .iter()
        .map(|&i| cols.iter().map(|&j| -scores[i][j]).collect())
        .collect();
    let a = min_cost_assignment(&cost);
    rows.iter().zip(a).map(|(&i, k)| scores[i][cols[k]]).sum()
}

/// Maximum-total-score assignment of distinct candidates (columns) to
/// blanks (rows) by the Hungarian method. Among optimal assignments the
/// lexicographically smallest column vector is returned.
pub fn hungarian_assign(scores: &[Vec<f64>]) -> Result<Vec<usize>> {
    let n = scores.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    let m = scores[0].len();
    if scores.iter().any(|r| r.len() != m) {
        return Err(Error::invalid("ragged score matrix"));
    }
    if m < n {
        return Err(Error::invalid(format!("{m} candidates for {n} blanks")));
    }
    if scores.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: "hungarian_assign" });
    }
    let all_rows: Vec<usize> = (0..n).collect();
    let all_cols: Vec<usize> = (0..m).collect();
    let optimum = best_total(scores, &all_rows, &all_cols);
    let tol = 1e-9 * (1.0 + libm::fabs(optimum));
    // Fix rows in order to the smallest column that keeps the optimum.
    let mut fixed: Vec<usize> = Vec::with_capacity(n);
    let mut fixed_total = 0.0;
    for i in 0..n {
        let rest_rows: Vec<usize> = (i + 1..n).collect();
        let mut chosen = None;
        for j in 0..m {
            if fixed.contains(&j) {
                continue;
            }
            let cols: Vec<usize> = (0..m).filter(|c| *c != j && !fixed.contains(c)).collect();
            let total = fixed_total + scores[i][j] + best_total(scores, &rest_rows, &cols);
            if total >= optimum - tol {
                chosen = Some(j);
                break;
            }
        }
        let j = chosen.expect("an optimal completion always exists");
        fixed_total += scores[i][j];
        fixed.push(j);
    }
    Ok(fixed)
}
