//! Exact square assignment via the Hungarian method with row/column
//! potentials (shortest augmenting paths, O(n³)).

use super::Matrix;
use crate::error::{KpeError, Result};

/// Returns `perm` with `perm[row] = column` minimizing Σ cost[row][perm[row]].
pub fn hungarian(cost: &Matrix) -> Result<Vec<usize>> {
    if !cost.is_square() {
        return Err(KpeError::validation(format!(
            "assignment cost must be square, got {}x{}",
            cost.rows(),
            cost.cols()
        )));
    }
    let n = cost.rows();
    if n == 0 {
        return Err(KpeError::validation("assignment cost is empty"));
    }
    if cost.as_slice().iter().any(|c| !c.is_finite()) {
        return Err(KpeError::validation("assignment cost has non-finite entries"));
    }

    // 1-based arrays; index 0 is the virtual column used as the path root.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut row_of_col = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    let mut minv = vec![0.0f64; n + 1];
    let mut used = vec![false; n + 1];

    for i in 1..=n {
        row_of_col[0] = i;
        let mut j0 = 0usize;
        minv.iter_mut().for_each(|m| *m = f64::INFINITY);
        used.iter_mut().for_each(|b| *b = false);
        loop {
            used[j0] = true;
            let i0 = row_of_col[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1, j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[row_of_col[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of_col[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of_col[j0] = row_of_col[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut perm = vec![0usize; n];
    for j in 1..=n {
        perm[row_of_col[j] - 1] = j - 1;
    }
    Ok(perm)
}

pub fn assignment_cost(cost: &Matrix, perm: &[usize]) -> f64 {
    perm.iter().enumerate().map(|(i, &j)| cost[(i, j)]).sum()
}
