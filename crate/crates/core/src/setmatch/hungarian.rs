use super::cost::CostMatrix;
use crate::error::{Error, Result};

/// Minimum-cost assignment of every row to a distinct column (`rows <= cols`).
///
/// Shortest augmenting paths with row/column potentials, O(rows² · cols).
/// Among optimal assignments, ties resolve toward smaller column indices in
/// row order: after solving, rows are walked in order and moved onto a
/// smaller tight column whenever that keeps the total unchanged (a free
/// column, or a swap with a later row).
///
/// Returns `assignment[row] = column`.
pub fn hungarian(cost: &CostMatrix) -> Result<Vec<usize>> {
    let (n, m) = (cost.rows, cost.cols);
    if n == 0 {
        return Ok(Vec::new());
    }
    if n > m {
        return Err(Error::Capacity {
            class: 0,
            count: n,
            capacity: m,
        });
    }
    for i in 0..n {
        for j in 0..m {
            let c = cost.get(i, j);
            if !c.is_finite() {
                return Err(Error::NonFinite {
                    location: format!("cost[{i}][{j}]"),
                    value: c,
                });
            }
        }
    }

    // 1-based potentials; column 0 is the virtual root of each search
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    let mut min_slack = vec![0.0; m + 1];
    let mut used = vec![false; m + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        min_slack.fill(f64::INFINITY);
        used.fill(false);
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost.get(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < min_slack[j] {
                    min_slack[j] = cur;
                    way[j] = j0;
                }
                if min_slack[j] < delta {
                    delta = min_slack[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    min_slack[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut assignment = vec![0usize; n];
    let mut col_row = vec![usize::MAX; m];
    for j in 1..=m {
        if owner[j] > 0 {
            assignment[owner[j] - 1] = j - 1;
            col_row[j - 1] = owner[j] - 1;
        }
    }
    prefer_small_columns(cost, &u, &v, &mut assignment, &mut col_row);
    Ok(assignment)
}

fn prefer_small_columns(
    cost: &CostMatrix,
    u: &[f64],
    v: &[f64],
    assignment: &mut [usize],
    col_row: &mut [usize],
) {
    let scale = cost.values.iter().fold(1.0f64, |a, c| a.max(c.abs()));
    let tol = 1e-12 * scale;
    let tight = |r: usize, j: usize| cost.get(r, j) - u[r + 1] - v[j + 1] <= tol;
    // a column with zero potential may be left uncovered at no cost
    let releasable = |j: usize| v[j + 1].abs() <= tol;

    let n = assignment.len();
    let mut r = 0;
    while r < n {
        let current = assignment[r];
        let mut moved = false;
        for j in 0..current {
            if !tight(r, j) {
                continue;
            }
            match col_row[j] {
                usize::MAX => {
                    if releasable(j) && releasable(current) {
                        col_row[current] = usize::MAX;
                        col_row[j] = r;
                        assignment[r] = j;
                        moved = true;
                    }
                }
                other if other > r && tight(other, current) => {
                    assignment[other] = current;
                    col_row[current] = other;
                    assignment[r] = j;
                    col_row[j] = r;
                    moved = true;
                }
                _ => {}
            }
            if moved {
                break;
            }
        }
        if !moved {
            r += 1;
        }
    }
}
