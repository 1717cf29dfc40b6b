//! Rectangular minimum-cost assignment via shortest augmenting paths
//! (Jonker-Volgenant style), O(R^2 C) for R rows <= C columns.

use crate::error::{Error, Result};

/// Solve the assignment problem on a row-major `rows x cols` cost matrix,
/// `rows <= cols`. Returns the assigned column for each row, minimizing the
/// total cost over all injective row-to-column maps.
pub fn hungarian(cost: &[f64], rows: usize, cols: usize) -> Result<Vec<usize>> {
    if rows > cols {
        return Err(Error::shape(format!("hungarian needs rows <= cols, got {rows} x {cols}")));
    }
    if cost.len() != rows * cols {
        return Err(Error::shape("cost matrix length mismatch"));
    }
    if cost.iter().any(|c| !c.is_finite()) {
        return Err(Error::input("hungarian requires finite costs"));
    }
    if rows == 0 {
        return Ok(Vec::new());
    }

    let mut u = vec![0.0f64; rows];
    let mut v = vec![0.0f64; cols];
    let mut row4col: Vec<isize> = vec![-1; cols];
    let mut col4row: Vec<isize> = vec![-1; rows];

    for cur_row in 0..rows {
        let mut shortest = vec![f64::INFINITY; cols];
        let mut path: Vec<isize> = vec![-1; cols];
        let mut sr = vec![false; rows];
        let mut sc = vec![false; cols];

        let mut min_val = 0.0f64;
        let mut i = cur_row;
        let mut sink: isize = -1;
        while sink == -1 {
            sr[i] = true;
            let mut lowest = f64::INFINITY;
            let mut index: isize = -1;
            for j in 0..cols {
                if sc[j] {
                    continue;
                }
                let r = min_val + cost[i * cols + j] - u[i] - v[j];
                if r < shortest[j] {
                    path[j] = i as isize;
                    shortest[j] = r;
                }
                // Prefer unassigned columns on ties so paths terminate early.
                if shortest[j] < lowest
                    || (shortest[j] == lowest && row4col[j] == -1 && index != -1 && row4col[index as usize] != -1)
                {
                    lowest = shortest[j];
                    index = j as isize;
                }
            }
            min_val = lowest;
            debug_assert!(min_val.is_finite());
            let j = index as usize;
            if row4col[j] == -1 {
                sink = index;
            } else {
                i = row4col[j] as usize;
            }
            sc[j] = true;
        }

        u[cur_row] += min_val;
        for r in 0..rows {
            if sr[r] && r != cur_row {
                u[r] += min_val - shortest[col4row[r] as usize];
            }
        }
        for j in 0..cols {
            if sc[j] {
                v[j] -= min_val - shortest[j];
            }
        }

        let mut j = sink as usize;
        loop {
            let i = path[j] as usize;
            row4col[j] = i as isize;
            let prev = col4row[i];
            col4row[i] = j as isize;
            if i == cur_row {
                break;
            }
            j = prev as usize;
        }
    }

    Ok(col4row.into_iter().map(|c| c as usize).collect())
}

/// Total cost of an assignment, summed in row order.
pub fn assignment_cost(cost: &[f64], cols: usize, assignment: &[usize]) -> f64 {
    assignment.iter().enumerate().map(|(r, &c)| cost[r * cols + c]).sum()
}

/// Exhaustive minimum over all injective row-to-column maps; test oracle for
/// small instances.
pub fn brute_force_min_cost(cost: &[f64], rows: usize, cols: usize) -> f64 {
    fn recurse(cost: &[f64], cols: usize, row: usize, rows: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64) {
        if row == rows {
            if acc < *best {
                *best = acc;
            }
            return;
        }
        for c in 0..cols {
            if !used[c] {
                used[c] = true;
                recurse(cost, cols, row + 1, rows, used, acc + cost[row * cols + c], best);
                used[c] = false;
            }
        }
    }
    let mut best = f64::INFINITY;
    let mut used = vec![false; cols];
    recurse(cost, cols, 0, rows, &mut used, 0.0, &mut best);
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn identity_favoring_matrix() {
        let cost = vec![0.0, 1.0, 1.0, 1.0, 0.0, 1.0, 1.0, 1.0, 0.0];
        let a = hungarian(&cost, 3, 3).unwrap();
        assert_eq!(a, vec![0, 1, 2]);
        assert_eq!(assignment_cost(&cost, 3, &a), 0.0);
    }

    #[test]
    fn rectangular_matches_brute_force() {
        let mut g = crate::rng::stream("hungarian-test", 0, &[]);
        for trial in 0..100 {
            let rows = g.gen_range(1..=4);
            let cols = g.gen_range(rows..=6);
            let cost: Vec<f64> = (0..rows * cols).map(|_| g.gen::<f64>()).collect();
            let a = hungarian(&cost, rows, cols).unwrap();
            // Injectivity.
            let mut seen = vec![false; cols];
            for &c in &a {
                assert!(!seen[c], "trial {trial}: duplicate column");
                seen[c] = true;
            }
            let total = assignment_cost(&cost, cols, &a);
            let best = brute_force_min_cost(&cost, rows, cols);
            assert_eq!(total, best, "trial {trial}: {total} vs brute {best}");
        }
    }

    #[test]
    fn tied_optima_still_reach_optimum() {
        // Two optimal assignments with equal totals.
        let cost = vec![1.0, 1.0, 2.0, 1.0, 1.0, 2.0, 2.0, 2.0, 0.0];
        let a = hungarian(&cost, 3, 3).unwrap();
        assert_eq!(assignment_cost(&cost, 3, &a), brute_force_min_cost(&cost, 3, 3));
    }

    #[test]
    fn rows_exceeding_cols_rejected() {
        let cost = vec![0.0; 6];
        assert!(hungarian(&cost, 3, 2).is_err());
    }

    #[test]
    fn non_finite_cost_rejected() {
        let cost = vec![0.0, f64::INFINITY, 0.0, 0.0];
        assert!(hungarian(&cost, 2, 2).is_err());
    }
}
