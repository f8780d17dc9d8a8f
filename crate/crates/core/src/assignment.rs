//! Minimum-cost perfect matching (Hungarian algorithm).
//!
//! The shortest-augmenting-path formulation with row/column potentials runs
//! in O(n³). Among all optimal matchings the lexicographically smallest
//! column sequence is returned: optimal matchings are exactly the perfect
//! matchings of the tight subgraph of any optimal dual, so rows are fixed in
//! order to their smallest tight column that still admits a completion.

use alloc::collections::VecDeque;
use alloc::vec;
use alloc::vec::Vec;

use crate::{usage, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    /// `pairs[row] = column`.
    pub pairs: Vec<usize>,
    /// Sum of matched cells, accumulated in row order.
    pub total_cost: f64,
}

impl Assignment {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Solves the assignment problem for a row-major `n × n` cost matrix.
pub fn hungarian_match(cost: &[f64], n: usize) -> Result<Assignment> {
    if cost.len() != n * n {
        return Err(usage!("cost matrix has {} cells, expected {n}×{n}", cost.len()));
    }
    if cost.iter().any(|c| !c.is_finite()) {
        return Err(usage!("cost matrix has non-finite entries"));
    }
    if n == 0 {
        return Ok(Assignment { pairs: Vec::new(), total_cost: 0.0 });
    }
    let at = |i: usize, j: usize| cost[i * n + j];

    // 1-based potentials; index 0 is the virtual source column.
    let mut u = vec![0f64; n + 1];
    let mut v = vec![0f64; n + 1];
    let mut col_row = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        col_row[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = col_row[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
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
            }
            for j in 0..=n {
                if used[j] {
                    u[col_row[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if col_row[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            col_row[j0] = col_row[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut pairs = vec![0usize; n];
    for j in 1..=n {
        pairs[col_row[j] - 1] = j - 1;
    }
    let optimal = row_order_cost(cost, n, &pairs);

    let scale = cost.iter().fold(1f64, |m, c| m.max(c.abs()));
    let tol = 1e-12 * scale * n as f64;
    let tight = |i: usize, j: usize| at(i, j) - u[i + 1] - v[j + 1] <= tol;
    let lex = lexicographic_tight_matching(n, pairs.clone(), &tight);
    if row_order_cost(cost, n, &lex) <= optimal {
        pairs = lex;
    }
    let total_cost = row_order_cost(cost, n, &pairs);
    Ok(Assignment { pairs, total_cost })
}

fn row_order_cost(cost: &[f64], n: usize, pairs: &[usize]) -> f64 {
    pairs.iter().enumerate().map(|(i, &j)| cost[i * n + j]).sum()
}

/// Rewires a perfect matching of the tight graph into the lexicographically
/// smallest one.
fn lexicographic_tight_matching(
    n: usize,
    mut row_col: Vec<usize>,
    tight: &dyn Fn(usize, usize) -> bool,
) -> Vec<usize> {
    let mut col_row = vec![0usize; n];
    for (i, &j) in row_col.iter().enumerate() {
        col_row[j] = i;
    }
    let mut col_fixed = vec![false; n];
    for i in 0..n {
        for j in 0..n {
            if col_fixed[j] || !tight(i, j) {
                continue;
            }
            if row_col[i] == j {
                break;
            }
            // Move i onto j; the displaced row must reach i's old column
            // through an alternating path over unfixed rows.
            let displaced = col_row[j];
            let freed = row_col[i];
            if let Some(path) = alternating_path(n, displaced, freed, j, i, &row_col, &col_row, &col_fixed, tight) {
                for (r, c) in path {
                    row_col[r] = c;
                    col_row[c] = r;
                }
                row_col[i] = j;
                col_row[j] = i;
                break;
            }
        }
        col_fixed[row_col[i]] = true;
    }
    row_col
}

/// BFS from `start` (a row) to the free column `target`, avoiding `banned`
/// column and `skip_row`. Returns the (row, column) reassignments.
#[allow(clippy::too_many_arguments)]
fn alternating_path(
    n: usize,
    start: usize,
    target: usize,
    banned: usize,
    skip_row: usize,
    row_col: &[usize],
    col_row: &[usize],
    col_fixed: &[bool],
    tight: &dyn Fn(usize, usize) -> bool,
) -> Option<Vec<(usize, usize)>> {
    let mut parent_row = vec![usize::MAX; n];
    let mut seen_col = vec![false; n];
    let mut queue = VecDeque::from([start]);
    while let Some(r) = queue.pop_front() {
        for c in 0..n {
            if seen_col[c] || col_fixed[c] || c == banned || c == row_col[r] || !tight(r, c) {
                continue;
            }
            seen_col[c] = true;
            parent_row[c] = r;
            if c == target {
                let mut path = Vec::new();
                let mut col = c;
                loop {
                    let row = parent_row[col];
                    path.push((row, col));
                    if row == start {
                        return Some(path);
                    }
                    col = row_col[row];
                }
            }
            let next = col_row[c];
            if next != skip_row {
                queue.push_back(next);
            }
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_favoring_matrix() {
        let n = 4;
        let cost: Vec<f64> = (0..n * n).map(|k| if k / n == k % n { 0.0 } else { 1.0 }).collect();
        let a = hungarian_match(&cost, n).unwrap();
        assert_eq!(a.pairs, vec![0, 1, 2, 3]);
        assert_eq!(a.total_cost, 0.0);
    }

    #[test]
    fn two_by_two_by_hand() {
        let a = hungarian_match(&[4.0, 1.0, 2.0, 3.0], 2).unwrap();
        assert_eq!(a.pairs, vec![1, 0]);
        assert_eq!(a.total_cost, 3.0);
    }

    #[test]
    fn ties_resolve_lexicographically() {
        // Every permutation costs the same; the identity is smallest.
        let a = hungarian_match(&[1.0; 9], 3).unwrap();
        assert_eq!(a.pairs, vec![0, 1, 2]);
        // Optima (0→1, 1→0, 2→2) and (0→2, 1→0, 2→1); the first is smaller.
        let cost = [5.0, 0.0, 0.0, 0.0, 5.0, 5.0, 5.0, 0.0, 0.0];
        let a = hungarian_match(&cost, 3).unwrap();
        assert_eq!(a.total_cost, 0.0);
        assert_eq!(a.pairs, vec![1, 0, 2]);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(hungarian_match(&[1.0, 2.0, 3.0], 2).is_err());
        assert!(hungarian_match(&[1.0, f64::NAN, 3.0, 4.0], 2).is_err());
        assert!(hungarian_match(&[], 0).unwrap().is_empty());
    }
}
