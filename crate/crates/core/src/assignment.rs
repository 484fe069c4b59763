//! Rectangular linear assignment with cost-threshold rejection.
//!
//! Entries above `reject_above` are forbidden. Among matchings that use only
//! allowed entries, the solver returns one with the largest number of pairs
//! and, among those, the smallest total cost. Internally forbidden entries
//! get a penalty larger than any achievable sum of allowed costs and the
//! padded problem is solved with the shortest-augmenting-path Hungarian
//! method in `O(n² m)`.

use crate::{Error, Result};

/// Dense row-major cost matrix with entries in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl CostMatrix {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(Error::invalid(format!(
                "cost matrix {rows}x{cols} expects {} values, got {}",
                rows * cols,
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("non-finite cost {v}")));
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid(format!("cost {v} outside [0, 1]")));
        }
        Ok(Self { rows, cols, values })
    }

    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> f64) -> Result<Self> {
        let values = (0..rows)
            .flat_map(|r| (0..cols).map(move |c| (r, c)))
            .map(|(r, c)| f(r, c))
            .collect();
        Self::new(rows, cols, values)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.cols + col]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PartialAssignment {
    /// Matched `(row, col)` pairs sorted by row.
    pub pairs: Vec<(usize, usize)>,
    pub unmatched_rows: Vec<usize>,
    pub unmatched_cols: Vec<usize>,
}

impl PartialAssignment {
    pub fn total_cost(&self, costs: &CostMatrix) -> f64 {
        self.pairs.iter().map(|&(r, c)| costs.get(r, c)).sum()
    }

    pub fn col_for_row(&self, row: usize) -> Option<usize> {
        self.pairs.iter().find(|p| p.0 == row).map(|p| p.1)
    }
}

/// Solves the thresholded partial assignment problem.
pub fn solve_assignment(costs: &CostMatrix, reject_above: f64) -> Result<PartialAssignment> {
    if !(0.0..=1.0).contains(&reject_above) {
        return Err(Error::invalid(format!(
            "reject_above {reject_above} outside [0, 1]"
        )));
    }
    let (rows, cols) = (costs.rows, costs.cols);
    let transpose = rows > cols;
    let (n, m) = if transpose { (cols, rows) } else { (rows, cols) };
    // Every row of the (possibly transposed) problem gets some column; rows
    // landing on a forbidden entry count as unmatched. A penalty above `n`
    // dominates any sum of at most `n` allowed costs.
    let penalty = n as f64 + 1.0;
    let entry = |i: usize, j: usize| -> f64 {
        let v = if transpose { costs.get(j, i) } else { costs.get(i, j) };
        if v <= reject_above {
            v
        } else {
            penalty
        }
    };
    let row_to_col = hungarian(n, m, entry);

    let mut pairs = Vec::new();
    for (i, &j) in row_to_col.iter().enumerate() {
        let (r, c) = if transpose { (j, i) } else { (i, j) };
        if costs.get(r, c) <= reject_above {
            pairs.push((r, c));
        }
    }
    pairs.sort_unstable();
    let mut row_used = vec![false; rows];
    let mut col_used = vec![false; cols];
    for &(r, c) in &pairs {
        row_used[r] = true;
        col_used[c] = true;
    }
    Ok(PartialAssignment {
        unmatched_rows: (0..rows).filter(|&r| !row_used[r]).collect(),
        unmatched_cols: (0..cols).filter(|&c| !col_used[c]).collect(),
        pairs,
    })
}

/// Min-cost assignment of `n` rows into `m >= n` columns; returns the column
/// of each row.
fn hungarian(n: usize, m: usize, cost: impl Fn(usize, usize) -> f64) -> Vec<usize> {
    if n == 0 {
        return Vec::new();
    }
    debug_assert!(n <= m);
    // 1-based potentials; column 0 is the virtual source.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    let mut minv = vec![0.0; m + 1];
    let mut used = vec![false; m + 1];

    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0usize;
        minv.iter_mut().for_each(|x| *x = f64::INFINITY);
        used.iter_mut().for_each(|x| *x = false);
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
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

    let mut row_to_col = vec![0usize; n];
    for j in 1..=m {
        if owner[j] > 0 {
            row_to_col[owner[j] - 1] = j - 1;
        }
    }
    row_to_col
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Exhaustive reference solver: every injective partial map over allowed
    /// entries, maximum cardinality first, then minimum cost. Exponential; only
    /// for checking the real solver on small matrices.
    fn brute_force_assignment(costs: &CostMatrix, reject_above: f64) -> (usize, f64) {
        fn rec(
            costs: &CostMatrix,
            reject_above: f64,
            row: usize,
            used: &mut Vec<bool>,
            count: usize,
            total: f64,
            best: &mut (usize, f64),
        ) {
            if row == costs.rows() {
                if count > best.0 || (count == best.0 && total < best.1) {
                    *best = (count, total);
                }
                return;
            }
            rec(costs, reject_above, row + 1, used, count, total, best);
            for c in 0..costs.cols() {
                let v = costs.get(row, c);
                if !used[c] && v <= reject_above {
                    used[c] = true;
                    rec(costs, reject_above, row + 1, used, count + 1, total + v, best);
                    used[c] = false;
                }
            }
        }
        let mut best = (0, 0.0);
        let mut used = vec![false; costs.cols()];
        rec(costs, reject_above, 0, &mut used, 0, 0.0, &mut best);
        best
    }

    #[test]
    fn diagonal_is_identity() {
        let c = CostMatrix::from_fn(3, 3, |r, c| if r == c { 0.0 } else { 1.0 }).unwrap();
        let a = solve_assignment(&c, 0.5).unwrap();
        assert_eq!(a.pairs, vec![(0, 0), (1, 1), (2, 2)]);
        assert!(a.unmatched_rows.is_empty() && a.unmatched_cols.is_empty());
    }

    #[test]
    fn all_rejected() {
        let c = CostMatrix::new(2, 2, vec![0.9; 4]).unwrap();
        let a = solve_assignment(&c, 0.5).unwrap();
        assert!(a.pairs.is_empty());
        assert_eq!(a.unmatched_rows, vec![0, 1]);
        assert_eq!(a.unmatched_cols, vec![0, 1]);
    }

    #[test]
    fn cardinality_beats_cost() {
        // Taking (0,0) alone costs 0 but blocks row 1; two pairs are preferred.
        let c = CostMatrix::new(2, 2, vec![0.0, 0.6, 0.6, 1.0]).unwrap();
        let a = solve_assignment(&c, 0.7).unwrap();
        assert_eq!(a.pairs, vec![(0, 1), (1, 0)]);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(CostMatrix::new(1, 1, vec![f64::NAN]).is_err());
        assert!(CostMatrix::new(1, 1, vec![1.5]).is_err());
        let c = CostMatrix::new(1, 1, vec![0.5]).unwrap();
        assert!(solve_assignment(&c, 1.5).is_err());
    }

    #[test]
    fn empty_dimensions() {
        let c = CostMatrix::new(0, 3, vec![]).unwrap();
        let a = solve_assignment(&c, 0.7).unwrap();
        assert!(a.pairs.is_empty());
        assert_eq!(a.unmatched_cols, vec![0, 1, 2]);
    }

    fn matrix_strategy() -> impl Strategy<Value = CostMatrix> {
        (1usize..=6, 1usize..=6).prop_flat_map(|(r, c)| {
            proptest::collection::vec(0.0f64..=1.0, r * c)
                .prop_map(move |v| CostMatrix::new(r, c, v).unwrap())
        })
    }

    proptest! {
        #[test]
        fn matches_exhaustive_oracle(c in matrix_strategy(), t in prop_oneof![Just(0.3), Just(0.7), Just(1.0)]) {
            let a = solve_assignment(&c, t).unwrap();
            let (count, total) = brute_force_assignment(&c, t);
            prop_assert_eq!(a.pairs.len(), count);
            prop_assert!((a.total_cost(&c) - total).abs() < 1e-9);
            prop_assert!(a.pairs.iter().all(|&(r, col)| c.get(r, col) <= t));
            prop_assert_eq!(a.pairs.len() + a.unmatched_rows.len(), c.rows());
            prop_assert_eq!(a.pairs.len() + a.unmatched_cols.len(), c.cols());
        }

        #[test]
        fn row_permutation_equivariance(c in matrix_strategy(), seed in any::<u64>()) {
            use rand::{seq::SliceRandom, SeedableRng};
            let mut perm: Vec<usize> = (0..c.rows()).collect();
            perm.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            // Row r of the permuted matrix is row perm[r] of the original.
            let pc = CostMatrix::from_fn(c.rows(), c.cols(), |r, col| c.get(perm[r], col)).unwrap();
            let a = solve_assignment(&c, 0.7).unwrap();
            let b = solve_assignment(&pc, 0.7).unwrap();
            let mut mapped: Vec<_> = b.pairs.iter().map(|&(r, col)| (perm[r], col)).collect();
            mapped.sort_unstable();
            // Continuous random costs: the optimum is unique almost surely.
            prop_assert_eq!(mapped, a.pairs.clone());
            prop_assert_eq!(solve_assignment(&c, 0.7).unwrap(), a);
        }
    }
}
