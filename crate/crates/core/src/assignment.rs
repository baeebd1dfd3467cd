//! Exact linear assignment (Kuhn–Munkres with row potentials, O(n³)).
//!
//! Rows are inserted one at a time and matched along a shortest augmenting
//! path. Among equally short candidates the smallest column index wins, so
//! the output is a deterministic function of the input.

use crate::error::{Error, Result};

/// Square matrix of finite costs, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct CostMatrix {
    n: usize,
    entries: Vec<f64>,
}

impl CostMatrix {
    pub fn new(n: usize, entries: Vec<f64>) -> Result<Self> {
        if n == 0 {
            return Err(Error::invalid("assignment needs n >= 1"));
        }
        if entries.len() != n * n {
            return Err(Error::invalid(format!(
                "cost matrix must be square: {} entries for n = {n}",
                entries.len()
            )));
        }
        if entries.iter().any(|c| !c.is_finite()) {
            return Err(Error::invalid("cost matrix has non-finite entries"));
        }
        Ok(Self { n, entries })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::invalid("cost matrix must be square"));
        }
        Self::new(n, rows.iter().flatten().copied().collect())
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.n + j]
    }
}

/// Optimal assignment: `permutation[row] = column`.
#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    pub permutation: Vec<usize>,
    pub total_cost: f64,
}

pub fn solve(c: &CostMatrix) -> Assignment {
    let n = c.n;
    // 1-based arrays with a virtual column 0.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut row_of = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];

    for i in 1..=n {
        row_of[0] = i;
        let mut j0 = 0;
        let mut min_to = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = row_of[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let reduced = c.get(i0 - 1, j - 1) - u[i0] - v[j];
                if reduced < min_to[j] {
                    min_to[j] = reduced;
                    way[j] = j0;
                }
                if min_to[j] < delta {
                    delta = min_to[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[row_of[j]] += delta;
                    v[j] -= delta;
                } else {
                    min_to[j] -= delta;
                }
            }
            j0 = j1;
            if row_of[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of[j0] = row_of[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut permutation = vec![0; n];
    for j in 1..=n {
        permutation[row_of[j] - 1] = j - 1;
    }
    let total_cost = permutation
        .iter()
        .enumerate()
        .map(|(i, &j)| c.get(i, j))
        .sum();
    Assignment {
        permutation,
        total_cost,
    }
}


#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, n: usize) -> CostMatrix {
        CostMatrix::new(n, (0..n * n).map(|_| rng.random_range(0.0..10.0)).collect()).unwrap()
    }

    #[test]
    fn two_by_two() {
        let c = CostMatrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 1.0]]).unwrap();
        let a = solve(&c);
        assert_eq!(a.permutation, vec![0, 1]);
        assert_eq!(a.total_cost, 2.0);
    }

    #[test]
    fn diagonal_dominant_is_identity() {
        let n = 6;
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|i| (0..n).map(|j| if i == j { 0.1 } else { 5.0 + j as f64 }).collect())
            .collect();
        let a = solve(&CostMatrix::from_rows(&rows).unwrap());
        assert_eq!(a.permutation, (0..n).collect::<Vec<_>>());
    }

    #[test]
    fn matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for n in 1..=7 {
            for _ in 0..100 {
                let c = random_matrix(&mut rng, n);
                let a = solve(&c);
                let mut sorted = a.permutation.clone();
                sorted.sort_unstable();
                assert_eq!(sorted, (0..n).collect::<Vec<_>>());
                let best = brute::min_over_permutations(n, |p| {
                    p.iter().enumerate().map(|(i, &j)| c.get(i, j)).sum()
                });
                assert!((a.total_cost - best).abs() < 1e-9, "n={n}: {} vs {best}", a.total_cost);
            }
        }
    }

    #[test]
    fn row_shift_moves_cost_by_the_constant() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let n = rng.random_range(2..7);
            let c = random_matrix(&mut rng, n);
            let row = rng.random_range(0..n);
            let k = rng.random_range(0.0..3.0);
            let shifted: Vec<f64> = (0..n * n)
                .map(|idx| c.entries[idx] + if idx / n == row { k } else { 0.0 })
                .collect();
            let a = solve(&c).total_cost;
            let b = solve(&CostMatrix::new(n, shifted).unwrap()).total_cost;
            assert!((b - a - k).abs() < 1e-9);
        }
    }

    #[test]
    fn deterministic_and_tie_stable() {
        let c = CostMatrix::new(3, vec![1.0; 9]).unwrap();
        let a = solve(&c);
        assert_eq!(a, solve(&c));
        assert_eq!(a.total_cost, 3.0);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(CostMatrix::new(2, vec![0.0, f64::NAN, 0.0, 0.0]).is_err());
        assert!(CostMatrix::from_rows(&[vec![1.0, 2.0]]).is_err());
        assert!(CostMatrix::new(0, vec![]).is_err());
    }
}
