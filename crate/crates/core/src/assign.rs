//! Slot→target assignment, improved by random pair swaps.
//!
//! Costs use squared L2, the same residual the regression loss minimizes.

use ndarray::{Array2, ArrayView1, ArrayView2};
use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::seed::rng_from;

#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    /// `perm[slot]` is the target assigned to `slot`.
    pub perm: Vec<usize>,
    pub cost: f64,
}

impl Assignment {
    pub fn identity(n: usize) -> Self {
        Assignment {
            perm: (0..n).collect(),
            cost: f64::NAN,
        }
    }

    pub fn len(&self) -> usize {
        self.perm.len()
    }

    pub fn is_empty(&self) -> bool {
        self.perm.is_empty()
    }

    pub fn is_bijection(&self) -> bool {
        let mut seen = vec![false; self.perm.len()];
        self.perm.iter().all(|&t| {
            t < seen.len() && !std::mem::replace(&mut seen[t], true)
        })
    }
}

#[inline]
fn sq_dist(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Σ_slot ‖e_slot − t_perm(slot)‖².
pub fn assignment_cost(
    embeddings: ArrayView2<'_, f64>,
    targets: ArrayView2<'_, f64>,
    perm: &[usize],
) -> f64 {
    perm.iter()
        .enumerate()
        .map(|(s, &t)| sq_dist(embeddings.row(s), targets.row(t)))
        .sum()
}

/// Uniformly random permutation of `num_slots` targets; cost left unset.
pub fn init_assignment(num_slots: usize, seed: u64) -> Result<Assignment> {
    if num_slots == 0 {
        return Err(Error::invalid("assignment needs at least one slot"));
    }
    let mut perm: Vec<usize> = (0..num_slots).collect();
    perm.shuffle(&mut rng_from(seed));
    Ok(Assignment {
        perm,
        cost: f64::NAN,
    })
}

/// `num_proposals` uniformly drawn slot pairs; a swap is kept only if it
/// strictly lowers the pair's cost. Refreshes `a.cost` and returns the number
/// of accepted swaps.
pub fn local_update_pass<R: Rng>(
    embeddings: ArrayView2<'_, f64>,
    targets: ArrayView2<'_, f64>,
    a: &mut Assignment,
    num_proposals: usize,
    rng: &mut R,
) -> Result<usize> {
    let n = a.len();
    if embeddings.nrows() != n || targets.nrows() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            found: if embeddings.nrows() != n {
                embeddings.nrows()
            } else {
                targets.nrows()
            },
        });
    }
    if embeddings.ncols() != targets.ncols() {
        return Err(Error::DimensionMismatch {
            expected: targets.ncols(),
            found: embeddings.ncols(),
        });
    }
    let mut cost = assignment_cost(embeddings, targets, &a.perm);
    let mut accepted = 0;
    if n >= 2 {
        for _ in 0..num_proposals {
            let i = rng.random_range(0..n);
            let mut j = rng.random_range(0..n - 1);
            if j >= i {
                j += 1;
            }
            let (ti, tj) = (a.perm[i], a.perm[j]);
            let (ei, ej) = (embeddings.row(i), embeddings.row(j));
            let before = sq_dist(ei, targets.row(ti)) + sq_dist(ej, targets.row(tj));
            let after = sq_dist(ei, targets.row(tj)) + sq_dist(ej, targets.row(ti));
            if after < before {
                a.perm.swap(i, j);
                cost += after - before;
                accepted += 1;
            }
        }
    }
    // Incremental updates drift; keep the cached cost exact.
    a.cost = if accepted > 0 {
        assignment_cost(embeddings, targets, &a.perm)
    } else {
        cost
    };
    Ok(accepted)
}

/// Exact minimum-cost assignment (shortest augmenting paths with potentials).
///
/// Cubic in `n` and limited to n <= 64: it exists to validate the stochastic
/// updates, not to run inside training.
pub fn hungarian_exact(cost: &Array2<f64>) -> Result<Vec<usize>> {
    let (rows, cols) = cost.dim();
    if rows != cols {
        return Err(Error::invalid(format!("cost matrix is {rows}x{cols}, not square")));
    }
    if rows > 64 {
        return Err(Error::invalid("exact assignment is limited to n <= 64"));
    }
    if cost.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("cost matrix must be finite"));
    }
    let n = rows;
    // 1-based arrays; column 0 is the virtual start.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut matched_row = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for row in 1..=n {
        matched_row[0] = row;
        let mut col0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[col0] = true;
            let r0 = matched_row[col0];
            let mut delta = f64::INFINITY;
            let mut col1 = 0;
            for c in 1..=n {
                if used[c] {
                    continue;
                }
                let cur = cost[[r0 - 1, c - 1]] - u[r0] - v[c];
                if cur < minv[c] {
                    minv[c] = cur;
                    way[c] = col0;
                }
                if minv[c] < delta {
                    delta = minv[c];
                    col1 = c;
                }
            }
            for c in 0..=n {
                if used[c] {
                    u[matched_row[c]] += delta;
                    v[c] -= delta;
                } else {
                    minv[c] -= delta;
                }
            }
            col0 = col1;
            if matched_row[col0] == 0 {
                break;
            }
        }
        loop {
            let col1 = way[col0];
            matched_row[col0] = matched_row[col1];
            col0 = col1;
            if col0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0usize; n];
    for c in 1..=n {
        assignment[matched_row[c] - 1] = c - 1;
    }
    Ok(assignment)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn perm_cost(cost: &Array2<f64>, perm: &[usize]) -> f64 {
        perm.iter().enumerate().map(|(r, &c)| cost[[r, c]]).sum()
    }

    fn permutations(n: usize) -> Vec<Vec<usize>> {
        if n == 0 {
            return vec![vec![]];
        }
        let mut out = Vec::new();
        for p in permutations(n - 1) {
            for pos in 0..=p.len() {
                let mut q = p.clone();
                q.insert(pos, n - 1);
                out.push(q);
            }
        }
        out
    }

    #[test]
    fn init_is_a_bijection() {
        assert_eq!(init_assignment(1, 5).unwrap().perm, vec![0]);
        for seed in 0..20 {
            assert!(init_assignment(17, seed).unwrap().is_bijection());
        }
        assert!(init_assignment(0, 0).is_err());
    }

    #[test]
    fn init_is_uniform_over_permutations() {
        use std::collections::HashMap;
        let mut freq: HashMap<Vec<usize>, usize> = HashMap::new();
        let trials = 10_000;
        for seed in 0..trials {
            *freq.entry(init_assignment(5, seed).unwrap().perm).or_default() += 1;
        }
        assert_eq!(freq.len(), 120);
        let p = 1.0 / 120.0;
        let mean = trials as f64 * p;
        let sd = (trials as f64 * p * (1.0 - p)).sqrt();
        for (perm, &count) in &freq {
            assert!((count as f64 - mean).abs() <= 3.0 * sd, "{perm:?}: {count}");
        }
    }

    #[test]
    fn optimal_matching_is_left_alone() {
        let e = array![[0.0, 0.0], [5.0, 5.0], [-3.0, 1.0]];
        let mut a = Assignment::identity(3);
        let swaps = local_update_pass(e.view(), e.view(), &mut a, 50, &mut rng_from(1)).unwrap();
        assert_eq!(swaps, 0);
        assert_eq!(a.perm, vec![0, 1, 2]);
        assert_eq!(a.cost, 0.0);
    }

    #[test]
    fn crossed_pair_is_fixed() {
        let e = array![[0.0, 0.0], [10.0, 0.0]];
        let t = array![[0.0, 0.0], [10.0, 0.0]];
        let mut a = Assignment {
            perm: vec![1, 0],
            cost: f64::NAN,
        };
        local_update_pass(e.view(), t.view(), &mut a, 1, &mut rng_from(3)).unwrap();
        assert_eq!(a.perm, vec![0, 1]);
        assert_eq!(a.cost, 0.0);
    }

    #[test]
    fn pass_never_increases_cost() {
        let mut rng = rng_from(7);
        let e = Array2::from_shape_fn((12, 3), |_| rng.random::<f64>());
        let t = Array2::from_shape_fn((12, 3), |_| rng.random::<f64>());
        let mut a = init_assignment(12, 9).unwrap();
        let mut last = assignment_cost(e.view(), t.view(), &a.perm);
        for _ in 0..20 {
            local_update_pass(e.view(), t.view(), &mut a, 24, &mut rng).unwrap();
            assert!(a.is_bijection());
            assert!(a.cost <= last + 1e-12);
            assert!((a.cost - assignment_cost(e.view(), t.view(), &a.perm)).abs() < 1e-6);
            last = a.cost;
        }
    }

    #[test]
    fn size_mismatch_is_rejected() {
        let e = Array2::zeros((3, 2));
        let t = Array2::zeros((4, 2));
        let mut a = Assignment::identity(3);
        assert!(local_update_pass(e.view(), t.view(), &mut a, 1, &mut rng_from(0)).is_err());
    }

    #[test]
    fn hungarian_small_cases() {
        let c = Array2::from_shape_fn((4, 4), |(i, j)| if i == j { 0.0 } else { 1.0 });
        assert_eq!(hungarian_exact(&c).unwrap(), vec![0, 1, 2, 3]);
        let c = array![[1.0, 2.0], [2.0, 1.0]];
        let p = hungarian_exact(&c).unwrap();
        assert_eq!(p, vec![0, 1]);
        assert_eq!(perm_cost(&c, &p), 2.0);
        assert!(hungarian_exact(&Array2::zeros((2, 3))).is_err());
        assert!(hungarian_exact(&Array2::zeros((65, 65))).is_err());
    }

    #[test]
    fn hungarian_matches_enumeration() {
        let mut rng = rng_from(12);
        let perms = permutations(6);
        assert_eq!(perms.len(), 720);
        for _ in 0..30 {
            let c = Array2::from_shape_fn((6, 6), |_| rng.random::<f64>() * 10.0);
            let best = perms
                .iter()
                .map(|p| perm_cost(&c, p))
                .fold(f64::INFINITY, f64::min);
            let got = perm_cost(&c, &hungarian_exact(&c).unwrap());
            assert!((got - best).abs() < 1e-9, "{got} vs {best}");
        }
    }
}
