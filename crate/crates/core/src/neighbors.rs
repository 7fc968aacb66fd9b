//! Exact L2 distances, brute-force k-nearest neighbours and nearest-rank percentiles.

use std::cmp::Ordering;

use ndarray::{Array2, ArrayView1, ArrayView2};
use rayon::prelude::*;

use crate::error::{Error, Result};

/// Points in representation space, compared with the L2 metric.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddedSet {
    points: Array2<f64>,
}

impl EmbeddedSet {
    pub fn new(points: Array2<f64>) -> Result<Self> {
        if points.ncols() == 0 {
            return Err(Error::invalid("embedding dimension must be at least 1"));
        }
        if points.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("embedding contains non-finite values"));
        }
        Ok(EmbeddedSet { points })
    }

    pub fn from_view(points: ArrayView2<'_, f64>) -> Result<Self> {
        Self::new(points.to_owned())
    }

    pub fn len(&self) -> usize {
        self.points.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.points.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.points.ncols()
    }

    pub fn points(&self) -> ArrayView2<'_, f64> {
        self.points.view()
    }

    pub fn point(&self, i: usize) -> ArrayView1<'_, f64> {
        self.points.row(i)
    }

    #[inline]
    pub fn distance(&self, i: usize, j: usize) -> f64 {
        l2(self.points.row(i), self.points.row(j))
    }

    /// Distances from `query` to every point (including itself, at 0).
    pub fn distances_from(&self, query: usize) -> Vec<f64> {
        let q = self.points.row(query);
        self.points.rows().into_iter().map(|r| l2(q, r)).collect()
    }
}

#[inline]
pub(crate) fn l2(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

pub fn pairwise_distance(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            found: b.len(),
        });
    }
    Ok(l2(a, b))
}

/// Dense symmetric matrix of all pairwise distances.
#[derive(Debug, Clone)]
pub struct DistanceMatrix {
    n: usize,
    data: Vec<f64>,
}

impl DistanceMatrix {
    pub fn new(set: &EmbeddedSet) -> Self {
        let n = set.len();
        let rows: Vec<Vec<f64>> = (0..n).into_par_iter().map(|i| set.distances_from(i)).collect();
        DistanceMatrix {
            n,
            data: rows.concat(),
        }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n..(i + 1) * self.n]
    }
}

/// Neighbours of `query` in ascending distance, ties by index.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborList {
    pub query: usize,
    pub neighbors: Vec<usize>,
    pub distances: Vec<f64>,
}

#[inline]
fn by_distance_then_index(a: &(f64, usize), b: &(f64, usize)) -> Ordering {
    a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
}

/// The `k` nearest entries of a distance row, excluding `query` itself.
pub fn knn_from_row(row: &[f64], query: usize, k: usize) -> Result<NeighborList> {
    let n = row.len();
    if k == 0 || k + 1 > n {
        return Err(Error::invalid(format!(
            "k={k} out of range for {n} samples (need 1 <= k <= N-1)"
        )));
    }
    let mut cand: Vec<(f64, usize)> = row
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != query)
        .map(|(j, &d)| (d, j))
        .collect();
    if k < cand.len() {
        cand.select_nth_unstable_by(k - 1, by_distance_then_index);
        cand.truncate(k);
    }
    cand.sort_unstable_by(by_distance_then_index);
    Ok(NeighborList {
        query,
        neighbors: cand.iter().map(|c| c.1).collect(),
        distances: cand.iter().map(|c| c.0).collect(),
    })
}

pub fn knn(set: &EmbeddedSet, query: usize, k: usize) -> Result<NeighborList> {
    if query >= set.len() {
        return Err(Error::invalid(format!("query {query} out of range")));
    }
    knn_from_row(&set.distances_from(query), query, k)
}

/// Nearest-rank percentile: the ⌈p/100·n⌉-th smallest value, `p` in (0, 100].
pub fn percentile(values: &[f64], p: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::invalid("percentile of an empty set"));
    }
    if !(p > 0.0 && p <= 100.0) {
        return Err(Error::invalid(format!("percentile {p} outside (0, 100]")));
    }
    let mut sorted = values.to_vec();
    sorted.sort_unstable_by(f64::total_cmp);
    Ok(sorted[nearest_rank_index(sorted.len(), p)])
}

pub(crate) fn nearest_rank_index(n: usize, p: f64) -> usize {
    let rank = (p / 100.0 * n as f64).ceil() as usize;
    rank.clamp(1, n) - 1
}
