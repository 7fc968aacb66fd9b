//! Target spaces: group centroids drawn uniformly from the unit hypersphere,
//! with per-member targets drawn from an isotropic Gaussian around them.

use ndarray::{Array2, ArrayView2};
use rand::seq::index::sample;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::grouping::GroupSet;
use crate::neighbors::{l2, EmbeddedSet};
use crate::seed::rng_from;

/// Pair budget for distance pooling; larger pools are subsampled.
pub const MAX_POOLED_PAIRS: usize = 5_000_000;

const POOL_SEED: u64 = 0x7461_7267_6574;

#[derive(Debug, Clone, PartialEq)]
pub struct TargetSpace {
    pub centroids: Array2<f64>,
    /// One row per (group, member) slot, groups contiguous in input order.
    pub targets: Array2<f64>,
    /// Owning group (row of `centroids`) of every target.
    pub owner: Vec<usize>,
    pub sigma2: f64,
}

impl TargetSpace {
    pub fn dim(&self) -> usize {
        self.targets.ncols()
    }

    pub fn len(&self) -> usize {
        self.targets.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.nrows() == 0
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.targets.view()
    }
}

fn draw_unit<R: Rng>(rng: &mut R, dim: usize, out: &mut [f64]) {
    loop {
        for v in out.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        let norm = out.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 1e-300 {
            out.iter_mut().for_each(|v| *v /= norm);
            debug_assert_eq!(out.len(), dim);
            return;
        }
    }
}

fn sphere_rows<R: Rng>(rng: &mut R, dim: usize, count: usize) -> Array2<f64> {
    let mut out = Array2::zeros((count, dim));
    for mut row in out.rows_mut() {
        draw_unit(rng, dim, row.as_slice_mut().expect("contiguous row"));
    }
    out
}

/// `count` i.i.d. uniform points on S^{D-1} (normalized standard normals).
pub fn sample_sphere(dim: usize, count: usize, seed: u64) -> Result<Array2<f64>> {
    if dim < 2 {
        return Err(Error::invalid("sphere dimension must be at least 2"));
    }
    if count == 0 {
        return Err(Error::invalid("count must be at least 1"));
    }
    Ok(sphere_rows(&mut rng_from(seed), dim, count))
}

/// One centroid per group and `group_sizes[l]` targets from N(μ_l, σ²I).
pub fn build_target_space(
    group_sizes: &[usize],
    dim: usize,
    sigma2: f64,
    seed: u64,
) -> Result<TargetSpace> {
    if group_sizes.is_empty() {
        return Err(Error::invalid("target space needs at least one group"));
    }
    if dim < 2 {
        return Err(Error::invalid("target dimension must be at least 2"));
    }
    if !(sigma2 >= 0.0 && sigma2.is_finite()) {
        return Err(Error::invalid("σ² must be finite and nonnegative"));
    }
    let mut rng = rng_from(seed);
    let centroids = sphere_rows(&mut rng, dim, group_sizes.len());
    let total: usize = group_sizes.iter().sum();
    let sigma = sigma2.sqrt();
    let mut targets = Array2::zeros((total, dim));
    let mut owner = Vec::with_capacity(total);
    let mut row = 0;
    for (l, &size) in group_sizes.iter().enumerate() {
        for _ in 0..size {
            for (t, mu) in targets.row_mut(row).iter_mut().zip(centroids.row(l)) {
                *t = if sigma == 0.0 {
                    *mu
                } else {
                    mu + sigma * rng.sample::<f64, _>(StandardNormal)
                };
            }
            owner.push(l);
            row += 1;
        }
    }
    Ok(TargetSpace {
        centroids,
        targets,
        owner,
        sigma2,
    })
}

/// `count` targets, each its own uniform centroid (no Gaussian hubs).
pub fn uniform_target_space(count: usize, dim: usize, seed: u64) -> Result<TargetSpace> {
    let centroids = sample_sphere(dim, count, seed)?;
    Ok(TargetSpace {
        targets: centroids.clone(),
        centroids,
        owner: (0..count).collect(),
        sigma2: 0.0,
    })
}

/// Pairwise distances between rows of `points` (all pairs, or a fixed-seed
/// subsample of [`MAX_POOLED_PAIRS`] when there are more).
pub fn pooled_pair_distances(points: ArrayView2<'_, f64>) -> Vec<f64> {
    let n = points.nrows();
    let pairs = n * n.saturating_sub(1) / 2;
    if pairs <= MAX_POOLED_PAIRS {
        let mut out = Vec::with_capacity(pairs);
        for i in 0..n {
            for j in (i + 1)..n {
                out.push(l2(points.row(i), points.row(j)));
            }
        }
        return out;
    }
    let mut rng = rng_from(POOL_SEED);
    (0..MAX_POOLED_PAIRS)
        .map(|_| {
            let ij = sample(&mut rng, n, 2);
            l2(points.row(ij.index(0)), points.row(ij.index(1)))
        })
        .collect()
}

/// Two-sample Kolmogorov–Smirnov statistic sup |F_a − F_b|.
pub fn ks_statistic(a: &[f64], b: &[f64]) -> f64 {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_unstable_by(f64::total_cmp);
    b.sort_unstable_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut sup = 0.0f64;
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        sup = sup.max((i as f64 / na - j as f64 / nb).abs());
    }
    sup
}

fn normalize_mean(values: &mut [f64]) {
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    if mean > 0.0 {
        values.iter_mut().for_each(|v| *v /= mean);
    }
}

/// Rows of `set` for every (group, member) slot, groups in order.
pub fn slot_points(set: &EmbeddedSet, groups: &GroupSet) -> Array2<f64> {
    let slots: Vec<usize> = groups
        .groups
        .iter()
        .flat_map(|g| g.members.iter().copied())
        .collect();
    set.points().select(ndarray::Axis(0), &slots)
}

/// KS distance between the unit-mean pairwise distances of the group slots
/// in `set` and of the targets in `space`.
pub fn distance_distribution_match(
    set: &EmbeddedSet,
    groups: &GroupSet,
    space: &TargetSpace,
) -> Result<f64> {
    if groups.is_empty() {
        return Err(Error::invalid("no groups to compare"));
    }
    if space.len() < 2 {
        return Err(Error::invalid("need at least two targets"));
    }
    let mut data = pooled_pair_distances(slot_points(set, groups).view());
    let mut target = pooled_pair_distances(space.view());
    normalize_mean(&mut data);
    normalize_mean(&mut target);
    Ok(ks_statistic(&data, &target))
}

/// Equal-width histogram of `values` over [min, max].
pub fn histogram(values: &[f64], bins: usize) -> Vec<usize> {
    let mut counts = vec![0usize; bins.max(1)];
    if values.is_empty() {
        return counts;
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let width = (hi - lo) / counts.len() as f64;
    for &v in values {
        let b = if width > 0.0 {
            (((v - lo) / width) as usize).min(counts.len() - 1)
        } else {
            0
        };
        counts[b] += 1;
    }
    counts
}

/// Number of strict local maxima; a plateau counts once and the outside of
/// the histogram counts as zero.
pub fn count_local_maxima(counts: &[usize]) -> usize {
    let mut runs: Vec<usize> = Vec::new();
    for &c in counts {
        if runs.last() != Some(&c) {
            runs.push(c);
        }
    }
    (0..runs.len())
        .filter(|&i| {
            let left = if i == 0 { 0 } else { runs[i - 1] };
            let right = runs.get(i + 1).copied().unwrap_or(0);
            runs[i] > left && runs[i] > right
        })
        .count()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grouping::Group;

    #[test]
    fn sphere_vectors_are_unit() {
        let pts = sample_sphere(7, 200, 3).unwrap();
        for r in pts.rows() {
            let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-9);
        }
        assert!(sample_sphere(1, 5, 0).is_err());
        assert!(sample_sphere(3, 0, 0).is_err());
        assert_eq!(sample_sphere(4, 10, 9).unwrap(), sample_sphere(4, 10, 9).unwrap());
    }

    #[test]
    fn sphere_coordinates_center_on_zero() {
        let pts = sample_sphere(3, 10_000, 17).unwrap();
        for c in 0..3 {
            let mean = pts.column(c).sum() / 10_000.0;
            assert!(mean.abs() < 0.05, "coord {c}: {mean}");
        }
    }

    #[test]
    fn circle_angles_are_uniform() {
        let pts = sample_sphere(2, 10_000, 23).unwrap();
        let mut bins = [0usize; 8];
        for r in pts.rows() {
            let angle = r[1].atan2(r[0]) + std::f64::consts::PI;
            let b = ((angle / (2.0 * std::f64::consts::PI)) * 8.0) as usize;
            bins[b.min(7)] += 1;
        }
        let expected = 10_000.0 / 8.0;
        let chi2: f64 = bins
            .iter()
            .map(|&o| (o as f64 - expected).powi(2) / expected)
            .sum();
        // χ²(7) 99% quantile.
        assert!(chi2 < 18.475, "chi2 = {chi2}, bins {bins:?}");
    }

    #[test]
    fn zero_variance_targets_sit_on_centroids() {
        let ts = build_target_space(&[3, 2], 5, 0.0, 1).unwrap();
        for (t, &o) in ts.owner.iter().enumerate() {
            assert_eq!(ts.targets.row(t), ts.centroids.row(o));
        }
        assert_eq!(ts.owner, vec![0, 0, 0, 1, 1]);
    }

    #[test]
    fn counts_follow_group_sizes() {
        let ts = build_target_space(&[5], 4, 0.01, 2).unwrap();
        assert_eq!(ts.len(), 5);
        assert_eq!(ts.centroids.nrows(), 1);
        assert_eq!(ts.dim(), 4);
        for c in ts.centroids.rows() {
            assert!((c.dot(&c).sqrt() - 1.0).abs() < 1e-9);
        }
        assert!(build_target_space(&[], 4, 0.01, 2).is_err());
    }

    fn mean_within_between(ts: &TargetSpace) -> (f64, f64) {
        let (mut within, mut nw, mut between, mut nb) = (0.0, 0, 0.0, 0);
        for i in 0..ts.len() {
            for j in (i + 1)..ts.len() {
                let d = l2(ts.targets.row(i), ts.targets.row(j));
                if ts.owner[i] == ts.owner[j] {
                    within += d;
                    nw += 1;
                } else {
                    between += d;
                    nb += 1;
                }
            }
        }
        (within / nw as f64, between / nb as f64)
    }

    #[test]
    fn within_group_targets_are_much_closer() {
        let ts = build_target_space(&[6; 20], 16, 1e-4, 5).unwrap();
        let (within, between) = mean_within_between(&ts);
        assert!(between >= 5.0 * within, "{within} vs {between}");
    }

    #[test]
    fn within_between_means_follow_gaussian_geometry() {
        // Within: ‖N(0, 2σ²I)‖ has mean sqrt(2σ²)·E[χ_16] (E[χ_16] ≈ 3.9380).
        // Between: E‖μ_a − μ_b + noise‖² = 2 + 2·16·σ².
        let ts = build_target_space(&[6; 20], 16, 0.01, 5).unwrap();
        let (within, between) = mean_within_between(&ts);
        let chi16_mean = 3.938_025_6;
        assert!((within - (0.02f64).sqrt() * chi16_mean).abs() < 0.03, "{within}");
        assert!((between - (2.0f64 + 0.32).sqrt()).abs() < 0.06, "{between}");
        assert!(between > 2.5 * within);
    }

    fn groups_for(space: &TargetSpace) -> GroupSet {
        let mut lists: Vec<Vec<usize>> = vec![Vec::new(); space.centroids.nrows()];
        for (t, &o) in space.owner.iter().enumerate() {
            lists[o].push(t);
        }
        let groups = lists
            .into_iter()
            .map(|members| Group {
                seed: members[0],
                members,
                compactness: 0.0,
            })
            .collect();
        GroupSet::new(groups, space.len()).unwrap()
    }

    #[test]
    fn identical_samples_match_exactly() {
        let ts = build_target_space(&[4; 5], 8, 0.01, 3).unwrap();
        let set = EmbeddedSet::new(ts.targets.clone()).unwrap();
        let groups = groups_for(&ts);
        assert_eq!(distance_distribution_match(&set, &groups, &ts).unwrap(), 0.0);
    }

    #[test]
    fn sampler_is_self_consistent() {
        // 142 slots -> ~10k pairs on each side.
        let sizes = vec![2; 71];
        let a = build_target_space(&sizes, 16, 0.0025, 10).unwrap();
        let b = build_target_space(&sizes, 16, 0.0025, 11).unwrap();
        let set = EmbeddedSet::new(a.targets.clone()).unwrap();
        let score = distance_distribution_match(&set, &groups_for(&a), &b).unwrap();
        assert!(score < 0.05, "{score}");
    }

    #[test]
    fn hubs_fit_bimodal_data_better_than_uniform() {
        // Bimodal "data": tight clusters on a sphere, sampled independently.
        let sizes = vec![8; 25];
        let data = build_target_space(&sizes, 16, 0.003, 100).unwrap();
        let set = EmbeddedSet::new(data.targets.clone()).unwrap();
        let groups = groups_for(&data);
        let hubs = build_target_space(&sizes, 16, 0.0025, 101).unwrap();
        let uniform = uniform_target_space(200, 16, 102).unwrap();
        let hub_score = distance_distribution_match(&set, &groups, &hubs).unwrap();
        let uni_score = distance_distribution_match(&set, &groups, &uniform).unwrap();
        assert!(hub_score < uni_score, "{hub_score} vs {uni_score}");
    }

    #[test]
    fn zero_variance_distances_are_centroid_distances() {
        let ts = build_target_space(&[2, 3], 6, 0.0, 4).unwrap();
        let cd = l2(ts.centroids.row(0), ts.centroids.row(1));
        let pooled = pooled_pair_distances(ts.view());
        assert_eq!(pooled.len(), 10);
        let zeros = pooled.iter().filter(|&&d| d == 0.0).count();
        assert_eq!(zeros, 1 + 3);
        assert!(pooled.iter().filter(|&&d| d != 0.0).all(|&d| d == cd));
    }

    #[test]
    fn ks_and_modes() {
        assert_eq!(ks_statistic(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
        assert_eq!(ks_statistic(&[1.0, 2.0], &[3.0, 4.0]), 1.0);
        assert_eq!(count_local_maxima(&[0, 3, 1, 0, 2, 2, 1]), 2);
        assert_eq!(count_local_maxima(&[5, 4, 3]), 1);
        assert_eq!(count_local_maxima(&[1, 1, 1]), 1);
        assert_eq!(histogram(&[0.0, 0.5, 1.0], 2), vec![1, 2]);
    }

    #[test]
    fn hub_distances_are_bimodal() {
        let ts = build_target_space(&[10; 300], 16, 0.0025, 77).unwrap();
        let counts = histogram(&pooled_pair_distances(ts.view()), 50);
        assert_eq!(count_local_maxima(&counts), 2, "{counts:?}");
    }
}
