//! Label-based evaluation and figure data.
//!
//! This is the only module that reads labels. Everything else in the crate
//! works on vectors and indices alone.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use ndarray::{Array2, ArrayView2};
use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::coupling::subset_samples;
use crate::error::{Error, Result};
use crate::grouping::GroupSet;
use crate::neighbors::{knn_from_row, DistanceMatrix, EmbeddedSet};
use crate::partition::Partition;
use crate::seed::{derive_seed, rng_from};

/// Distance ratio below which a neighbour counts as reliably ranked.
pub const RELIABLE_RATIO: f64 = 0.95;
/// Perturbations per noise level in [`rank_stability_under_noise`].
pub const NOISE_TRIALS: usize = 20;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricsSnapshot {
    pub knn_accuracy: f64,
    pub nmi: f64,
    pub coverage_overall: f64,
    pub coverage_per_subset: Vec<f64>,
    pub correctness_by_size: BTreeMap<usize, f64>,
}

fn check_labels(labels: &[u32], n: usize) -> Result<()> {
    if labels.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            found: labels.len(),
        });
    }
    Ok(())
}

/// Leave-one-out majority vote among the `k` nearest neighbours; vote ties go
/// to the smaller label id.
pub fn knn_accuracy(embeddings: ArrayView2<'_, f64>, labels: &[u32], k: usize) -> Result<f64> {
    let set = EmbeddedSet::from_view(embeddings)?;
    check_labels(labels, set.len())?;
    knn_accuracy_with(&DistanceMatrix::new(&set), labels, k)
}

pub fn knn_accuracy_with(dist: &DistanceMatrix, labels: &[u32], k: usize) -> Result<f64> {
    check_labels(labels, dist.len())?;
    let num_labels = labels.iter().copied().max().unwrap_or(0) as usize + 1;
    let hits = (0..dist.len())
        .into_par_iter()
        .map(|q| -> Result<usize> {
            let nl = knn_from_row(dist.row(q), q, k)?;
            let mut votes = vec![0usize; num_labels];
            for &j in &nl.neighbors {
                votes[labels[j] as usize] += 1;
            }
            // max_by_key keeps the last maximum; scan from the top label down.
            let winner = (0..num_labels).rev().max_by_key(|&l| votes[l]).unwrap_or(0);
            Ok(usize::from(winner == labels[q] as usize))
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .sum::<usize>();
    Ok(hits as f64 / dist.len() as f64)
}

/// Count of the most frequent label among `members`.
fn modal_count(members: &[usize], labels: &[u32]) -> usize {
    let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
    for &m in members {
        *counts.entry(labels[m]).or_default() += 1;
    }
    counts.values().copied().max().unwrap_or(0)
}

/// Per group size h: mean over groups of size h of modal-label count / h.
pub fn group_correctness(groups: &GroupSet, labels: &[u32]) -> Result<BTreeMap<usize, f64>> {
    check_labels(labels, groups.num_samples())?;
    let mut acc: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for g in &groups.groups {
        let e = acc.entry(g.len()).or_default();
        e.0 += modal_count(&g.members, labels) as f64 / g.len() as f64;
        e.1 += 1;
    }
    Ok(acc.into_iter().map(|(h, (s, c))| (h, s / c as f64)).collect())
}

/// Modal-label fraction averaged over all groups regardless of size.
pub fn mean_group_correctness(groups: &GroupSet, labels: &[u32]) -> Result<f64> {
    check_labels(labels, groups.num_samples())?;
    if groups.is_empty() {
        return Ok(f64::NAN);
    }
    Ok(groups
        .groups
        .iter()
        .map(|g| modal_count(&g.members, labels) as f64 / g.len() as f64)
        .sum::<f64>()
        / groups.len() as f64)
}

/// Monte-Carlo mean correctness of `trials` uniformly random h-subsets.
pub fn random_group_correctness(labels: &[u32], h: usize, trials: usize, seed: u64) -> Result<f64> {
    if h == 0 || h > labels.len() || trials == 0 {
        return Err(Error::invalid("need 1 <= h <= N and at least one trial"));
    }
    let mut rng = rng_from(seed);
    let total: f64 = (0..trials)
        .map(|_| {
            let members = sample(&mut rng, labels.len(), h).into_vec();
            modal_count(&members, labels) as f64 / h as f64
        })
        .sum();
    Ok(total / trials as f64)
}

/// Normalized mutual information, arithmetic-mean normalization. Two
/// single-cluster labelings score 1.
pub fn nmi(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            found: b.len(),
        });
    }
    if a.is_empty() {
        return Err(Error::invalid("NMI of empty labelings"));
    }
    let n = a.len() as f64;
    let mut joint: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    let mut pa: BTreeMap<usize, f64> = BTreeMap::new();
    let mut pb: BTreeMap<usize, f64> = BTreeMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *joint.entry((x, y)).or_default() += 1.0;
        *pa.entry(x).or_default() += 1.0;
        *pb.entry(y).or_default() += 1.0;
    }
    let entropy = |m: &BTreeMap<usize, f64>| -> f64 {
        m.values().map(|&c| -(c / n) * (c / n).ln()).sum()
    };
    let (ha, hb) = (entropy(&pa), entropy(&pb));
    if ha == 0.0 && hb == 0.0 {
        return Ok(1.0);
    }
    let mi: f64 = joint
        .iter()
        .map(|(&(x, y), &c)| (c / n) * ((c * n) / (pa[&x] * pb[&y])).ln())
        .sum();
    Ok((2.0 * mi / (ha + hb)).clamp(0.0, 1.0))
}

/// Connected components of the overlap graph of groups, as a component id
/// per sample (`None` for samples outside every group).
pub fn group_components(groups: &GroupSet) -> Vec<Option<usize>> {
    let n = groups.num_samples();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    let mut covered = vec![false; n];
    for g in &groups.groups {
        for &m in &g.members {
            covered[m] = true;
            let (ra, rb) = (find(&mut parent, g.members[0]), find(&mut parent, m));
            if ra != rb {
                parent[rb.max(ra)] = rb.min(ra);
            }
        }
    }
    let mut ids: BTreeMap<usize, usize> = BTreeMap::new();
    (0..n)
        .map(|s| {
            covered[s].then(|| {
                let root = find(&mut parent, s);
                let next = ids.len();
                *ids.entry(root).or_insert(next)
            })
        })
        .collect()
}

/// NMI between labels and agglomerated group components, over covered
/// samples only.
pub fn group_nmi(groups: &GroupSet, labels: &[u32]) -> Result<f64> {
    check_labels(labels, groups.num_samples())?;
    let comps = group_components(groups);
    let (truth, found): (Vec<usize>, Vec<usize>) = comps
        .iter()
        .enumerate()
        .filter_map(|(s, c)| c.map(|c| (labels[s] as usize, c)))
        .unzip();
    if truth.is_empty() {
        return Err(Error::DegenerateGrouping("no sample is covered by a group".into()));
    }
    nmi(&truth, &found)
}

/// Overall and per-subset fraction of samples covered by the partition.
pub fn subset_coverage(groups: &GroupSet, partition: &Partition) -> (f64, Vec<f64>) {
    let n = groups.num_samples().max(1) as f64;
    let per: Vec<Vec<usize>> = subset_samples(groups, partition);
    let mut all: Vec<usize> = per.iter().flatten().copied().collect();
    all.sort_unstable();
    all.dedup();
    (all.len() as f64 / n, per.iter().map(|s| s.len() as f64 / n).collect())
}

pub fn snapshot(
    embeddings: ArrayView2<'_, f64>,
    labels: &[u32],
    k: usize,
    groups: &GroupSet,
    partition: &Partition,
) -> Result<MetricsSnapshot> {
    let (coverage_overall, coverage_per_subset) = subset_coverage(groups, partition);
    Ok(MetricsSnapshot {
        knn_accuracy: knn_accuracy(embeddings, labels, k)?,
        nmi: group_nmi(groups, labels).unwrap_or(0.0),
        coverage_overall,
        coverage_per_subset,
        correctness_by_size: group_correctness(groups, labels)?,
    })
}

/// Sorted distances from `query` to every other sample.
pub fn sorted_similarity_curve(embeddings: ArrayView2<'_, f64>, query: usize) -> Result<Vec<f64>> {
    let set = EmbeddedSet::from_view(embeddings)?;
    if query >= set.len() {
        return Err(Error::invalid(format!("query {query} out of range")));
    }
    let mut d = set.distances_from(query);
    d.swap_remove(query);
    d.sort_unstable_by(f64::total_cmp);
    Ok(d)
}

/// d_r / d_{r+1} for the sorted neighbour distances of one query; 0/0 is 1.
pub fn consecutive_ratios(sorted: &[f64]) -> Vec<f64> {
    sorted
        .windows(2)
        .map(|w| if w[1] == 0.0 { 1.0 } else { w[0] / w[1] })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct RatioCurve {
    /// Entry r-1 is the mean over queries of d_r / d_{r+1}.
    pub mean_ratio: Vec<f64>,
    /// Query/rank pairs with ratio below [`RELIABLE_RATIO`].
    pub below_threshold: usize,
}

pub fn nn_ratio_curve(embeddings: ArrayView2<'_, f64>) -> Result<RatioCurve> {
    let set = EmbeddedSet::from_view(embeddings)?;
    let n = set.len();
    if n < 3 {
        return Err(Error::invalid("ratio curve needs at least three samples"));
    }
    let per_query: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|q| {
            let mut d = set.distances_from(q);
            d.swap_remove(q);
            d.sort_unstable_by(f64::total_cmp);
            consecutive_ratios(&d)
        })
        .collect();
    let ranks = n - 2;
    let mut mean_ratio = vec![0.0; ranks];
    let mut below_threshold = 0;
    for ratios in &per_query {
        for (r, &v) in ratios.iter().enumerate() {
            mean_ratio[r] += v;
            below_threshold += usize::from(v < RELIABLE_RATIO);
        }
    }
    mean_ratio.iter_mut().for_each(|v| *v /= n as f64);
    Ok(RatioCurve {
        mean_ratio,
        below_threshold,
    })
}

/// For every neighbour of `query` (in unperturbed rank order), the smallest
/// σ² in `noise_grid` at which its rank changes in at least half of
/// [`NOISE_TRIALS`] perturbations; `f64::INFINITY` if it never does.
///
/// Each trial adds N(0, σ²) noise to every coordinate of every sample. A
/// neighbour tied with another in the clean ranking has no well-defined rank,
/// so any positive noise counts as a change for it.
pub fn rank_stability_under_noise(
    embeddings: ArrayView2<'_, f64>,
    query: usize,
    noise_grid: &[f64],
    seed: u64,
) -> Result<Vec<f64>> {
    if noise_grid.is_empty() {
        return Err(Error::invalid("noise grid is empty"));
    }
    if noise_grid.windows(2).any(|w| w[0] > w[1]) || noise_grid.iter().any(|&s| !(s >= 0.0)) {
        return Err(Error::invalid("noise grid must be ascending and nonnegative"));
    }
    let set = EmbeddedSet::from_view(embeddings)?;
    let n = set.len();
    if query >= n || n < 2 {
        return Err(Error::invalid(format!("query {query} out of range")));
    }
    let order = |points: &EmbeddedSet| -> Vec<usize> {
        let d = points.distances_from(query);
        let mut idx: Vec<usize> = (0..n).filter(|&j| j != query).collect();
        idx.sort_by(|&a, &b| d[a].total_cmp(&d[b]).then(a.cmp(&b)));
        idx
    };
    let clean = order(&set);
    let clean_d = set.distances_from(query);
    let tied: Vec<bool> = (0..clean.len())
        .map(|r| {
            let d = clean_d[clean[r]];
            (r > 0 && clean_d[clean[r - 1]] == d) || (r + 1 < clean.len() && clean_d[clean[r + 1]] == d)
        })
        .collect();

    let mut flip = vec![f64::INFINITY; clean.len()];
    for (level, &sigma2) in noise_grid.iter().enumerate() {
        if sigma2 == 0.0 {
            continue;
        }
        let changes: Vec<Vec<bool>> = (0..NOISE_TRIALS)
            .into_par_iter()
            .map(|t| {
                let mut rng = rng_from(derive_seed(seed, level as u64, t as u64));
                let normal = Normal::new(0.0, sigma2.sqrt()).expect("finite σ");
                let noisy = Array2::from_shape_fn(embeddings.raw_dim(), |ix| {
                    embeddings[ix] + normal.sample(&mut rng)
                });
                let perturbed = order(&EmbeddedSet::new(noisy).expect("finite"));
                let mut rank_of = vec![0; n];
                for (r, &j) in perturbed.iter().enumerate() {
                    rank_of[j] = r;
                }
                clean
                    .iter()
                    .enumerate()
                    .map(|(r, &j)| tied[r] || rank_of[j] != r)
                    .collect()
            })
            .collect();
        for r in 0..clean.len() {
            let count = changes.iter().filter(|c| c[r]).count();
            if flip[r].is_infinite() && 2 * count >= NOISE_TRIALS {
                flip[r] = sigma2;
            }
        }
    }
    Ok(flip)
}

/// Per group size: group count, correctness, random-group correctness and
/// the fraction of samples covered by groups of that size.
#[derive(Debug, Clone, PartialEq)]
pub struct SizeRow {
    pub h: usize,
    pub num_groups: usize,
    pub correctness: f64,
    pub random_correctness: f64,
    pub coverage: f64,
}

pub fn correctness_coverage_by_size(
    groups: &GroupSet,
    labels: &[u32],
    random_trials: usize,
    seed: u64,
) -> Result<Vec<SizeRow>> {
    let correctness = group_correctness(groups, labels)?;
    let n = groups.num_samples();
    correctness
        .into_iter()
        .map(|(h, c)| {
            let mut covered = vec![false; n];
            let mut count = 0;
            for g in groups.groups.iter().filter(|g| g.len() == h) {
                count += 1;
                g.members.iter().for_each(|&m| covered[m] = true);
            }
            Ok(SizeRow {
                h,
                num_groups: count,
                correctness: c,
                random_correctness: random_group_correctness(
                    labels,
                    h,
                    random_trials,
                    derive_seed(seed, h as u64, 0),
                )?,
                coverage: covered.iter().filter(|&&c| c).count() as f64 / n as f64,
            })
        })
        .collect()
}

pub fn fig2_csv(curve: &RatioCurve) -> String {
    let mut out = String::from("rank,mean_ratio\n");
    for (r, v) in curve.mean_ratio.iter().enumerate() {
        let _ = writeln!(out, "{},{v:.8}", r + 1);
    }
    out
}

pub fn fig3_csv(sorted: &[f64]) -> String {
    let mut out = String::from("rank,distance\n");
    for (r, d) in sorted.iter().enumerate() {
        let _ = writeln!(out, "{},{d:.8}", r + 1);
    }
    out
}

pub fn fig4_csv(sorted: &[f64], flips: &[f64]) -> String {
    let mut out = String::from("rank,distance,flip_sigma2\n");
    for (r, (d, f)) in sorted.iter().zip(flips).enumerate() {
        let _ = writeln!(out, "{},{d:.8},{f}", r + 1);
    }
    out
}

pub fn fig5a_csv(rows: &[SizeRow]) -> String {
    let mut out = String::from("h,num_groups,correctness,random_correctness,coverage\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{:.6},{:.6},{:.6}",
            r.h, r.num_groups, r.correctness, r.random_correctness, r.coverage
        );
    }
    out
}

pub fn fig5b_csv(data: &[f64], targets: &[f64]) -> String {
    let mut out = String::from("source,distance\n");
    for d in data {
        let _ = writeln!(out, "data,{d:.6}");
    }
    for d in targets {
        let _ = writeln!(out, "targets,{d:.6}");
    }
    out
}

/// `(iteration, correctness by size)` rows.
pub fn fig7_csv(history: &[(usize, BTreeMap<usize, f64>)]) -> String {
    let mut out = String::from("iteration,h,correctness\n");
    for (it, by_size) in history {
        for (h, c) in by_size {
            let _ = writeln!(out, "{it},{h},{c:.6}");
        }
    }
    out
}

/// `(iteration, overall, per-subset mean)` rows.
pub fn fig8_csv(history: &[(usize, f64, f64)]) -> String {
    let mut out = String::from("iteration,overall,per_subset_mean\n");
    for (it, overall, mean) in history {
        let _ = writeln!(out, "{it},{overall:.6},{mean:.6}");
    }
    out
}

/// Deterministic subsample of at most `max` values.
pub fn thin(values: &[f64], max: usize, seed: u64) -> Vec<f64> {
    if values.len() <= max {
        return values.to_vec();
    }
    let mut rng = rng_from(seed);
    let mut idx = sample(&mut rng, values.len(), max).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| values[i]).collect()
}

/// Uniform random permutation of `labels` (for chance-level baselines).
pub fn shuffled_labels(labels: &[u32], seed: u64) -> Vec<u32> {
    let mut out = labels.to_vec();
    out.shuffle(&mut rng_from(seed));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::Rng;
    use rand_distr::StandardNormal;

    use crate::grouping::Group;

    fn group(members: &[usize]) -> Group {
        Group {
            seed: members[0],
            members: members.to_vec(),
            compactness: 0.0,
        }
    }

    fn two_clusters(per: usize, seed: u64) -> (Array2<f64>, Vec<u32>) {
        let mut rng = rng_from(seed);
        let mut x = Array2::zeros((2 * per, 3));
        let mut labels = Vec::new();
        for i in 0..2 * per {
            let c = i / per;
            for d in 0..3 {
                x[[i, d]] = 0.1 * rng.sample::<f64, _>(StandardNormal) + if d == 0 { 6.0 * c as f64 * 0.1 } else { 0.0 };
            }
            labels.push(c as u32);
        }
        (x, labels)
    }

    #[test]
    fn separated_clusters_are_perfect() {
        let (x, labels) = two_clusters(50, 1);
        assert_eq!(knn_accuracy(x.view(), &labels, 3).unwrap(), 1.0);
    }

    #[test]
    fn permuted_labels_are_at_chance() {
        let mut rng = rng_from(2);
        let x = Array2::from_shape_fn((2000, 4), |_| rng.sample::<f64, _>(StandardNormal));
        let labels: Vec<u32> = (0..2000).map(|i| (i % 2) as u32).collect();
        let labels = shuffled_labels(&labels, 3);
        let acc = knn_accuracy(x.view(), &labels, 1).unwrap();
        assert!((acc - 0.5).abs() <= 0.05, "{acc}");
    }

    /// Full sort per query, explicit vote counting.
    fn naive_knn_accuracy(x: &Array2<f64>, labels: &[u32], k: usize) -> f64 {
        let n = x.nrows();
        let mut hits = 0;
        for q in 0..n {
            let mut d: Vec<(f64, usize)> = (0..n)
                .filter(|&j| j != q)
                .map(|j| {
                    let s: f64 = (0..x.ncols()).map(|c| (x[[q, c]] - x[[j, c]]).powi(2)).sum();
                    (s.sqrt(), j)
                })
                .collect();
            d.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
            let mut votes = [0usize; 8];
            for &(_, j) in &d[..k] {
                votes[labels[j] as usize] += 1;
            }
            let mut best = 0;
            for l in 1..8 {
                if votes[l] > votes[best] {
                    best = l;
                }
            }
            if best == labels[q] as usize {
                hits += 1;
            }
        }
        hits as f64 / n as f64
    }

    #[test]
    fn knn_matches_scalar_oracle() {
        for seed in 0..5 {
            let mut rng = rng_from(seed);
            let x = Array2::from_shape_fn((30, 2), |_| rng.random::<f64>());
            let labels: Vec<u32> = (0..30).map(|_| rng.random_range(0..3)).collect();
            for k in [1, 2, 4, 5] {
                assert_eq!(
                    knn_accuracy(x.view(), &labels, k).unwrap(),
                    naive_knn_accuracy(&x, &labels, k)
                );
            }
        }
    }

    #[test]
    fn vote_ties_go_to_smaller_label() {
        // Query 0 has neighbours 1 (label 1) and 2 (label 0) at k=2.
        let x = array![[0.0], [1.0], [-1.5], [10.0]];
        let labels = [0, 1, 0, 1];
        let acc = knn_accuracy(x.view(), &labels, 2).unwrap();
        // q0 → {1,2} tie → 0 ✓; q1 → {0,2} → 0 ✗; q2 → {0,1} tie → 0 ✓; q3 → {1,0} tie → 0 ✗
        assert_eq!(acc, 0.5);
        assert!(knn_accuracy(x.view(), &labels, 4).is_err());
        assert!(knn_accuracy(x.view(), &labels[..3], 1).is_err());
    }

    #[test]
    fn correctness_examples() {
        let labels = [0, 0, 0, 0, 1, 1, 2, 2];
        let groups = GroupSet::new(vec![group(&[0, 1, 2, 3]), group(&[2, 3, 4, 5])], 8).unwrap();
        let c = group_correctness(&groups, &labels).unwrap();
        assert_eq!(c[&4], (1.0 + 0.5) / 2.0);
        let single = GroupSet::new(vec![group(&[2, 3, 4, 5])], 8).unwrap();
        assert_eq!(group_correctness(&single, &labels).unwrap()[&4], 0.5);
    }

    fn binom(n: u64, k: u64) -> f64 {
        (0..k).map(|i| (n - i) as f64 / (i + 1) as f64).product()
    }

    /// E[max class count]/h for h draws without replacement, by enumerating
    /// every count vector.
    fn expected_modal_fraction(classes: usize, per_class: u64, h: usize) -> f64 {
        fn rec(c: usize, left: usize, counts: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
            if c == 1 {
                counts.push(left);
                out.push(counts.clone());
                counts.pop();
                return;
            }
            for k in 0..=left {
                counts.push(k);
                rec(c - 1, left - k, counts, out);
                counts.pop();
            }
        }
        let mut all = Vec::new();
        rec(classes, h, &mut Vec::new(), &mut all);
        let total = binom(classes as u64 * per_class, h as u64);
        all.iter()
            .map(|v| {
                let p: f64 = v.iter().map(|&k| binom(per_class, k as u64)).product::<f64>() / total;
                p * *v.iter().max().unwrap() as f64 / h as f64
            })
            .sum()
    }

    #[test]
    fn random_groups_match_hypergeometric_expectation() {
        let labels: Vec<u32> = (0..2000).map(|i| (i / 200) as u32).collect();
        let trials = 4000;
        let want = expected_modal_fraction(10, 200, 4);
        let got = random_group_correctness(&labels, 4, trials, 9).unwrap();
        // Per-group modal fraction lies in [0.25, 1]; its sd is below 0.2.
        let sd = 0.2 / (trials as f64).sqrt();
        assert!((got - want).abs() <= 3.0 * sd, "{got} vs {want}");
    }

    #[test]
    fn nmi_examples() {
        assert!((nmi(&[0, 0, 1, 1], &[5, 5, 7, 7]).unwrap() - 1.0).abs() < 1e-12);
        assert!(nmi(&[0, 1, 0, 1], &[0, 0, 1, 1]).unwrap().abs() < 1e-12);
        assert_eq!(nmi(&[3, 3], &[1, 1]).unwrap(), 1.0);
        // 2·I/(H_a+H_b) by hand: a = {0,0,1}, b = {0,1,1}
        let ln = f64::ln;
        let h = -(2.0 / 3.0) * ln(2.0 / 3.0) - (1.0 / 3.0) * ln(1.0 / 3.0);
        let i = (1.0 / 3.0) * ln((1.0 / 3.0) / ((2.0 / 3.0) * (1.0 / 3.0)))
            + (1.0 / 3.0) * ln((1.0 / 3.0) / ((2.0 / 3.0) * (2.0 / 3.0)))
            + (1.0 / 3.0) * ln((1.0 / 3.0) / ((1.0 / 3.0) * (2.0 / 3.0)));
        assert!((nmi(&[0, 0, 1], &[0, 1, 1]).unwrap() - 2.0 * i / (2.0 * h)).abs() < 1e-12);
    }

    #[test]
    fn components_merge_overlapping_groups() {
        let groups = GroupSet::new(vec![group(&[0, 1]), group(&[1, 2]), group(&[4, 5])], 7).unwrap();
        let c = group_components(&groups);
        assert_eq!(c, vec![Some(0), Some(0), Some(0), None, Some(1), Some(1), None]);
        let labels = [0, 0, 0, 2, 1, 1, 2];
        assert!((group_nmi(&groups, &labels).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn coverage_counts_subset_samples() {
        let groups = GroupSet::new(vec![group(&[0, 1]), group(&[1, 2]), group(&[4, 5])], 10).unwrap();
        let p = Partition::from_subsets(3, vec![vec![0, 1], vec![2]]);
        let (overall, per) = subset_coverage(&groups, &p);
        assert_eq!(overall, 0.5);
        assert_eq!(per, vec![0.3, 0.2]);
    }

    #[test]
    fn ratio_examples() {
        let x = array![[0.0], [1.0], [2.0], [3.0]];
        let end = sorted_similarity_curve(x.view(), 0).unwrap();
        assert_eq!(consecutive_ratios(&end)[0], 0.5);
        let curve = nn_ratio_curve(x.view()).unwrap();
        // Rank 1: ends give 1/2, inner points 1/1.
        assert_eq!(curve.mean_ratio[0], 0.75);
        let same = Array2::<f64>::zeros((5, 2));
        let curve = nn_ratio_curve(same.view()).unwrap();
        assert!(curve.mean_ratio.iter().all(|&r| r == 1.0));
        assert_eq!(curve.below_threshold, 0);
        assert!(nn_ratio_curve(array![[0.0], [1.0]].view()).is_err());
    }

    #[test]
    fn ratio_curve_matches_naive_oracle() {
        let mut rng = rng_from(4);
        let x = Array2::from_shape_fn((200, 3), |_| rng.random::<f64>());
        let curve = nn_ratio_curve(x.view()).unwrap();
        let mut sums = vec![0.0; 198];
        let mut below = 0;
        for q in 0..200 {
            let mut d: Vec<f64> = (0..200)
                .filter(|&j| j != q)
                .map(|j| {
                    (0..3)
                        .map(|c| (x[[q, c]] - x[[j, c]]).powi(2))
                        .sum::<f64>()
                        .sqrt()
                })
                .collect();
            d.sort_by(|a, b| a.partial_cmp(b).unwrap());
            for r in 0..198 {
                let v = if d[r + 1] == 0.0 { 1.0 } else { d[r] / d[r + 1] };
                sums[r] += v;
                if v < 0.95 {
                    below += 1;
                }
            }
        }
        for r in 0..198 {
            assert!((curve.mean_ratio[r] - sums[r] / 200.0).abs() < 1e-9);
        }
        assert_eq!(curve.below_threshold, below);
        assert!(curve.mean_ratio.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn sorted_curve_contract() {
        let mut rng = rng_from(5);
        let x = Array2::from_shape_fn((40, 2), |_| rng.random::<f64>());
        let s = sorted_similarity_curve(x.view(), 3).unwrap();
        assert_eq!(s.len(), 39);
        assert!(s.windows(2).all(|w| w[0] <= w[1]));
        let mut oracle: Vec<f64> = (0..40)
            .filter(|&j| j != 3)
            .map(|j| ((x[[3, 0]] - x[[j, 0]]).powi(2) + (x[[3, 1]] - x[[j, 1]]).powi(2)).sqrt())
            .collect();
        oracle.sort_by(|a, b| a.partial_cmp(b).unwrap());
        for (a, b) in s.iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    const GRID: [f64; 8] = [0.0001, 0.001, 0.01, 0.05, 0.1, 0.5, 1.0, 2.0];

    #[test]
    fn isolated_neighbour_is_stable_longest() {
        // Neighbours at 1.0, 1.1, 1.2 and then far out at 2.2 (10× the gap).
        let x = array![[0.0, 0.0], [1.0, 0.0], [0.0, 1.1], [-1.2, 0.0], [0.0, -2.2]];
        let flips = rank_stability_under_noise(x.view(), 0, &GRID, 3).unwrap();
        assert_eq!(flips.len(), 4);
        let closest_gap = flips[0].min(flips[1]);
        assert!(flips[3] > closest_gap, "{flips:?}");
    }

    #[test]
    fn zero_noise_never_flips() {
        let x = array![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [3.0, 3.0]];
        let flips = rank_stability_under_noise(x.view(), 0, &[0.0], 1).unwrap();
        assert!(flips.iter().all(|f| f.is_infinite()));
        assert!(rank_stability_under_noise(x.view(), 0, &[], 1).is_err());
        assert!(rank_stability_under_noise(x.view(), 0, &[0.1, 0.01], 1).is_err());
    }

    #[test]
    fn equidistant_neighbours_flip_at_first_level() {
        let x = array![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [5.0, 5.0]];
        let flips = rank_stability_under_noise(x.view(), 0, &GRID, 2).unwrap();
        assert_eq!(flips[0], GRID[0]);
        assert_eq!(flips[1], GRID[0]);
    }

    #[test]
    fn figure_csvs_have_headers() {
        assert!(fig2_csv(&RatioCurve {
            mean_ratio: vec![0.5],
            below_threshold: 1
        })
        .starts_with("rank,mean_ratio\n1,0.5"));
        assert!(fig5b_csv(&[1.0], &[2.0]).contains("data,1.000000\ntargets,2.000000"));
        let mut by = BTreeMap::new();
        by.insert(3, 0.9);
        assert_eq!(fig7_csv(&[(1, by)]), "iteration,h,correctness\n1,3,0.900000\n");
        assert_eq!(fig8_csv(&[(2, 0.5, 0.25)]), "iteration,overall,per_subset_mean\n2,0.500000,0.250000\n");
    }

    #[test]
    fn thin_is_deterministic_subset() {
        let v: Vec<f64> = (0..100).map(f64::from).collect();
        let a = thin(&v, 10, 1);
        assert_eq!(a, thin(&v, 10, 1));
        assert_eq!(a.len(), 10);
        assert!(a.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(thin(&v, 200, 1), v);
    }
}
