//! Transitivity triplets linking the subsets of a partition.
//!
//! If x_i (only in subset m) and x_j (only in subset n) share a group, and x_k
//! in subset n is reliably dissimilar to x_j, then x_i should sit closer to
//! x_j than to x_k. Those (i, j, k) become the transfer constraints of subset m.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;

use crate::embednet::TripletIndex;
use crate::error::{Error, Result};
use crate::grouping::GroupSet;
use crate::neighbors::{nearest_rank_index, DistanceMatrix, EmbeddedSet};
use crate::partition::Partition;
use crate::seed::{derive_seed, rng_from};

pub const DEFAULT_PER_ANCHOR_CAP: usize = 5;
pub const DEFAULT_DISSIM_PERCENTILE: f64 = 90.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Triplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
    /// (m, n): the anchor's subset and the subset holding positive and negative.
    pub source: (usize, usize),
}

impl Triplet {
    pub fn indices(&self) -> TripletIndex {
        (self.anchor, self.positive, self.negative)
    }
}

pub fn as_indices(triplets: &[Triplet]) -> Vec<TripletIndex> {
    triplets.iter().map(Triplet::indices).collect()
}

/// Distinct samples covered by each subset's groups, ascending.
pub fn subset_samples(groups: &GroupSet, partition: &Partition) -> Vec<Vec<usize>> {
    partition
        .subsets
        .iter()
        .map(|subset| {
            let mut samples: Vec<usize> = subset
                .iter()
                .flat_map(|&g| groups.groups[g].members.iter().copied())
                .collect();
            samples.sort_unstable();
            samples.dedup();
            samples
        })
        .collect()
}

/// Per-sample distance at the given percentile of its distances to all
/// other samples (nearest rank).
pub fn dissimilarity_thresholds(dist: &DistanceMatrix, percentile: f64) -> Result<Vec<f64>> {
    if !(percentile > 0.0 && percentile <= 100.0) {
        return Err(Error::invalid(format!("percentile {percentile} outside (0, 100]")));
    }
    let n = dist.len();
    if n < 2 {
        return Err(Error::invalid("need at least two samples"));
    }
    Ok((0..n)
        .into_par_iter()
        .map(|j| {
            let mut others: Vec<f64> = dist
                .row(j)
                .iter()
                .enumerate()
                .filter(|&(s, _)| s != j)
                .map(|(_, &d)| d)
                .collect();
            let idx = nearest_rank_index(others.len(), percentile);
            *others.select_nth_unstable_by(idx, f64::total_cmp).1
        })
        .collect())
}

pub fn mine_triplets(
    groups: &GroupSet,
    partition: &Partition,
    set: &EmbeddedSet,
    per_anchor_cap: usize,
    dissim_percentile: f64,
    seed: u64,
) -> Result<Vec<Vec<Triplet>>> {
    mine_triplets_with(
        groups,
        partition,
        &DistanceMatrix::new(set),
        per_anchor_cap,
        dissim_percentile,
        seed,
    )
}

/// 𝒯_1…𝒯_K. Each anchor of subset m receives at most `per_anchor_cap`
/// distinct triplets, drawn from its candidates with a seed derived from
/// (seed, m, anchor).
pub fn mine_triplets_with(
    groups: &GroupSet,
    partition: &Partition,
    dist: &DistanceMatrix,
    per_anchor_cap: usize,
    dissim_percentile: f64,
    seed: u64,
) -> Result<Vec<Vec<Triplet>>> {
    let n_samples = groups.num_samples();
    if dist.len() != n_samples {
        return Err(Error::DimensionMismatch {
            expected: n_samples,
            found: dist.len(),
        });
    }
    if partition.assignment.nrows() != groups.len()
        || partition.subsets.iter().flatten().any(|&g| g >= groups.len())
    {
        return Err(Error::invalid("partition does not match the group set"));
    }
    let k = partition.k();
    if k < 2 || per_anchor_cap == 0 {
        return Ok(vec![Vec::new(); k]);
    }
    let thresholds = dissimilarity_thresholds(dist, dissim_percentile)?;
    let samples = subset_samples(groups, partition);
    let mut inside = vec![vec![false; n_samples]; k];
    for (m, list) in samples.iter().enumerate() {
        for &s in list {
            inside[m][s] = true;
        }
    }
    let inside = &inside;
    let mut groups_of = vec![Vec::new(); n_samples];
    for (g, group) in groups.groups.iter().enumerate() {
        for &s in &group.members {
            groups_of[s].push(g);
        }
    }

    let per_subset = (0..k)
        .into_par_iter()
        .map(|m| {
            let mut eligible_cache: HashMap<(usize, usize), Vec<usize>> = HashMap::new();
            let mut out = Vec::new();
            for &i in &samples[m] {
                let mut pairs: Vec<(usize, usize)> = groups_of[i]
                    .iter()
                    .flat_map(|&g| groups.groups[g].members.iter().copied())
                    .filter(|&j| j != i && !inside[m][j])
                    .flat_map(|j| {
                        (0..k)
                            .filter(move |&n| n != m && inside[n][j] && !inside[n][i])
                            .map(move |n| (j, n))
                    })
                    .collect();
                if pairs.is_empty() {
                    continue;
                }
                pairs.sort_unstable();
                pairs.dedup();
                let mut rng = rng_from(derive_seed(seed, m as u64, i as u64));
                pairs.shuffle(&mut rng);
                let mut chosen: Vec<Triplet> = Vec::with_capacity(per_anchor_cap);
                for attempt in 0..4 * per_anchor_cap {
                    if chosen.len() == per_anchor_cap {
                        break;
                    }
                    let (j, n) = pairs[attempt % pairs.len()];
                    let negatives = eligible_cache.entry((j, n)).or_insert_with(|| {
                        samples[n]
                            .iter()
                            .copied()
                            .filter(|&s| !inside[m][s] && dist.get(j, s) >= thresholds[j])
                            .collect()
                    });
                    if negatives.is_empty() {
                        continue;
                    }
                    let t = Triplet {
                        anchor: i,
                        positive: j,
                        negative: negatives[rng.random_range(0..negatives.len())],
                        source: (m, n),
                    };
                    if !chosen.contains(&t) {
                        chosen.push(t);
                    }
                }
                out.extend(chosen);
            }
            out.sort_unstable_by_key(|t| (t.source.1, t.anchor, t.positive, t.negative));
            out
        })
        .collect();
    Ok(per_subset)
}

/// Header plus one `i,j,k,m,n` row per triplet.
pub fn to_csv(triplets: &[Triplet]) -> String {
    let mut out = String::from("anchor,positive,negative,m,n\n");
    for t in triplets {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            t.anchor, t.positive, t.negative, t.source.0, t.source.1
        ));
    }
    out
}

pub fn parse_csv(text: &str) -> Result<Vec<Triplet>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty() && !l.starts_with("anchor"))
        .map(|(i, line)| {
            let fields = line
                .split(',')
                .map(|f| f.trim().parse::<usize>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::MalformedRow {
                    row: i + 1,
                    reason: e.to_string(),
                })?;
            match fields[..] {
                [anchor, positive, negative, m, n] => Ok(Triplet {
                    anchor,
                    positive,
                    negative,
                    source: (m, n),
                }),
                _ => Err(Error::MalformedRow {
                    row: i + 1,
                    reason: format!("expected 5 fields, found {}", fields.len()),
                }),
            }
        })
        .collect()
}
