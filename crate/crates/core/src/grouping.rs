//! Compact groups of reliably similar samples.
//!
//! A group grows from a seed by appending the seed's nearest neighbours one at
//! a time, as long as its compactness (largest pairwise member distance) stays
//! within the calibrated percentile of random groups of the same size.

use std::collections::HashSet;

use ndarray::Array2;
use rand::seq::index::sample;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::neighbors::{knn_from_row, nearest_rank_index, EmbeddedSet};
use crate::seed::rng_from;

pub const DEFAULT_H_MAX: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub struct Group {
    pub seed: usize,
    /// Ascending sample indices, seed included.
    pub members: Vec<usize>,
    pub compactness: f64,
}

impl Group {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn contains(&self, sample: usize) -> bool {
        self.members.binary_search(&sample).is_ok()
    }
}

/// Largest pairwise distance among `members`.
pub fn compactness(set: &EmbeddedSet, members: &[usize]) -> f64 {
    let mut worst = 0.0f64;
    for (a, &i) in members.iter().enumerate() {
        for &j in &members[a + 1..] {
            worst = worst.max(set.distance(i, j));
        }
    }
    worst
}

/// Percentile compactness of random groups, per group size.
#[derive(Debug, Clone, PartialEq)]
pub struct CompactnessBaseline {
    /// `thresholds[h]` for h in 2..=h_max; entries 0 and 1 are unused.
    thresholds: Vec<f64>,
    pub num_random_groups: usize,
    pub percentile: f64,
}

impl CompactnessBaseline {
    /// Baseline with explicit thresholds for sizes `2..2 + thresholds.len()`.
    pub fn from_thresholds(thresholds: &[f64], percentile: f64) -> Result<Self> {
        if thresholds.is_empty() {
            return Err(Error::invalid("baseline needs at least the size-2 threshold"));
        }
        if thresholds.iter().any(|t| !(t.is_finite() && *t >= 0.0)) {
            return Err(Error::invalid("thresholds must be finite and nonnegative"));
        }
        let mut all = vec![0.0, 0.0];
        all.extend_from_slice(thresholds);
        Ok(CompactnessBaseline {
            thresholds: all,
            num_random_groups: 0,
            percentile,
        })
    }

    pub fn h_max(&self) -> usize {
        self.thresholds.len() - 1
    }

    pub fn threshold(&self, h: usize) -> Option<f64> {
        (2..self.thresholds.len())
            .contains(&h)
            .then(|| self.thresholds[h])
    }
}

/// Draws `num_random_groups` uniform random h-subsets for every h in
/// `2..=h_max` and records the `p`-th percentile of their compactness.
pub fn calibrate_baseline(
    set: &EmbeddedSet,
    h_max: usize,
    num_random_groups: usize,
    p: f64,
    seed: u64,
) -> Result<CompactnessBaseline> {
    let n = set.len();
    if h_max > n {
        return Err(Error::invalid(format!("h_max={h_max} exceeds N={n}")));
    }
    if h_max < 2 {
        return Err(Error::invalid("h_max must be at least 2"));
    }
    if num_random_groups < 100 {
        return Err(Error::invalid("num_random_groups must be at least 100"));
    }
    if !(p > 0.0 && p <= 100.0) {
        return Err(Error::invalid(format!("percentile {p} outside (0, 100]")));
    }
    let mut rng = rng_from(seed);
    let mut thresholds = vec![0.0; h_max + 1];
    let mut scores = Vec::with_capacity(num_random_groups);
    for (h, slot) in thresholds.iter_mut().enumerate().skip(2) {
        scores.clear();
        for _ in 0..num_random_groups {
            let members = sample(&mut rng, n, h).into_vec();
            scores.push(compactness(set, &members));
        }
        scores.sort_unstable_by(f64::total_cmp);
        *slot = scores[nearest_rank_index(scores.len(), p)];
    }
    Ok(CompactnessBaseline {
        thresholds,
        num_random_groups,
        percentile: p,
    })
}

/// Grows a group from `seed_index` along its nearest-neighbour order.
///
/// Returns `None` when even the closest pair exceeds the size-2 threshold.
pub fn build_group(
    set: &EmbeddedSet,
    seed_index: usize,
    baseline: &CompactnessBaseline,
) -> Option<Group> {
    let row = set.distances_from(seed_index);
    grow_from_row(set, seed_index, &row, baseline)
}

fn grow_from_row(
    set: &EmbeddedSet,
    seed_index: usize,
    row: &[f64],
    baseline: &CompactnessBaseline,
) -> Option<Group> {
    let n = set.len();
    if n < 2 {
        return None;
    }
    let k = (baseline.h_max() - 1).min(n - 1);
    let order = knn_from_row(row, seed_index, k).ok()?;
    let mut members = vec![seed_index];
    let mut nu = 0.0f64;
    for &cand in &order.neighbors {
        let size = members.len() + 1;
        let Some(limit) = baseline.threshold(size) else {
            break;
        };
        let grown = members
            .iter()
            .map(|&m| set.distance(cand, m))
            .fold(nu, f64::max);
        if grown > limit {
            break;
        }
        nu = grown;
        members.push(cand);
    }
    if members.len() < 2 {
        return None;
    }
    members.sort_unstable();
    Some(Group {
        seed: seed_index,
        members,
        compactness: nu,
    })
}

/// The extracted groups and their sample-membership structure.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupSet {
    pub groups: Vec<Group>,
    num_samples: usize,
}

impl GroupSet {
    pub fn new(groups: Vec<Group>, num_samples: usize) -> Result<Self> {
        for g in &groups {
            if g.members.len() < 2 {
                return Err(Error::invalid("groups need at least two members"));
            }
            if g.members.iter().any(|&m| m >= num_samples) {
                return Err(Error::invalid("group member out of range"));
            }
            if !g.members.windows(2).all(|w| w[0] < w[1]) {
                return Err(Error::invalid("group members must be strictly ascending"));
            }
            if !g.contains(g.seed) {
                return Err(Error::invalid("group seed must be a member"));
            }
        }
        Ok(GroupSet {
            groups,
            num_samples,
        })
    }

    /// Rebuilds groups from member lists (first entry is the seed).
    pub fn from_member_lists(set: &EmbeddedSet, lists: &[Vec<usize>]) -> Result<Self> {
        let groups = lists
            .iter()
            .map(|list| {
                let seed = *list
                    .first()
                    .ok_or_else(|| Error::invalid("empty member list"))?;
                let mut members = list.clone();
                members.sort_unstable();
                members.dedup();
                if members.iter().any(|&m| m >= set.len()) {
                    return Err(Error::invalid("group member out of range"));
                }
                let compactness = compactness(set, &members);
                Ok(Group {
                    seed,
                    members,
                    compactness,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        GroupSet::new(groups, set.len())
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    pub fn num_samples(&self) -> usize {
        self.num_samples
    }

    /// Dense C ∈ {0,1}^{|groups| × N}.
    pub fn membership_matrix(&self) -> Array2<u8> {
        let mut c = Array2::zeros((self.groups.len(), self.num_samples));
        for (g, group) in self.groups.iter().enumerate() {
            for &m in &group.members {
                c[[g, m]] = 1;
            }
        }
        c
    }

    /// Fraction of samples contained in at least one group.
    pub fn coverage(&self) -> f64 {
        if self.num_samples == 0 {
            return 0.0;
        }
        let mut seen = vec![false; self.num_samples];
        for g in &self.groups {
            for &m in &g.members {
                seen[m] = true;
            }
        }
        seen.iter().filter(|&&s| s).count() as f64 / self.num_samples as f64
    }

    /// One line per group: the seed, then the remaining members ascending.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for g in &self.groups {
            let mut ids = vec![g.seed.to_string()];
            ids.extend(
                g.members
                    .iter()
                    .filter(|&&m| m != g.seed)
                    .map(|m| m.to_string()),
            );
            out.push_str(&ids.join(" "));
            out.push('\n');
        }
        out
    }
}

pub fn parse_member_lists(text: &str) -> Result<Vec<Vec<usize>>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            line.split_whitespace()
                .map(|tok| {
                    tok.parse::<usize>().map_err(|_| Error::MalformedRow {
                        row: i + 1,
                        reason: format!("bad member id {tok:?}"),
                    })
                })
                .collect()
        })
        .collect()
}

/// Seeds a group at every sample and keeps the distinct member sets.
pub fn extract_groups(set: &EmbeddedSet, baseline: &CompactnessBaseline) -> GroupSet {
    let candidates: Vec<Option<Group>> = (0..set.len())
        .into_par_iter()
        .map(|i| build_group(set, i, baseline))
        .collect();
    let mut seen: HashSet<Vec<usize>> = HashSet::new();
    let groups = candidates
        .into_iter()
        .flatten()
        .filter(|g| seen.insert(g.members.clone()))
        .collect();
    GroupSet {
        groups,
        num_samples: set.len(),
    }
}
