//! Splitting groups into subsets of mutually distant groups.
//!
//! The objective (minimized) for a binary group→subset matrix A is
//!
//! ```text
//! F(A) = -[tr(AᵀSA) - tr(Aᵀ diag(S) A)] - λ1 Σ_k ‖a_kᵀC‖_p^p - λ2 ‖1AᵀC‖_p^p
//! ```
//!
//! so that groups inside a subset are pushed apart, overlapping groups are
//! spread over subsets and covered samples are rewarded. Every column of A
//! holds exactly `groups_per_subset` ones and every group sits in at most one
//! subset; groups left out form an unassigned pool.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grouping::GroupSet;
use crate::neighbors::{DistanceMatrix, EmbeddedSet};
use crate::seed::{derive_seed, rng_from};

/// Relative slack below which a move does not count as an improvement.
const IMPROVE_EPS: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct PartitionInstance {
    /// Mean inter-group distances, |G|×|G|.
    pub s: Array2<f64>,
    /// Sorted member lists; row g of C.
    pub members: Vec<Vec<usize>>,
    pub num_samples: usize,
    pub k: usize,
    pub groups_per_subset: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    pub norm_exponent: f64,
}

/// ⌊|G| / K⌋, the largest column sum every subset can share without a group
/// appearing twice.
pub fn default_groups_per_subset(num_groups: usize, k: usize) -> usize {
    if k == 0 {
        0
    } else {
        num_groups / k
    }
}

impl PartitionInstance {
    pub fn from_parts(
        s: Array2<f64>,
        members: Vec<Vec<usize>>,
        num_samples: usize,
        k: usize,
        groups_per_subset: usize,
        lambda1: f64,
        lambda2: f64,
        norm_exponent: f64,
    ) -> Result<Self> {
        let g = members.len();
        if s.dim() != (g, g) {
            return Err(Error::invalid(format!(
                "S is {:?}, expected {g}x{g}",
                s.dim()
            )));
        }
        for a in 0..g {
            for b in 0..g {
                let v = s[[a, b]];
                if !(v.is_finite() && v >= 0.0) {
                    return Err(Error::invalid("S must be finite and nonnegative"));
                }
                if v != s[[b, a]] {
                    return Err(Error::invalid("S must be symmetric"));
                }
            }
        }
        if members.iter().flatten().any(|&m| m >= num_samples) {
            return Err(Error::invalid("group member out of range"));
        }
        if k == 0 {
            return Err(Error::invalid("K must be at least 1"));
        }
        if !(lambda1 >= 0.0 && lambda2 >= 0.0) {
            return Err(Error::invalid("λ1, λ2 must be nonnegative"));
        }
        if !(norm_exponent > 0.0 && norm_exponent.is_finite()) {
            return Err(Error::invalid("norm exponent must be positive"));
        }
        let mut members = members;
        for m in &mut members {
            m.sort_unstable();
            m.dedup();
        }
        Ok(PartitionInstance {
            s,
            members,
            num_samples,
            k,
            groups_per_subset,
            lambda1,
            lambda2,
            norm_exponent,
        })
    }

    pub fn num_groups(&self) -> usize {
        self.members.len()
    }

    fn pow(&self, count: u32) -> f64 {
        if count == 0 {
            0.0
        } else if self.norm_exponent == 1.0 {
            count as f64
        } else {
            (count as f64).powf(self.norm_exponent)
        }
    }
}

/// S_kl = mean distance over G_k × G_l (diagonal included).
pub fn mean_group_distances(dist: &DistanceMatrix, groups: &GroupSet) -> Array2<f64> {
    let g = groups.len();
    let n = dist.len();
    // Row g of (C·D): summed distances from group g's members to every sample.
    let sums: Vec<Vec<f64>> = groups
        .groups
        .par_iter()
        .map(|grp| {
            let mut acc = vec![0.0; n];
            for &m in &grp.members {
                for (a, d) in acc.iter_mut().zip(dist.row(m)) {
                    *a += d;
                }
            }
            acc
        })
        .collect();
    let rows: Vec<Vec<f64>> = (0..g)
        .into_par_iter()
        .map(|a| {
            let la = groups.groups[a].len() as f64;
            (0..g)
                .map(|b| {
                    let gb = &groups.groups[b];
                    let total: f64 = gb.members.iter().map(|&m| sums[a][m]).sum();
                    total / (la * gb.len() as f64)
                })
                .collect()
        })
        .collect();
    let mut s = Array2::from_shape_vec((g, g), rows.concat()).expect("square");
    // Summation order differs between (a,b) and (b,a); pin exact symmetry.
    for a in 0..g {
        for b in (a + 1)..g {
            let v = 0.5 * (s[[a, b]] + s[[b, a]]);
            s[[a, b]] = v;
            s[[b, a]] = v;
        }
    }
    s
}

pub fn build_instance(
    set: &EmbeddedSet,
    groups: &GroupSet,
    k: usize,
    groups_per_subset: usize,
    lambda1: f64,
    lambda2: f64,
    norm_exponent: f64,
) -> Result<PartitionInstance> {
    build_instance_with(
        &DistanceMatrix::new(set),
        groups,
        k,
        groups_per_subset,
        lambda1,
        lambda2,
        norm_exponent,
    )
}

/// [`build_instance`] reusing a precomputed distance matrix.
pub fn build_instance_with(
    dist: &DistanceMatrix,
    groups: &GroupSet,
    k: usize,
    groups_per_subset: usize,
    lambda1: f64,
    lambda2: f64,
    norm_exponent: f64,
) -> Result<PartitionInstance> {
    if k < 1 || groups.len() < k {
        return Err(Error::invalid(format!(
            "{} groups cannot fill K={k} subsets",
            groups.len()
        )));
    }
    let s = mean_group_distances(dist, groups);
    let members = groups.groups.iter().map(|g| g.members.clone()).collect();
    PartitionInstance::from_parts(
        s,
        members,
        groups.num_samples(),
        k,
        groups_per_subset,
        lambda1,
        lambda2,
        norm_exponent,
    )
}

/// Evaluates the objective for an arbitrary binary |G|×K matrix.
pub fn objective(instance: &PartitionInstance, a: &Array2<u8>) -> Result<f64> {
    let (g, k) = (instance.num_groups(), instance.k);
    if a.dim() != (g, k) {
        return Err(Error::invalid(format!(
            "A is {:?}, expected {g}x{k}",
            a.dim()
        )));
    }
    if a.iter().any(|&v| v > 1) {
        return Err(Error::invalid("A must be binary"));
    }
    let mut spread = 0.0;
    for col in 0..k {
        let chosen: Vec<usize> = (0..g).filter(|&r| a[[r, col]] == 1).collect();
        for &x in &chosen {
            for &y in &chosen {
                if x != y {
                    spread += instance.s[[x, y]];
                }
            }
        }
    }
    let mut per_subset = vec![vec![0u32; instance.num_samples]; k];
    let mut total = vec![0u32; instance.num_samples];
    for r in 0..g {
        for col in 0..k {
            if a[[r, col]] == 1 {
                for &m in &instance.members[r] {
                    per_subset[col][m] += 1;
                    total[m] += 1;
                }
            }
        }
    }
    let distribute: f64 = per_subset
        .iter()
        .flatten()
        .map(|&c| instance.pow(c))
        .sum();
    let cover: f64 = total.iter().map(|&c| instance.pow(c)).sum();
    Ok(-spread - instance.lambda1 * distribute - instance.lambda2 * cover)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    /// A ∈ {0,1}^{|G|×K}.
    pub assignment: Array2<u8>,
    /// Group indices of each subset, ascending.
    pub subsets: Vec<Vec<usize>>,
    pub objective: f64,
    /// Objective after the initial construction and after every accepted move.
    pub trace: Vec<f64>,
}

impl Partition {
    pub fn from_subsets(num_groups: usize, subsets: Vec<Vec<usize>>) -> Self {
        let mut assignment = Array2::zeros((num_groups, subsets.len()));
        for (k, members) in subsets.iter().enumerate() {
            for &g in members {
                assignment[[g, k]] = 1;
            }
        }
        Partition {
            assignment,
            subsets,
            objective: f64::NAN,
            trace: Vec::new(),
        }
    }

    pub fn k(&self) -> usize {
        self.subsets.len()
    }

    /// Line k lists the group indices of subset k.
    pub fn to_text(&self) -> String {
        self.subsets
            .iter()
            .map(|s| {
                s.iter()
                    .map(|g| g.to_string())
                    .collect::<Vec<_>>()
                    .join(" ")
                    + "\n"
            })
            .collect()
    }

    pub fn parse(text: &str, num_groups: usize) -> Result<Self> {
        let mut subsets = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let ids = line
                .split_whitespace()
                .map(|t| {
                    t.parse::<usize>()
                        .ok()
                        .filter(|&g| g < num_groups)
                        .ok_or_else(|| Error::MalformedRow {
                            row: i + 1,
                            reason: format!("bad group index {t:?}"),
                        })
                })
                .collect::<Result<Vec<_>>>()?;
            subsets.push(ids);
        }
        Ok(Partition::from_subsets(num_groups, subsets))
    }
}

/// Mutable search state: bin of every group (K = unassigned pool), per-bin
/// summed distances, and per-sample membership counts.
struct SearchState<'a> {
    inst: &'a PartitionInstance,
    bin: Vec<usize>,
    /// link[g*K + k] = Σ_{h in subset k} S[g,h]
    link: Vec<f64>,
    /// counts[k*N + i] = number of groups in subset k containing sample i
    counts: Vec<u32>,
    total: Vec<u32>,
    value: f64,
    trace: Vec<f64>,
}

impl<'a> SearchState<'a> {
    fn new(inst: &'a PartitionInstance) -> Self {
        let g = inst.num_groups();
        SearchState {
            inst,
            bin: vec![inst.k; g],
            link: vec![0.0; g * inst.k],
            counts: vec![0; inst.k * inst.num_samples],
            total: vec![0; inst.num_samples],
            value: 0.0,
            trace: Vec::new(),
        }
    }

    fn pool(&self) -> usize {
        self.inst.k
    }

    #[inline]
    fn link(&self, g: usize, k: usize) -> f64 {
        self.link[g * self.inst.k + k]
    }

    /// Objective change of the count terms when group `g` leaves bin `from`
    /// and group `h` (if any) enters it, with the reverse for bin `to`.
    fn count_delta(&self, g: usize, from: usize, h: Option<usize>, to: usize) -> f64 {
        let inst = self.inst;
        if inst.lambda1 == 0.0 && inst.lambda2 == 0.0 {
            return 0.0;
        }
        let pool = self.pool();
        if inst.norm_exponent == 1.0 && from != pool && to != pool {
            // Linear terms: the swap only moves counts between subsets.
            return 0.0;
        }
        let n = inst.num_samples;
        let empty: Vec<usize> = Vec::new();
        let gm = &inst.members[g];
        let hm = h.map_or(&empty, |h| &inst.members[h]);
        let mut delta = 0.0;
        let mut touch = |sample: usize, dg: i32| {
            // dg = +1: only in g (g moves from -> to); -1: only in h (h moves to -> from).
            let mut change = 0.0;
            let adjust = |count: u32, by: i32| -> f64 {
                let next = (count as i64 + by as i64) as u32;
                inst.pow(next) - inst.pow(count)
            };
            if from != pool {
                change += inst.lambda1 * adjust(self.counts[from * n + sample], -dg);
            }
            if to != pool {
                change += inst.lambda1 * adjust(self.counts[to * n + sample], dg);
            }
            let total_by = (if to != pool { dg } else { 0 }) - (if from != pool { dg } else { 0 });
            if total_by != 0 {
                change += inst.lambda2 * adjust(self.total[sample], total_by);
            }
            delta -= change;
        };
        let (mut i, mut j) = (0, 0);
        while i < gm.len() || j < hm.len() {
            match (gm.get(i), hm.get(j)) {
                (Some(&a), Some(&b)) if a == b => {
                    i += 1;
                    j += 1;
                }
                (Some(&a), Some(&b)) if a < b => {
                    touch(a, 1);
                    i += 1;
                }
                (Some(_), Some(&b)) => {
                    touch(b, -1);
                    j += 1;
                }
                (Some(&a), None) => {
                    touch(a, 1);
                    i += 1;
                }
                (None, Some(&b)) => {
                    touch(b, -1);
                    j += 1;
                }
                (None, None) => unreachable!(),
            }
        }
        delta
    }

    /// Objective change of swapping the bins of g and h (or moving g to `to`).
    fn swap_delta(&self, g: usize, h: Option<usize>, to: usize) -> f64 {
        let from = self.bin[g];
        let pool = self.pool();
        let s = &self.inst.s;
        let mut spread = 0.0; // change in Σ_k Σ_{x≠y in k} S, ordered pairs
        if from != pool {
            spread -= self.link(g, from) - s[[g, g]];
            if let Some(h) = h {
                spread += self.link(h, from) - s[[h, g]];
            }
        }
        if to != pool {
            spread += self.link(g, to);
            if let Some(h) = h {
                spread -= self.link(h, to) - s[[h, h]] + s[[g, h]];
            }
        }
        -2.0 * spread + self.count_delta(g, from, h, to)
    }

    fn place(&mut self, g: usize, to: usize) {
        let from = self.bin[g];
        let pool = self.pool();
        let k = self.inst.k;
        let n = self.inst.num_samples;
        if from != pool {
            for x in 0..self.inst.num_groups() {
                self.link[x * k + from] -= self.inst.s[[x, g]];
            }
            for &m in &self.inst.members[g] {
                self.counts[from * n + m] -= 1;
                self.total[m] -= 1;
            }
        }
        if to != pool {
            for x in 0..self.inst.num_groups() {
                self.link[x * k + to] += self.inst.s[[x, g]];
            }
            for &m in &self.inst.members[g] {
                self.counts[to * n + m] += 1;
                self.total[m] += 1;
            }
        }
        self.bin[g] = to;
    }

    fn apply_swap(&mut self, g: usize, h: Option<usize>, to: usize, delta: f64) {
        let from = self.bin[g];
        self.place(g, to);
        if let Some(h) = h {
            self.place(h, from);
        }
        self.value += delta;
        self.trace.push(self.value);
    }

    /// Greedy construction: repeatedly add the (group, subset) pair with the
    /// best objective change until every subset is full.
    fn greedy_fill(&mut self) {
        let gps = self.inst.groups_per_subset;
        let mut fill = vec![0usize; self.inst.k];
        for _ in 0..gps * self.inst.k {
            let mut best: Option<(f64, usize, usize)> = None;
            for g in 0..self.inst.num_groups() {
                if self.bin[g] != self.pool() {
                    continue;
                }
                for (k, &f) in fill.iter().enumerate() {
                    if f == gps {
                        continue;
                    }
                    let d = self.swap_delta(g, None, k);
                    if best.is_none_or(|(bd, _, _)| d < bd) {
                        best = Some((d, g, k));
                    }
                }
            }
            let (d, g, k) = best.expect("feasible instance has a free group");
            self.place(g, k);
            self.value += d;
            fill[k] += 1;
        }
        self.trace.push(self.value);
    }

    fn random_fill<R: rand::Rng>(&mut self, rng: &mut R) {
        let mut order: Vec<usize> = (0..self.inst.num_groups()).collect();
        order.shuffle(rng);
        let gps = self.inst.groups_per_subset;
        for (slot, &g) in order.iter().take(gps * self.inst.k).enumerate() {
            self.place(g, slot / gps);
        }
        let a = self.matrix();
        self.value = objective(self.inst, &a).expect("valid shape");
        self.trace.push(self.value);
    }

    fn matrix(&self) -> Array2<u8> {
        let mut a = Array2::zeros((self.inst.num_groups(), self.inst.k));
        for (g, &b) in self.bin.iter().enumerate() {
            if b != self.pool() {
                a[[g, b]] = 1;
            }
        }
        a
    }

    /// First-improvement swaps between groups in different bins until a full
    /// sweep finds nothing.
    fn local_search(&mut self) {
        let g = self.inst.num_groups();
        loop {
            let mut improved = false;
            for x in 0..g {
                for y in (x + 1)..g {
                    let (bx, by) = (self.bin[x], self.bin[y]);
                    if bx == by {
                        continue;
                    }
                    let d = self.swap_delta(x, Some(y), by);
                    if d < -IMPROVE_EPS * (1.0 + self.value.abs()) {
                        self.apply_swap(x, Some(y), by, d);
                        improved = true;
                    }
                }
            }
            if !improved {
                break;
            }
        }
    }

    fn into_partition(self) -> Partition {
        let a = self.matrix();
        let subsets = (0..self.inst.k)
            .map(|k| (0..self.inst.num_groups()).filter(|&g| self.bin[g] == k).collect())
            .collect();
        let objective = objective(self.inst, &a).expect("valid shape");
        Partition {
            assignment: a,
            subsets,
            objective,
            trace: self.trace,
        }
    }
}

/// Local search from a greedy start (restart 0) and random feasible starts
/// (later restarts); the best objective wins, ties to the earliest restart.
pub fn solve_partition(instance: &PartitionInstance, restarts: usize, seed: u64) -> Result<Partition> {
    let g = instance.num_groups();
    let gps = instance.groups_per_subset;
    if gps == 0 {
        return Err(Error::Infeasible("groups_per_subset must be at least 1".into()));
    }
    if gps * instance.k > g {
        return Err(Error::Infeasible(format!(
            "{} subsets of {gps} groups need more than the {g} available",
            instance.k
        )));
    }
    let restarts = restarts.max(1);
    let results: Vec<Partition> = (0..restarts)
        .into_par_iter()
        .map(|r| {
            let mut state = SearchState::new(instance);
            if r == 0 {
                state.greedy_fill();
            } else {
                state.random_fill(&mut rng_from(derive_seed(seed, 0x5041_5254, r as u64)));
            }
            state.local_search();
            state.into_partition()
        })
        .collect();
    let mut best: Option<Partition> = None;
    for p in results {
        if best.as_ref().is_none_or(|b| p.objective < b.objective) {
            best = Some(p);
        }
    }
    Ok(best.expect("at least one restart"))
}
