//! The outer training loop.
//!
//! `train_init` regresses every sample onto its own uniform target. Each
//! iteration then embeds the data with the global network, extracts compact
//! groups, partitions them into K subsets, trains one network per subset,
//! refines those networks with cross-subset triplets and promotes one of them
//! at random to become the next global network.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use rayon::prelude::*;

use crate::assign::init_assignment;
use crate::coupling::{as_indices, mine_triplets_with, to_csv as triplets_csv, Triplet};
use crate::dataset::Dataset;
use crate::embednet::{
    gather_rows, train_local, train_refine, EmbedNet, LocalProblem, SgdConfig, TrainReport,
    TransferProblem,
};
use crate::error::{Error, Result};
use crate::evalreport::{self, mean_group_correctness, subset_coverage};
use crate::grouping::{calibrate_baseline, extract_groups, GroupSet};
use crate::neighbors::{DistanceMatrix, EmbeddedSet};
use crate::partition::{build_instance_with, default_groups_per_subset, solve_partition, Partition};
use crate::seed::{derive_seed, rng_from};
use crate::targets::{build_target_space, uniform_target_space};

// Stream tags for derive_seed.
const TAG_NET: u64 = 1;
const TAG_INIT: u64 = 2;
const TAG_CALIBRATE: u64 = 3;
const TAG_PARTITION: u64 = 4;
const TAG_LOCAL: u64 = 5;
const TAG_MINE: u64 = 6;
const TAG_REFINE: u64 = 7;
const TAG_PROMOTE: u64 = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    /// T
    pub iterations: usize,
    /// K
    pub subsets: usize,
    /// Compactness percentile p.
    pub compactness_percentile: f64,
    pub h_max: usize,
    pub random_groups: usize,
    /// D
    pub target_dim: usize,
    pub sigma2: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    /// Triplet margin γ.
    pub margin: f64,
    pub norm_exponent: f64,
    /// `None` means ⌊|G|/K⌋ (at least 1).
    pub groups_per_subset: Option<usize>,
    pub partition_restarts: usize,
    pub dissim_percentile: f64,
    pub per_anchor_cap: usize,
    pub transfer_weight: f64,
    pub hidden: Vec<usize>,
    pub sgd: SgdConfig,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            iterations: 4,
            subsets: 3,
            compactness_percentile: 3.0,
            h_max: crate::grouping::DEFAULT_H_MAX,
            random_groups: 1000,
            target_dim: 32,
            sigma2: 0.0025,
            lambda1: 1.0,
            lambda2: 1.0,
            margin: crate::embednet::DEFAULT_MARGIN,
            norm_exponent: 1.0,
            groups_per_subset: None,
            partition_restarts: 4,
            dissim_percentile: crate::coupling::DEFAULT_DISSIM_PERCENTILE,
            per_anchor_cap: crate::coupling::DEFAULT_PER_ANCHOR_CAP,
            transfer_weight: 1.0,
            hidden: vec![64, 64],
            sgd: SgdConfig::default(),
            seed: 0,
        }
    }
}

fn parse_value<T: FromStr>(line: usize, key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Config {
        line,
        reason: format!("invalid value {value:?} for {key}"),
    })
}

impl PipelineConfig {
    /// Flat `key = value` text; `#` starts a comment, unknown keys are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = PipelineConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content.split_once('=').ok_or_else(|| Error::Config {
                line,
                reason: format!("expected key = value, found {content:?}"),
            })?;
            let (key, value) = (key.trim(), value.trim());
            match key {
                "iterations" => cfg.iterations = parse_value(line, key, value)?,
                "subsets" => cfg.subsets = parse_value(line, key, value)?,
                "compactness_percentile" => cfg.compactness_percentile = parse_value(line, key, value)?,
                "h_max" => cfg.h_max = parse_value(line, key, value)?,
                "random_groups" => cfg.random_groups = parse_value(line, key, value)?,
                "target_dim" => cfg.target_dim = parse_value(line, key, value)?,
                "sigma2" => cfg.sigma2 = parse_value(line, key, value)?,
                "lambda1" => cfg.lambda1 = parse_value(line, key, value)?,
                "lambda2" => cfg.lambda2 = parse_value(line, key, value)?,
                "margin" => cfg.margin = parse_value(line, key, value)?,
                "norm_exponent" => cfg.norm_exponent = parse_value(line, key, value)?,
                "groups_per_subset" => {
                    cfg.groups_per_subset = match value {
                        "auto" => None,
                        v => Some(parse_value(line, key, v)?),
                    }
                }
                "partition_restarts" => cfg.partition_restarts = parse_value(line, key, value)?,
                "dissim_percentile" => cfg.dissim_percentile = parse_value(line, key, value)?,
                "per_anchor_cap" => cfg.per_anchor_cap = parse_value(line, key, value)?,
                "transfer_weight" => cfg.transfer_weight = parse_value(line, key, value)?,
                "hidden" => {
                    cfg.hidden = if value.is_empty() {
                        Vec::new()
                    } else {
                        value
                            .split(',')
                            .map(|v| parse_value(line, key, v.trim()))
                            .collect::<Result<_>>()?
                    }
                }
                "learning_rate" => cfg.sgd.learning_rate = parse_value(line, key, value)?,
                "momentum" => cfg.sgd.momentum = parse_value(line, key, value)?,
                "epochs_per_reassign" => cfg.sgd.epochs_per_reassign = parse_value(line, key, value)?,
                "batch_size" => cfg.sgd.batch_size = parse_value(line, key, value)?,
                "epoch_budget" => cfg.sgd.epoch_budget = parse_value(line, key, value)?,
                "convergence_tol" => cfg.sgd.convergence_tol = parse_value(line, key, value)?,
                "proposals_per_slot" => cfg.sgd.proposals_per_slot = parse_value(line, key, value)?,
                "seed" => cfg.seed = parse_value(line, key, value)?,
                _ => {
                    return Err(Error::Config {
                        line,
                        reason: format!("unknown key {key:?}"),
                    })
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    /// Every key with its current value; parses back to `self`.
    pub fn to_text(&self) -> String {
        let hidden: Vec<String> = self.hidden.iter().map(|h| h.to_string()).collect();
        let gps = self
            .groups_per_subset
            .map_or_else(|| "auto".to_string(), |g| g.to_string());
        let entries = [
            ("iterations", self.iterations.to_string()),
            ("subsets", self.subsets.to_string()),
            ("compactness_percentile", self.compactness_percentile.to_string()),
            ("h_max", self.h_max.to_string()),
            ("random_groups", self.random_groups.to_string()),
            ("target_dim", self.target_dim.to_string()),
            ("sigma2", self.sigma2.to_string()),
            ("lambda1", self.lambda1.to_string()),
            ("lambda2", self.lambda2.to_string()),
            ("margin", self.margin.to_string()),
            ("norm_exponent", self.norm_exponent.to_string()),
            ("groups_per_subset", gps),
            ("partition_restarts", self.partition_restarts.to_string()),
            ("dissim_percentile", self.dissim_percentile.to_string()),
            ("per_anchor_cap", self.per_anchor_cap.to_string()),
            ("transfer_weight", self.transfer_weight.to_string()),
            ("hidden", hidden.join(",")),
            ("learning_rate", self.sgd.learning_rate.to_string()),
            ("momentum", self.sgd.momentum.to_string()),
            ("epochs_per_reassign", self.sgd.epochs_per_reassign.to_string()),
            ("batch_size", self.sgd.batch_size.to_string()),
            ("epoch_budget", self.sgd.epoch_budget.to_string()),
            ("convergence_tol", self.sgd.convergence_tol.to_string()),
            ("proposals_per_slot", self.sgd.proposals_per_slot.to_string()),
            ("seed", self.seed.to_string()),
        ];
        entries
            .iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::invalid(msg.to_string()));
        if self.subsets == 0 {
            return bad("subsets must be at least 1");
        }
        if !(self.compactness_percentile > 0.0 && self.compactness_percentile <= 100.0) {
            return bad("compactness_percentile must lie in (0, 100]");
        }
        if self.h_max < 2 {
            return bad("h_max must be at least 2");
        }
        if self.random_groups < 100 {
            return bad("random_groups must be at least 100");
        }
        if self.target_dim < 2 {
            return bad("target_dim must be at least 2");
        }
        if !(self.sigma2 >= 0.0 && self.sigma2.is_finite()) {
            return bad("sigma2 must be finite and nonnegative");
        }
        for (name, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("margin", self.margin),
            ("transfer_weight", self.transfer_weight),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} must be finite and nonnegative")));
            }
        }
        if !(self.norm_exponent >= 1.0 && self.norm_exponent.is_finite()) {
            return bad("norm_exponent must be at least 1");
        }
        if self.groups_per_subset == Some(0) {
            return bad("groups_per_subset must be at least 1");
        }
        if !(self.dissim_percentile > 0.0 && self.dissim_percentile <= 100.0) {
            return bad("dissim_percentile must lie in (0, 100]");
        }
        if self.hidden.contains(&0) {
            return bad("hidden layer sizes must be positive");
        }
        self.sgd.validate()
    }
}

/// One row of `metrics.csv` plus the per-size correctness behind it.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationMetrics {
    pub iteration: usize,
    pub coverage_overall: f64,
    pub coverage_per_subset_mean: f64,
    /// NaN for unlabeled data.
    pub group_correctness_mean: f64,
    pub partition_objective: f64,
    pub loss_local_mean: f64,
    pub loss_transfer_mean: f64,
    pub correctness_by_size: BTreeMap<usize, f64>,
    pub num_groups: usize,
    pub num_triplets: usize,
}

pub const METRICS_HEADER: &str = "iteration,coverage_overall,coverage_per_subset_mean,group_correctness_mean,partition_objective,loss_local_mean,loss_transfer_mean";

impl IterationMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.9},{:.9},{:.9},{:.9},{:.9},{:.9}",
            self.iteration,
            self.coverage_overall,
            self.coverage_per_subset_mean,
            self.group_correctness_mean,
            self.partition_objective,
            self.loss_local_mean,
            self.loss_transfer_mean
        )
    }
}

pub fn metrics_csv(history: &[IterationMetrics]) -> String {
    let mut out = format!("{METRICS_HEADER}\n");
    for m in history {
        out.push_str(&m.csv_row());
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone)]
pub struct IterationState {
    pub iteration: usize,
    pub global: EmbedNet,
    pub groups: GroupSet,
    pub partition: Partition,
    /// Refined per-subset networks; `global` is a copy of `subset_nets[promoted]`.
    pub subset_nets: Vec<EmbedNet>,
    pub promoted: usize,
    /// Per-subset networks after the local stage, before refinement.
    pub local_nets: Vec<EmbedNet>,
    pub triplets: Vec<Vec<Triplet>>,
    pub local_reports: Vec<TrainReport>,
    pub refine_reports: Vec<TrainReport>,
    pub metrics: IterationMetrics,
}

/// Randomly initialized network for `config` and input dimension `d_in`.
pub fn initial_net(d_in: usize, config: &PipelineConfig) -> Result<EmbedNet> {
    EmbedNet::new(
        d_in,
        &config.hidden,
        config.target_dim,
        derive_seed(config.seed, TAG_NET, 0),
    )
}

/// φ_init: every sample regresses onto its own uniform target on the sphere.
pub fn train_init(dataset: &Dataset, config: &PipelineConfig) -> Result<EmbedNet> {
    init_training(dataset, config).map(|(net, _)| net)
}

fn init_training(dataset: &Dataset, config: &PipelineConfig) -> Result<(EmbedNet, TrainReport)> {
    config.validate()?;
    let mut net = initial_net(dataset.dim(), config)?;
    let n = dataset.len();
    let space = uniform_target_space(n, config.target_dim, derive_seed(config.seed, TAG_INIT, 0))?;
    let mut assignment = init_assignment(n, derive_seed(config.seed, TAG_INIT, 1))?;
    let problem = LocalProblem {
        inputs: dataset.vectors(),
        targets: space.view(),
    };
    let report = train_local(
        &mut net,
        &problem,
        &mut assignment,
        &config.sgd,
        derive_seed(config.seed, TAG_INIT, 2),
    )?;
    Ok((net, report))
}

/// Sample index of every slot of `subset` (groups in order, members ascending).
fn subset_slots(groups: &GroupSet, subset: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let sizes = subset.iter().map(|&g| groups.groups[g].len()).collect();
    let slots = subset
        .iter()
        .flat_map(|&g| groups.groups[g].members.iter().copied())
        .collect();
    (slots, sizes)
}

pub fn embed(net: &EmbedNet, vectors: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    net.forward_batch(vectors)
}

/// One outer iteration starting from `global`; `iteration` is 1-based.
pub fn run_iteration(
    global: &EmbedNet,
    iteration: usize,
    dataset: &Dataset,
    config: &PipelineConfig,
) -> Result<IterationState> {
    let it = iteration as u64;
    let seed = config.seed;
    let set = EmbeddedSet::new(embed(global, dataset.vectors())?)?;
    let dist = DistanceMatrix::new(&set);

    let baseline = calibrate_baseline(
        &set,
        config.h_max.min(set.len()),
        config.random_groups,
        config.compactness_percentile,
        derive_seed(seed, TAG_CALIBRATE, it),
    )?;
    let groups = extract_groups(&set, &baseline);
    if groups.is_empty() {
        return Err(Error::DegenerateGrouping(format!(
            "iteration {iteration}: no compact group passed the {}th-percentile test; \
             raise compactness_percentile or use less noisy data",
            config.compactness_percentile
        )));
    }
    if groups.len() < config.subsets {
        return Err(Error::DegenerateGrouping(format!(
            "iteration {iteration}: only {} groups for {} subsets; \
             raise compactness_percentile, lower subsets or use less noisy data",
            groups.len(),
            config.subsets
        )));
    }
    let gps = config
        .groups_per_subset
        .unwrap_or_else(|| default_groups_per_subset(groups.len(), config.subsets));
    let instance = build_instance_with(
        &dist,
        &groups,
        config.subsets,
        gps,
        config.lambda1,
        config.lambda2,
        config.norm_exponent,
    )?;
    let partition = solve_partition(
        &instance,
        config.partition_restarts,
        derive_seed(seed, TAG_PARTITION, it),
    )?;

    let slot_data: Vec<(Array2<f64>, Vec<usize>)> = partition
        .subsets
        .iter()
        .map(|subset| {
            let (slots, sizes) = subset_slots(&groups, subset);
            (gather_rows(dataset.vectors(), &slots), sizes)
        })
        .collect();

    let locals: Vec<(EmbedNet, TrainReport)> = slot_data
        .par_iter()
        .enumerate()
        .map(|(k, (inputs, sizes))| {
            let k = k as u64;
            let space = build_target_space(
                sizes,
                config.target_dim,
                config.sigma2,
                derive_seed(derive_seed(seed, TAG_LOCAL, it), k, 0),
            )?;
            let mut net = global.clone();
            let mut assignment =
                init_assignment(inputs.nrows(), derive_seed(derive_seed(seed, TAG_LOCAL, it), k, 1))?;
            let problem = LocalProblem {
                inputs: inputs.view(),
                targets: space.view(),
            };
            let report = train_local(
                &mut net,
                &problem,
                &mut assignment,
                &config.sgd,
                derive_seed(derive_seed(seed, TAG_LOCAL, it), k, 2),
            )?;
            Ok((net, report))
        })
        .collect::<Result<_>>()?;

    let triplets = mine_triplets_with(
        &groups,
        &partition,
        &dist,
        config.per_anchor_cap,
        config.dissim_percentile,
        derive_seed(seed, TAG_MINE, it),
    )?;

    let (local_nets, local_reports): (Vec<EmbedNet>, Vec<TrainReport>) = locals.into_iter().unzip();
    let refined: Vec<(EmbedNet, TrainReport)> = local_nets
        .clone()
        .into_par_iter()
        .zip(slot_data.par_iter())
        .zip(triplets.par_iter())
        .enumerate()
        .map(|(k, ((mut net, (inputs, sizes)), subset_triplets))| {
            let k = k as u64;
            let stream = derive_seed(seed, TAG_REFINE, it);
            let space = build_target_space(
                sizes,
                config.target_dim,
                config.sigma2,
                derive_seed(stream, k, 0),
            )?;
            let mut assignment = init_assignment(inputs.nrows(), derive_seed(stream, k, 1))?;
            let problem = LocalProblem {
                inputs: inputs.view(),
                targets: space.view(),
            };
            let indices = as_indices(subset_triplets);
            let transfer = TransferProblem {
                samples: dataset.vectors(),
                triplets: &indices,
                margin: config.margin,
                weight: config.transfer_weight,
            };
            let report = train_refine(
                &mut net,
                &problem,
                &mut assignment,
                &transfer,
                &config.sgd,
                derive_seed(stream, k, 2),
            )?;
            Ok((net, report))
        })
        .collect::<Result<_>>()?;

    let (subset_nets, refine_reports): (Vec<EmbedNet>, Vec<TrainReport>) = refined.into_iter().unzip();
    let promoted = rng_from(derive_seed(seed, TAG_PROMOTE, it)).random_range(0..subset_nets.len());

    let (coverage_overall, per_subset) = subset_coverage(&groups, &partition);
    let k = subset_nets.len() as f64;
    let (group_correctness_mean, correctness_by_size) = match dataset.labels() {
        Some(labels) => (
            mean_group_correctness(&groups, labels)?,
            evalreport::group_correctness(&groups, labels)?,
        ),
        None => (f64::NAN, BTreeMap::new()),
    };
    let metrics = IterationMetrics {
        iteration,
        coverage_overall,
        coverage_per_subset_mean: per_subset.iter().sum::<f64>() / k,
        group_correctness_mean,
        partition_objective: partition.objective,
        loss_local_mean: refine_reports.iter().map(|r| r.local_loss).sum::<f64>() / k,
        loss_transfer_mean: refine_reports.iter().map(|r| r.transfer_loss).sum::<f64>() / k,
        correctness_by_size,
        num_groups: groups.len(),
        num_triplets: triplets.iter().map(Vec::len).sum(),
    };

    Ok(IterationState {
        iteration,
        global: subset_nets[promoted].clone(),
        groups,
        partition,
        subset_nets,
        promoted,
        local_nets,
        triplets,
        local_reports,
        refine_reports,
        metrics,
    })
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub init: EmbedNet,
    pub global: EmbedNet,
    pub history: Vec<IterationMetrics>,
}

/// `train_init` followed by `config.iterations` iterations. With `out_dir`,
/// writes after every step:
///
/// - `phi_init.ckpt`, `phi_iterNN.ckpt` (promoted network), `config.txt`
/// - `groups_iterNN.txt`, `partition_iterNN.txt`, `triplets_iterNN.csv`
/// - `metrics.csv`, and for labeled data `fig7_correctness.csv` and
///   `fig8_coverage.csv`
pub fn run(dataset: &Dataset, config: &PipelineConfig, out_dir: Option<&Path>) -> Result<RunOutput> {
    run_with(dataset, config, out_dir, |_, _| {})
}

/// [`run`], calling `observe` with φ_init (no state) and after every iteration.
pub fn run_with<F>(
    dataset: &Dataset,
    config: &PipelineConfig,
    out_dir: Option<&Path>,
    mut observe: F,
) -> Result<RunOutput>
where
    F: FnMut(&EmbedNet, Option<&IterationState>),
{
    config.validate()?;
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("config.txt"), config.to_text())?;
    }
    let init = train_init(dataset, config)?;
    if let Some(dir) = out_dir {
        init.save(&dir.join("phi_init.ckpt"))?;
    }
    observe(&init, None);
    let mut global = init.clone();
    let mut history = Vec::with_capacity(config.iterations);
    let mut fig8 = Vec::new();
    let mut fig7 = Vec::new();
    for iteration in 1..=config.iterations {
        let state = run_iteration(&global, iteration, dataset, config)?;
        global = state.global.clone();
        observe(&global, Some(&state));
        fig8.push((
            iteration,
            state.metrics.coverage_overall,
            state.metrics.coverage_per_subset_mean,
        ));
        fig7.push((iteration, state.metrics.correctness_by_size.clone()));
        history.push(state.metrics.clone());
        if let Some(dir) = out_dir {
            write_iteration(dir, &state)?;
            fs::write(dir.join("metrics.csv"), metrics_csv(&history))?;
            if dataset.labels().is_some() {
                fs::write(dir.join("fig7_correctness.csv"), evalreport::fig7_csv(&fig7))?;
                fs::write(dir.join("fig8_coverage.csv"), evalreport::fig8_csv(&fig8))?;
            }
        }
    }
    if let Some(dir) = out_dir {
        if history.is_empty() {
            fs::write(dir.join("metrics.csv"), metrics_csv(&history))?;
        }
        global.save(&dir.join("phi_final.ckpt"))?;
    }
    Ok(RunOutput {
        init,
        global,
        history,
    })
}

fn write_iteration(dir: &Path, state: &IterationState) -> Result<()> {
    let t = state.iteration;
    state.global.save(&dir.join(format!("phi_iter{t:02}.ckpt")))?;
    fs::write(dir.join(format!("groups_iter{t:02}.txt")), state.groups.to_text())?;
    fs::write(dir.join(format!("partition_iter{t:02}.txt")), state.partition.to_text())?;
    let all: Vec<Triplet> = state.triplets.concat();
    fs::write(dir.join(format!("triplets_iter{t:02}.csv")), triplets_csv(&all))?;
    Ok(())
}

/// Summary line for logs.
pub fn describe(m: &IterationMetrics) -> String {
    let mut s = String::new();
    let _ = write!(
        s,
        "iteration {}: {} groups, {} triplets, coverage {:.3} (per subset {:.3}), objective {:.4}, L_local {:.4}, L_transfer {:.4}",
        m.iteration,
        m.num_groups,
        m.num_triplets,
        m.coverage_overall,
        m.coverage_per_subset_mean,
        m.partition_objective,
        m.loss_local_mean,
        m.loss_transfer_mean
    );
    if m.group_correctness_mean.is_finite() {
        let _ = write!(s, ", group correctness {:.3}", m.group_correctness_mean);
    }
    s
}
