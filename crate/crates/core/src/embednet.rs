//! Feed-forward embedding network trained by SGD with momentum.
//!
//! Hidden layers use ReLU, the output layer is linear. The regression loss is
//! Σ‖φ(x_s) − t_π(s)‖² over slots; the transfer loss is the triplet hinge
//! Σ[d(a,p) − d(a,n) + γ]₊ with plain L2 distances.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::assign::{local_update_pass, Assignment};
use crate::error::{Error, Result};
use crate::seed::{derive_seed, rng_from};

/// Triplet margin used unless configured otherwise.
pub const DEFAULT_MARGIN: f64 = 0.2;

/// (anchor, positive, negative) sample indices.
pub type TripletIndex = (usize, usize, usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// out × in
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Layer {
    pub fn zeros(d_in: usize, d_out: usize) -> Self {
        Layer {
            weights: Array2::zeros((d_out, d_in)),
            bias: Array1::zeros(d_out),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weights.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.weights.nrows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbedNet {
    layers: Vec<Layer>,
}

/// Parameter gradients, laid out like the network's layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Layer>,
}

impl Gradients {
    fn zeros_like(net: &EmbedNet) -> Self {
        Gradients {
            layers: net
                .layers
                .iter()
                .map(|l| Layer::zeros(l.input_dim(), l.output_dim()))
                .collect(),
        }
    }

    fn add_scaled(&mut self, other: &Gradients, scale: f64) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weights.scaled_add(scale, &b.weights);
            a.bias.scaled_add(scale, &b.bias);
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(l.bias.iter()).copied())
            .collect()
    }
}

fn layer_dims(d_in: usize, hidden: &[usize], d_out: usize) -> Vec<(usize, usize)> {
    let mut dims = Vec::with_capacity(hidden.len() + 1);
    let mut prev = d_in;
    for &h in hidden.iter().chain(std::iter::once(&d_out)) {
        dims.push((prev, h));
        prev = h;
    }
    dims
}

impl EmbedNet {
    /// He-normal hidden layers, variance-1/fan_in output layer, zero biases.
    pub fn new(d_in: usize, hidden: &[usize], d_out: usize, seed: u64) -> Result<Self> {
        if d_in == 0 || d_out == 0 || hidden.contains(&0) {
            return Err(Error::invalid("layer sizes must be positive"));
        }
        let mut rng = rng_from(seed);
        let dims = layer_dims(d_in, hidden, d_out);
        let last = dims.len() - 1;
        let layers = dims
            .into_iter()
            .enumerate()
            .map(|(i, (fan_in, fan_out))| {
                let gain = if i == last { 1.0 } else { 2.0 };
                let std = (gain / fan_in as f64).sqrt();
                Layer {
                    weights: Array2::from_shape_fn((fan_out, fan_in), |_| {
                        std * rng.sample::<f64, _>(StandardNormal)
                    }),
                    bias: Array1::zeros(fan_out),
                }
            })
            .collect();
        Ok(EmbedNet { layers })
    }

    pub fn zeros(d_in: usize, hidden: &[usize], d_out: usize) -> Self {
        EmbedNet {
            layers: layer_dims(d_in, hidden, d_out)
                .into_iter()
                .map(|(i, o)| Layer::zeros(i, o))
                .collect(),
        }
    }

    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::invalid("network needs at least one layer"));
        }
        for w in layers.windows(2) {
            if w[0].output_dim() != w[1].input_dim() {
                return Err(Error::DimensionMismatch {
                    expected: w[0].output_dim(),
                    found: w[1].input_dim(),
                });
            }
        }
        for l in &layers {
            if l.bias.len() != l.output_dim() {
                return Err(Error::DimensionMismatch {
                    expected: l.output_dim(),
                    found: l.bias.len(),
                });
            }
        }
        Ok(EmbedNet { layers })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("nonempty").output_dim()
    }

    pub fn hidden_sizes(&self) -> Vec<usize> {
        self.layers[..self.layers.len() - 1]
            .iter()
            .map(Layer::output_dim)
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum()
    }

    /// Weights then bias of every layer, in order.
    pub fn params(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(l.bias.iter()).copied())
            .collect()
    }

    pub fn set_params(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.num_params() {
            return Err(Error::DimensionMismatch {
                expected: self.num_params(),
                found: values.len(),
            });
        }
        let mut it = values.iter();
        for l in &mut self.layers {
            for w in l.weights.iter_mut().chain(l.bias.iter_mut()) {
                *w = *it.next().expect("length checked");
            }
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(l.bias.iter()).all(|v| v.is_finite()))
    }

    pub fn forward(&self, x: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
        let batch = x.insert_axis(Axis(0));
        Ok(self.forward_batch(batch)?.row(0).to_owned())
    }

    /// Row-wise forward pass.
    pub fn forward_batch(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.check_input(x)?;
        let mut h = x.to_owned();
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            h = h.dot(&l.weights.t()) + &l.bias;
            if i != last {
                h.mapv_inplace(relu);
            }
        }
        Ok(h)
    }

    fn check_input(&self, x: ArrayView2<'_, f64>) -> Result<()> {
        if x.ncols() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                found: x.ncols(),
            });
        }
        Ok(())
    }

    /// Activations of every layer; entry 0 is the input.
    fn forward_cached(&self, x: ArrayView2<'_, f64>) -> Vec<Array2<f64>> {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x.to_owned());
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            let mut h = acts[i].dot(&l.weights.t()) + &l.bias;
            if i != last {
                h.mapv_inplace(relu);
            }
            acts.push(h);
        }
        acts
    }

    /// Accumulates ∂L/∂θ given ∂L/∂output for a cached batch.
    fn backward_into(&self, acts: &[Array2<f64>], grad_out: Array2<f64>, grads: &mut Gradients) {
        let mut delta = grad_out;
        for i in (0..self.layers.len()).rev() {
            let g = &mut grads.layers[i];
            g.weights += &delta.t().dot(&acts[i]);
            g.bias += &delta.sum_axis(Axis(0));
            if i > 0 {
                let mut prev = delta.dot(&self.layers[i].weights);
                // ReLU output is positive exactly where its input was.
                Zip::from(&mut prev).and(&acts[i]).for_each(|d, &a| {
                    if a <= 0.0 {
                        *d = 0.0;
                    }
                });
                delta = prev;
            }
        }
    }

    fn apply_step(&mut self, grads: &Gradients, velocity: &mut Gradients, lr: f64, momentum: f64) {
        for ((l, g), v) in self.layers.iter_mut().zip(&grads.layers).zip(&mut velocity.layers) {
            Zip::from(&mut v.weights).and(&g.weights).for_each(|v, &g| *v = momentum * *v + g);
            Zip::from(&mut v.bias).and(&g.bias).for_each(|v, &g| *v = momentum * *v + g);
            l.weights.scaled_add(-lr, &v.weights);
            l.bias.scaled_add(-lr, &v.bias);
        }
    }

    /// Manifest line `relrep-mlp layers=IxO,...` followed by little-endian
    /// f32 weights (row-major, out × in) and biases of every layer.
    pub fn to_checkpoint(&self) -> Vec<u8> {
        let shapes: Vec<String> = self
            .layers
            .iter()
            .map(|l| format!("{}x{}", l.input_dim(), l.output_dim()))
            .collect();
        let mut out = format!("relrep-mlp layers={}\n", shapes.join(",")).into_bytes();
        for v in self.params() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        out
    }

    pub fn from_checkpoint(bytes: &[u8]) -> Result<Self> {
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Format("checkpoint manifest line missing".into()))?;
        let manifest = std::str::from_utf8(&bytes[..nl])
            .map_err(|_| Error::Format("checkpoint manifest is not UTF-8".into()))?;
        let spec = manifest
            .strip_prefix("relrep-mlp layers=")
            .ok_or_else(|| Error::Format(format!("unexpected manifest {manifest:?}")))?;
        let layers = spec
            .split(',')
            .map(|shape| {
                let (i, o) = shape
                    .split_once('x')
                    .ok_or_else(|| Error::Format(format!("bad layer shape {shape:?}")))?;
                let parse = |v: &str| {
                    v.parse::<usize>()
                        .map_err(|_| Error::Format(format!("bad layer shape {shape:?}")))
                };
                Ok(Layer::zeros(parse(i)?, parse(o)?))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut net = EmbedNet::from_layers(layers)?;
        let body = &bytes[nl + 1..];
        if body.len() != 4 * net.num_params() {
            return Err(Error::Format(format!(
                "checkpoint holds {} bytes of parameters, expected {}",
                body.len(),
                4 * net.num_params()
            )));
        }
        let values: Vec<f64> = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        net.set_params(&values)?;
        Ok(net)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_checkpoint())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&fs::read(path)?)
    }
}

#[inline]
fn relu(v: f64) -> f64 {
    v.max(0.0)
}

fn check_local(net: &EmbedNet, inputs: ArrayView2<'_, f64>, targets: ArrayView2<'_, f64>, perm: &[usize]) -> Result<()> {
    net.check_input(inputs)?;
    if inputs.nrows() != perm.len() || targets.nrows() != perm.len() {
        return Err(Error::DimensionMismatch {
            expected: perm.len(),
            found: inputs.nrows().min(targets.nrows()),
        });
    }
    if targets.ncols() != net.output_dim() {
        return Err(Error::DimensionMismatch {
            expected: net.output_dim(),
            found: targets.ncols(),
        });
    }
    if perm.iter().any(|&t| t >= targets.nrows()) {
        return Err(Error::invalid("assignment references a missing target"));
    }
    Ok(())
}

/// Σ_s ‖φ(inputs_s) − targets_{perm[s]}‖².
pub fn local_loss(
    net: &EmbedNet,
    inputs: ArrayView2<'_, f64>,
    targets: ArrayView2<'_, f64>,
    perm: &[usize],
) -> Result<f64> {
    check_local(net, inputs, targets, perm)?;
    let out = net.forward_batch(inputs)?;
    Ok(crate::assign::assignment_cost(out.view(), targets, perm))
}

fn local_batch_grad(
    net: &EmbedNet,
    inputs: ArrayView2<'_, f64>,
    targets: ArrayView2<'_, f64>,
    perm: &[usize],
    rows: &[usize],
    grads: &mut Gradients,
) -> f64 {
    let x = inputs.select(Axis(0), rows);
    let acts = net.forward_cached(x.view());
    let out = acts.last().expect("output layer");
    let mut residual = out.clone();
    for (r, &slot) in rows.iter().enumerate() {
        residual.row_mut(r).scaled_add(-1.0, &targets.row(perm[slot]));
    }
    let loss = residual.iter().map(|v| v * v).sum();
    net.backward_into(&acts, residual * 2.0, grads);
    loss
}

pub fn local_loss_grad(
    net: &EmbedNet,
    inputs: ArrayView2<'_, f64>,
    targets: ArrayView2<'_, f64>,
    perm: &[usize],
) -> Result<(f64, Gradients)> {
    check_local(net, inputs, targets, perm)?;
    let rows: Vec<usize> = (0..perm.len()).collect();
    let mut grads = Gradients::zeros_like(net);
    let loss = local_batch_grad(net, inputs, targets, perm, &rows, &mut grads);
    Ok((loss, grads))
}

fn check_triplets(net: &EmbedNet, samples: ArrayView2<'_, f64>, triplets: &[TripletIndex]) -> Result<()> {
    net.check_input(samples)?;
    let n = samples.nrows();
    if triplets.iter().any(|&(a, p, q)| a >= n || p >= n || q >= n) {
        return Err(Error::invalid("triplet references a missing sample"));
    }
    Ok(())
}

fn l2_rows(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    crate::neighbors::l2(a, b)
}

/// Σ [d(a,p) − d(a,n) + margin]₊ over the triplets.
pub fn triplet_loss(
    net: &EmbedNet,
    samples: ArrayView2<'_, f64>,
    triplets: &[TripletIndex],
    margin: f64,
) -> Result<f64> {
    check_triplets(net, samples, triplets)?;
    if triplets.is_empty() {
        return Ok(0.0);
    }
    let pick = |f: fn(&TripletIndex) -> usize| -> Vec<usize> { triplets.iter().map(f).collect() };
    let a = net.forward_batch(samples.select(Axis(0), &pick(|t| t.0)).view())?;
    let p = net.forward_batch(samples.select(Axis(0), &pick(|t| t.1)).view())?;
    let q = net.forward_batch(samples.select(Axis(0), &pick(|t| t.2)).view())?;
    Ok((0..triplets.len())
        .map(|r| (l2_rows(a.row(r), p.row(r)) - l2_rows(a.row(r), q.row(r)) + margin).max(0.0))
        .sum())
}

fn triplet_batch_grad(
    net: &EmbedNet,
    samples: ArrayView2<'_, f64>,
    triplets: &[TripletIndex],
    margin: f64,
    scale: f64,
    grads: &mut Gradients,
) -> f64 {
    if triplets.is_empty() {
        return 0.0;
    }
    let pick = |f: fn(&TripletIndex) -> usize| -> Vec<usize> { triplets.iter().map(f).collect() };
    let acts_a = net.forward_cached(samples.select(Axis(0), &pick(|t| t.0)).view());
    let acts_p = net.forward_cached(samples.select(Axis(0), &pick(|t| t.1)).view());
    let acts_q = net.forward_cached(samples.select(Axis(0), &pick(|t| t.2)).view());
    let (a, p, q) = (
        acts_a.last().unwrap(),
        acts_p.last().unwrap(),
        acts_q.last().unwrap(),
    );
    let mut ga = Array2::zeros(a.raw_dim());
    let mut gp = Array2::zeros(p.raw_dim());
    let mut gq = Array2::zeros(q.raw_dim());
    let mut loss = 0.0;
    for r in 0..triplets.len() {
        let dap = l2_rows(a.row(r), p.row(r));
        let daq = l2_rows(a.row(r), q.row(r));
        let hinge = dap - daq + margin;
        if hinge <= 0.0 {
            continue;
        }
        loss += hinge;
        // ∂‖u−v‖/∂u = (u−v)/‖u−v‖, taken as 0 at coincident points.
        if dap > 0.0 {
            let u = (&a.row(r) - &p.row(r)) * (scale / dap);
            ga.row_mut(r).scaled_add(1.0, &u);
            gp.row_mut(r).scaled_add(-1.0, &u);
        }
        if daq > 0.0 {
            let u = (&a.row(r) - &q.row(r)) * (scale / daq);
            ga.row_mut(r).scaled_add(-1.0, &u);
            gq.row_mut(r).scaled_add(1.0, &u);
        }
    }
    net.backward_into(&acts_a, ga, grads);
    net.backward_into(&acts_p, gp, grads);
    net.backward_into(&acts_q, gq, grads);
    loss
}

pub fn triplet_loss_grad(
    net: &EmbedNet,
    samples: ArrayView2<'_, f64>,
    triplets: &[TripletIndex],
    margin: f64,
) -> Result<(f64, Gradients)> {
    check_triplets(net, samples, triplets)?;
    let mut grads = Gradients::zeros_like(net);
    let loss = triplet_batch_grad(net, samples, triplets, margin, 1.0, &mut grads);
    Ok((loss, grads))
}

/// Slot inputs and the target space they regress onto.
#[derive(Debug, Clone, Copy)]
pub struct LocalProblem<'a> {
    /// One row per slot (duplicated when a sample fills several slots).
    pub inputs: ArrayView2<'a, f64>,
    pub targets: ArrayView2<'a, f64>,
}

/// Cross-subset triplets over the full sample matrix.
#[derive(Debug, Clone, Copy)]
pub struct TransferProblem<'a> {
    pub samples: ArrayView2<'a, f64>,
    pub triplets: &'a [TripletIndex],
    pub margin: f64,
    pub weight: f64,
}

/// L_local + weight · L_transfer.
pub fn refine_loss(
    net: &EmbedNet,
    local: &LocalProblem<'_>,
    perm: &[usize],
    transfer: &TransferProblem<'_>,
) -> Result<f64> {
    Ok(local_loss(net, local.inputs, local.targets, perm)?
        + transfer.weight * triplet_loss(net, transfer.samples, transfer.triplets, transfer.margin)?)
}

pub fn refine_loss_grad(
    net: &EmbedNet,
    local: &LocalProblem<'_>,
    perm: &[usize],
    transfer: &TransferProblem<'_>,
) -> Result<(f64, Gradients)> {
    let (l, mut g) = local_loss_grad(net, local.inputs, local.targets, perm)?;
    let (t, gt) = triplet_loss_grad(net, transfer.samples, transfer.triplets, transfer.margin)?;
    g.add_scaled(&gt, transfer.weight);
    Ok((l + transfer.weight * t, g))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    /// Epochs of SGD between two reassignment passes.
    pub epochs_per_reassign: usize,
    pub batch_size: usize,
    /// Maximum number of epochs for one training call.
    pub epoch_budget: usize,
    /// Stop once a round improves the loss by less than this fraction.
    pub convergence_tol: f64,
    /// Swap proposals per slot in each reassignment pass.
    pub proposals_per_slot: usize,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            learning_rate: 0.01,
            momentum: 0.9,
            epochs_per_reassign: 3,
            batch_size: 64,
            epoch_budget: 150,
            convergence_tol: 1e-4,
            proposals_per_slot: 2,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning_rate must be finite and nonnegative"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid("momentum must lie in [0, 1)"));
        }
        if self.epochs_per_reassign == 0 {
            return Err(Error::invalid("epochs_per_reassign must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be at least 1"));
        }
        if !(self.convergence_tol >= 0.0) {
            return Err(Error::invalid("convergence_tol must be nonnegative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainReport {
    /// Summed minibatch loss (local + weighted transfer) of every epoch.
    pub epoch_losses: Vec<f64>,
    /// L_local and L_transfer of the final network and assignment.
    pub local_loss: f64,
    pub transfer_loss: f64,
    pub accepted_swaps: usize,
}

impl TrainReport {
    pub fn epochs(&self) -> usize {
        self.epoch_losses.len()
    }
}

/// Alternates reassignment passes with `epochs_per_reassign` SGD epochs on
/// the regression loss.
pub fn train_local(
    net: &mut EmbedNet,
    problem: &LocalProblem<'_>,
    assignment: &mut Assignment,
    cfg: &SgdConfig,
    seed: u64,
) -> Result<TrainReport> {
    train(net, problem, assignment, None, cfg, seed)
}

/// As [`train_local`], minimizing L_local + weight · L_transfer.
pub fn train_refine(
    net: &mut EmbedNet,
    problem: &LocalProblem<'_>,
    assignment: &mut Assignment,
    transfer: &TransferProblem<'_>,
    cfg: &SgdConfig,
    seed: u64,
) -> Result<TrainReport> {
    train(net, problem, assignment, Some(transfer), cfg, seed)
}

fn train(
    net: &mut EmbedNet,
    problem: &LocalProblem<'_>,
    assignment: &mut Assignment,
    transfer: Option<&TransferProblem<'_>>,
    cfg: &SgdConfig,
    seed: u64,
) -> Result<TrainReport> {
    cfg.validate()?;
    check_local(net, problem.inputs, problem.targets, &assignment.perm)?;
    let transfer = transfer.filter(|t| !t.triplets.is_empty());
    if let Some(t) = transfer {
        check_triplets(net, t.samples, t.triplets)?;
    }
    let slots = assignment.len();
    let mut swap_rng = rng_from(derive_seed(seed, 1, 0));
    let mut order_rng = rng_from(derive_seed(seed, 2, 0));
    let mut velocity = Gradients::zeros_like(net);
    let mut report = TrainReport::default();
    let mut slot_order: Vec<usize> = (0..slots).collect();
    let mut triplet_order: Vec<TripletIndex> = transfer.map(|t| t.triplets.to_vec()).unwrap_or_default();
    let steps = slots.div_ceil(cfg.batch_size);
    let triplet_chunk = triplet_order.len().div_ceil(steps.max(1)).max(1);
    let mut previous_round: Option<f64> = None;

    while report.epochs() < cfg.epoch_budget {
        let embedded = net.forward_batch(problem.inputs)?;
        report.accepted_swaps += local_update_pass(
            embedded.view(),
            problem.targets,
            assignment,
            cfg.proposals_per_slot * slots,
            &mut swap_rng,
        )?;
        let mut round_loss = f64::NAN;
        for _ in 0..cfg.epochs_per_reassign {
            if report.epochs() == cfg.epoch_budget {
                break;
            }
            slot_order.shuffle(&mut order_rng);
            if !triplet_order.is_empty() {
                triplet_order.shuffle(&mut order_rng);
            }
            let mut epoch_loss = 0.0;
            for step in 0..steps {
                let rows = &slot_order[step * cfg.batch_size..((step + 1) * cfg.batch_size).min(slots)];
                let mut grads = Gradients::zeros_like(net);
                epoch_loss += local_batch_grad(
                    net,
                    problem.inputs,
                    problem.targets,
                    &assignment.perm,
                    rows,
                    &mut grads,
                );
                if let Some(t) = transfer {
                    let lo = (step * triplet_chunk).min(triplet_order.len());
                    let hi = ((step + 1) * triplet_chunk).min(triplet_order.len());
                    epoch_loss += t.weight
                        * triplet_batch_grad(
                            net,
                            t.samples,
                            &triplet_order[lo..hi],
                            t.margin,
                            t.weight,
                            &mut grads,
                        );
                }
                let scale = 1.0 / rows.len() as f64;
                for l in &mut grads.layers {
                    l.weights *= scale;
                    l.bias *= scale;
                }
                net.apply_step(&grads, &mut velocity, cfg.learning_rate, cfg.momentum);
            }
            if !epoch_loss.is_finite() || !net.is_finite() {
                return Err(Error::Divergence(format!(
                    "loss became {epoch_loss} after {} epochs; lower the learning rate",
                    report.epochs() + 1
                )));
            }
            report.epoch_losses.push(epoch_loss);
            round_loss = epoch_loss;
        }
        if let Some(prev) = previous_round {
            if prev <= 0.0 || (prev - round_loss) / prev < cfg.convergence_tol {
                break;
            }
        }
        previous_round = Some(round_loss);
    }

    report.local_loss = local_loss(net, problem.inputs, problem.targets, &assignment.perm)?;
    assignment.cost = report.local_loss;
    if let Some(t) = transfer {
        report.transfer_loss = triplet_loss(net, t.samples, t.triplets, t.margin)?;
    }
    Ok(report)
}

/// Copies `inputs` rows for every slot sample index.
pub fn gather_rows(inputs: ArrayView2<'_, f64>, rows: &[usize]) -> Array2<f64> {
    inputs.select(Axis(0), rows)
}
