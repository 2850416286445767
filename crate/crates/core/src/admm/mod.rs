//! Joint kernel-pattern and connectivity pruning by ADMM.
//!
//! Each iteration runs three steps:
//! 1. primal: ADAM on `f(W, b) + sum_k rho/2 ||W_k - Z_k + U_k||^2 + rho/2 ||W_k - Y_k + V_k||^2`
//! 2. auxiliary: `Z_k <- proj_pattern(W_k + U_k)`, `Y_k <- proj_connectivity(W_k + V_k)`
//! 3. dual: `U_k += W_k - Z_k`, `V_k += W_k - Y_k`
//!
//! After the last iteration the weights are projected onto both constraint
//! sets at once and the surviving weights are fine-tuned with the mask fixed.

pub mod net;
pub mod toy;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pattern::{connectivity_from_norms, project_pattern, ConnectivityMask, PatternSet};

pub use net::{Adam, Dataset, Loss, Sample, TinyNet};

#[derive(Debug, Clone, PartialEq)]
pub struct PruneConfig {
    pub pattern_set: PatternSet,
    /// Uniform connectivity pruning rate for every layer but the first.
    pub connectivity_rate: f64,
    pub first_layer_rate: f64,
    pub admm_iterations: usize,
    pub epochs_per_iteration: usize,
    pub learning_rate: f64,
    pub rho: f64,
    pub seed: u64,
    pub batch_size: usize,
    /// Masked fine-tuning epochs after the hard projection.
    pub finetune_epochs: usize,
    /// Assign patterns once (first auxiliary step) instead of every iteration.
    pub freeze_patterns: bool,
}

impl PruneConfig {
    pub fn new(pattern_set: PatternSet) -> Self {
        Self {
            pattern_set,
            connectivity_rate: 3.6,
            first_layer_rate: 1.0,
            admm_iterations: 10,
            epochs_per_iteration: 4,
            learning_rate: 1e-3,
            rho: 1e-2,
            seed: 0,
            batch_size: 16,
            finetune_epochs: 6,
            freeze_patterns: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.connectivity_rate >= 1.0 && self.first_layer_rate >= 1.0) {
            return Err(Error::Parameter("connectivity rates must be >= 1".into()));
        }
        if self.admm_iterations == 0 || self.epochs_per_iteration == 0 || self.batch_size == 0 {
            return Err(Error::Parameter(
                "iteration, epoch and batch counts must be >= 1".into(),
            ));
        }
        if !(self.learning_rate > 0.0 && self.rho > 0.0) {
            return Err(Error::Parameter(
                "learning rate and rho must be positive".into(),
            ));
        }
        Ok(())
    }

    fn rate_for(&self, layer: usize) -> f64 {
        if layer == 0 {
            self.first_layer_rate
        } else {
            self.connectivity_rate
        }
    }
}

/// Kernel budget for a layer: `ceil(total / rate)`, at least one kernel.
pub fn alpha_for_rate(total_kernels: usize, rate: f64) -> usize {
    ((total_kernels as f64 / rate).ceil() as usize).clamp(1, total_kernels)
}

/// Auxiliary and dual variables for one conv layer. `W` lives in the network.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerAdmm {
    pub z: Vec<f64>,
    pub y: Vec<f64>,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    pub rho: f64,
    pub alpha: usize,
    /// Frozen pattern ids when `freeze_patterns` is set.
    pub frozen: Option<Vec<u8>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdmmState {
    pub layers: Vec<LayerAdmm>,
}

impl AdmmState {
    /// `Z`, `Y` start as projections of the current weights; duals start at zero.
    pub fn new(net: &TinyNet, cfg: &PruneConfig) -> Result<Self> {
        cfg.validate()?;
        let mut state = Self {
            layers: net
                .convs
                .iter()
                .enumerate()
                .map(|(k, c)| {
                    let n = c.weights.len();
                    LayerAdmm {
                        z: c.weights.clone(),
                        y: c.weights.clone(),
                        u: vec![0.0; n],
                        v: vec![0.0; n],
                        rho: cfg.rho,
                        alpha: alpha_for_rate(c.shape.kernel_count(), cfg.rate_for(k)),
                        frozen: None,
                    }
                })
                .collect(),
        };
        admm_step_auxiliary(&mut state, net, cfg)?;
        Ok(state)
    }

    fn check(&self, net: &TinyNet) -> Result<()> {
        if self.layers.len() != net.convs.len() {
            return Err(Error::Shape(
                "ADMM state does not match network depth".into(),
            ));
        }
        for (l, c) in self.layers.iter().zip(&net.convs) {
            let n = c.weights.len();
            if [l.z.len(), l.y.len(), l.u.len(), l.v.len()]
                .iter()
                .any(|&m| m != n)
            {
                return Err(Error::Shape(
                    "ADMM tensors must share the weight shape".into(),
                ));
            }
            if !(l.rho > 0.0) {
                return Err(Error::Parameter("rho must be positive".into()));
            }
        }
        Ok(())
    }
}

/// Offsets of each conv layer's weights inside `TinyNet::flat_params`.
fn conv_weight_offsets(net: &TinyNet) -> Vec<usize> {
    let mut at = 0;
    net.convs
        .iter()
        .map(|c| {
            let off = at;
            at += c.weights.len() + c.bias.len();
            off
        })
        .collect()
}

/// Value of the augmented objective on `data`.
pub fn augmented_objective(net: &TinyNet, state: &AdmmState, data: &Dataset) -> f64 {
    let mut total = net.loss(data);
    for (c, l) in net.convs.iter().zip(&state.layers) {
        let mut pz = 0.0;
        let mut py = 0.0;
        for i in 0..c.weights.len() {
            let a = c.weights[i] - l.z[i] + l.u[i];
            let b = c.weights[i] - l.y[i] + l.v[i];
            pz += a * a;
            py += b * b;
        }
        total += 0.5 * l.rho * (pz + py);
    }
    total
}

/// Augmented objective and its gradient, flattened like `TinyNet::flat_params`.
pub fn augmented_loss_and_grad(
    net: &TinyNet,
    state: &AdmmState,
    data: &Dataset,
) -> (f64, Vec<f64>) {
    let (loss, grads) = net.loss_and_grad(data);
    let mut flat = grads.flatten();
    let mut total = loss;
    for ((c, l), off) in net
        .convs
        .iter()
        .zip(&state.layers)
        .zip(conv_weight_offsets(net))
    {
        for i in 0..c.weights.len() {
            let a = c.weights[i] - l.z[i] + l.u[i];
            let b = c.weights[i] - l.y[i] + l.v[i];
            total += 0.5 * l.rho * (a * a + b * b);
            flat[off + i] += l.rho * (a + b);
        }
    }
    (total, flat)
}

fn divergence(net: &TinyNet, grad: &[f64], loss: f64) -> Error {
    let offsets = conv_weight_offsets(net);
    // a non-finite weight is the origin; non-finite gradients propagate backwards
    let layer = net
        .convs
        .iter()
        .position(|c| c.weights.iter().any(|v| !v.is_finite()))
        .or_else(|| {
            net.convs.iter().zip(&offsets).rposition(|(c, &off)| {
                grad[off..off + c.weights.len()]
                    .iter()
                    .any(|v| !v.is_finite())
            })
        })
        .unwrap_or(0);
    Error::Divergence {
        layer,
        detail: format!("objective became {loss}"),
    }
}

/// Minibatch ADAM over the augmented objective. Returns the mean objective
/// of the final epoch. A fresh optimizer state is used for every call.
pub fn admm_step_primal(
    state: &AdmmState,
    net: &mut TinyNet,
    data: &Dataset,
    cfg: &PruneConfig,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    state.check(net)?;
    if data.is_empty() {
        return Err(Error::EmptyInput("training batch is empty".into()));
    }
    let mut params = net.flat_params();
    let mut adam = Adam::new(cfg.learning_rate, params.len());
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut last_epoch = 0.0;
    for _ in 0..cfg.epochs_per_iteration {
        order.shuffle(rng);
        let mut sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch = data.subset(chunk);
            let (obj, grad) = augmented_loss_and_grad(net, state, &batch);
            if !obj.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(divergence(net, &grad, obj));
            }
            adam.step(&mut params, &grad);
            net.set_flat_params(&params);
            sum += obj;
            batches += 1;
        }
        last_epoch = sum / batches as f64;
    }
    Ok(last_epoch)
}

fn kernel9(slice: &[f64]) -> [f64; 9] {
    std::array::from_fn(|i| slice[i])
}

/// Euclidean projections: `Z <- proj_pattern(W + U)`, `Y <- proj_connectivity(W + V)`.
///
/// Only 3x3 layers carry a pattern constraint; for other kernel sizes `Z = W + U`.
pub fn admm_step_auxiliary(state: &mut AdmmState, net: &TinyNet, cfg: &PruneConfig) -> Result<()> {
    state.check(net)?;
    for (c, l) in net.convs.iter().zip(state.layers.iter_mut()) {
        let klen = c.shape.kernel_len();
        let wu: Vec<f64> = c.weights.iter().zip(&l.u).map(|(w, u)| w + u).collect();
        if c.shape.is_3x3() {
            let mut ids = Vec::with_capacity(c.shape.kernel_count());
            for (kidx, k) in wu.chunks_exact(9).enumerate() {
                let kernel = kernel9(k);
                let (id, proj) = match &l.frozen {
                    Some(frozen) => {
                        let p = cfg
                            .pattern_set
                            .get(frozen[kidx])
                            .expect("frozen id from this set");
                        (frozen[kidx], p.apply(&kernel))
                    }
                    None => project_pattern(&kernel, &cfg.pattern_set),
                };
                l.z[kidx * 9..kidx * 9 + 9].copy_from_slice(&proj);
                ids.push(id);
            }
            if cfg.freeze_patterns && l.frozen.is_none() {
                l.frozen = Some(ids);
            }
        } else {
            l.z.copy_from_slice(&wu);
        }

        let wv: Vec<f64> = c.weights.iter().zip(&l.v).map(|(w, v)| w + v).collect();
        let norms: Vec<f64> = wv
            .chunks_exact(klen)
            .map(|k| k.iter().map(|x| x * x).sum())
            .collect();
        let mask =
            connectivity_from_norms(&norms, c.shape.out_channels, c.shape.in_channels, l.alpha)?;
        for (kidx, kept) in mask.kept.iter().enumerate() {
            let range = kidx * klen..(kidx + 1) * klen;
            if *kept {
                l.y[range.clone()].copy_from_slice(&wv[range]);
            } else {
                l.y[range].iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }
    Ok(())
}

/// `U += W - Z`, `V += W - Y`.
pub fn admm_step_dual(state: &mut AdmmState, net: &TinyNet) -> Result<()> {
    state.check(net)?;
    for (c, l) in net.convs.iter().zip(state.layers.iter_mut()) {
        for i in 0..c.weights.len() {
            l.u[i] += c.weights[i] - l.z[i];
            l.v[i] += c.weights[i] - l.y[i];
        }
    }
    Ok(())
}

/// `(||W - Z||_F, ||W - Y||_F)` summed over all layers.
pub fn primal_residuals(state: &AdmmState, net: &TinyNet) -> (f64, f64) {
    let mut rz = 0.0;
    let mut ry = 0.0;
    for (c, l) in net.convs.iter().zip(&state.layers) {
        for i in 0..c.weights.len() {
            rz += (c.weights[i] - l.z[i]).powi(2);
            ry += (c.weights[i] - l.y[i]).powi(2);
        }
    }
    (rz.sqrt(), ry.sqrt())
}

/// Pattern assignment and kernel mask of one pruned layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerPruning {
    /// `[out][in]`: pattern id of each surviving 3x3 kernel, `None` when pruned
    /// (and for every kernel of a non-3x3 layer).
    pub assignments: Vec<Option<u8>>,
    pub mask: ConnectivityMask,
}

impl LayerPruning {
    /// Per filter, per kernel view for the assignment file.
    pub fn by_filter(&self) -> Vec<Vec<Option<u8>>> {
        self.assignments
            .chunks(self.mask.in_channels)
            .map(|c| c.to_vec())
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub loss: f64,
    pub residual_z: f64,
    pub residual_y: f64,
}

#[derive(Debug, Clone)]
pub struct PruneResult {
    pub net: TinyNet,
    pub layers: Vec<LayerPruning>,
    pub trace: Vec<TraceRow>,
}

impl PruneResult {
    /// `{"layers":[[[id|null,...] per filter] per layer]}`
    pub fn assignments_json(&self) -> String {
        let layers: Vec<Vec<Vec<Option<u8>>>> = self.layers.iter().map(|l| l.by_filter()).collect();
        serde_json::to_string(&serde_json::json!({ "layers": layers }))
            .expect("plain data serializes")
    }

    pub fn trace_csv(&self) -> String {
        let mut out = String::from("iteration,loss,residual_z,residual_y\n");
        for r in &self.trace {
            out.push_str(&format!(
                "{},{:.9e},{:.9e},{:.9e}\n",
                r.iteration, r.loss, r.residual_z, r.residual_y
            ));
        }
        out
    }
}

/// Parses an assignment file written by [`PruneResult::assignments_json`].
pub fn parse_assignments(text: &str) -> Result<Vec<Vec<Vec<Option<u8>>>>> {
    #[derive(Deserialize)]
    struct File {
        layers: Vec<Vec<Vec<Option<u8>>>>,
    }
    Ok(serde_json::from_str::<File>(text)?.layers)
}

/// Projects every conv layer onto the intersection of both constraint sets:
/// each kernel takes its best pattern, then the `alpha` kernels retaining the
/// most energy survive.
pub fn hard_project(
    net: &mut TinyNet,
    alphas: &[usize],
    set: &PatternSet,
) -> Result<Vec<LayerPruning>> {
    let mut out = Vec::with_capacity(net.convs.len());
    for (c, &alpha) in net.convs.iter_mut().zip(alphas) {
        let s = c.shape;
        let klen = s.kernel_len();
        let mut ids = vec![None; s.kernel_count()];
        if s.is_3x3() {
            for (kidx, k) in c.weights.chunks_exact_mut(9).enumerate() {
                let (id, proj) = project_pattern(&kernel9(k), set);
                k.copy_from_slice(&proj);
                ids[kidx] = Some(id);
            }
        }
        let norms: Vec<f64> = c
            .weights
            .chunks_exact(klen)
            .map(|k| k.iter().map(|x| x * x).sum())
            .collect();
        let mask = connectivity_from_norms(&norms, s.out_channels, s.in_channels, alpha)?;
        for (kidx, kept) in mask.kept.iter().enumerate() {
            if !kept {
                c.weights[kidx * klen..(kidx + 1) * klen]
                    .iter_mut()
                    .for_each(|v| *v = 0.0);
                ids[kidx] = None;
            }
        }
        out.push(LayerPruning {
            assignments: ids,
            mask,
        });
    }
    Ok(out)
}

/// Per-parameter keep mask matching `flat_params`: pruned conv weights are frozen at zero.
fn param_mask(net: &TinyNet, layers: &[LayerPruning], set: &PatternSet) -> Vec<bool> {
    let mut mask = Vec::with_capacity(net.param_count());
    for (c, l) in net.convs.iter().zip(layers) {
        let klen = c.shape.kernel_len();
        for kidx in 0..c.shape.kernel_count() {
            let kept = l.mask.kept[kidx];
            match (kept, l.assignments[kidx]) {
                (true, Some(id)) => {
                    let p = set.get(id).expect("assigned id from this set");
                    mask.extend((0..klen).map(|i| p.contains(i / 3, i % 3)));
                }
                (true, None) => mask.extend(std::iter::repeat_n(true, klen)),
                (false, _) => mask.extend(std::iter::repeat_n(false, klen)),
            }
        }
        mask.extend(std::iter::repeat_n(true, c.bias.len()));
    }
    if let Some(f) = &net.fc {
        mask.extend(std::iter::repeat_n(true, f.weights.len() + f.bias.len()));
    }
    mask
}

/// ADAM on the plain loss with pruned weights held at zero.
pub fn masked_finetune(
    net: &mut TinyNet,
    layers: &[LayerPruning],
    set: &PatternSet,
    data: &Dataset,
    cfg: &PruneConfig,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let keep = param_mask(net, layers, set);
    let mut params = net.flat_params();
    let mut adam = Adam::new(cfg.learning_rate, params.len());
    let mut order: Vec<usize> = (0..data.len()).collect();
    for _ in 0..cfg.finetune_epochs {
        order.shuffle(rng);
        for chunk in order.chunks(cfg.batch_size) {
            let (loss, grads) = net.loss_and_grad(&data.subset(chunk));
            let mut grad = grads.flatten();
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(divergence(net, &grad, loss));
            }
            for (g, k) in grad.iter_mut().zip(&keep) {
                if !k {
                    *g = 0.0;
                }
            }
            adam.step(&mut params, &grad);
            for (p, k) in params.iter_mut().zip(&keep) {
                if !k {
                    *p = 0.0;
                }
            }
            net.set_flat_params(&params);
        }
    }
    Ok(())
}

/// Plain minibatch ADAM on the loss, as used for dense baselines.
pub fn train(
    net: &mut TinyNet,
    data: &Dataset,
    epochs: usize,
    learning_rate: f64,
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    if data.is_empty() || batch_size == 0 {
        return Err(Error::EmptyInput(
            "training needs samples and a nonzero batch size".into(),
        ));
    }
    let mut params = net.flat_params();
    let mut adam = Adam::new(learning_rate, params.len());
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut last = 0.0;
    for _ in 0..epochs {
        order.shuffle(rng);
        let mut sum = 0.0;
        for chunk in order.chunks(batch_size) {
            let (loss, grads) = net.loss_and_grad(&data.subset(chunk));
            let grad = grads.flatten();
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(divergence(net, &grad, loss));
            }
            adam.step(&mut params, &grad);
            net.set_flat_params(&params);
            sum += loss;
        }
        last = sum / order.chunks(batch_size).len() as f64;
    }
    Ok(last)
}

/// Full pruning run. Deterministic for a fixed `cfg.seed`.
pub fn prune(net: &TinyNet, data: &Dataset, cfg: &PruneConfig) -> Result<PruneResult> {
    cfg.validate()?;
    let mut net = net.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = AdmmState::new(&net, cfg)?;
    let mut trace = Vec::with_capacity(cfg.admm_iterations);
    for iteration in 0..cfg.admm_iterations {
        admm_step_primal(&state, &mut net, data, cfg, &mut rng)?;
        admm_step_auxiliary(&mut state, &net, cfg)?;
        admm_step_dual(&mut state, &net)?;
        let (residual_z, residual_y) = primal_residuals(&state, &net);
        trace.push(TraceRow {
            iteration,
            loss: net.loss(data),
            residual_z,
            residual_y,
        });
        log::debug!("admm iteration {iteration}: rz={residual_z:.4e} ry={residual_y:.4e}");
    }
    let alphas: Vec<usize> = state.layers.iter().map(|l| l.alpha).collect();
    let layers = hard_project(&mut net, &alphas, &cfg.pattern_set)?;
    masked_finetune(&mut net, &layers, &cfg.pattern_set, data, cfg, &mut rng)?;
    Ok(PruneResult { net, layers, trace })
}

/// Checks both constraints on a pruned network. Returns a description of the
/// first violation.
pub fn check_feasible(
    net: &TinyNet,
    layers: &[LayerPruning],
    set: &PatternSet,
) -> std::result::Result<(), String> {
    for (k, (c, l)) in net.convs.iter().zip(layers).enumerate() {
        let klen = c.shape.kernel_len();
        let mut nonzero = 0;
        for (kidx, kernel) in c.weights.chunks_exact(klen).enumerate() {
            if kernel.iter().all(|&v| v == 0.0) {
                continue;
            }
            nonzero += 1;
            if c.shape.is_3x3() {
                let support: Vec<usize> = (0..9).filter(|&i| kernel[i] != 0.0).collect();
                let fits = set
                    .patterns()
                    .iter()
                    .any(|p| support.iter().all(|&i| p.contains(i / 3, i % 3)));
                if !fits {
                    return Err(format!(
                        "layer {k} kernel {kidx}: support {support:?} fits no pattern"
                    ));
                }
            }
        }
        if nonzero > l.mask.alpha {
            return Err(format!(
                "layer {k}: {nonzero} nonzero kernels exceed alpha {}",
                l.mask.alpha
            ));
        }
    }
    Ok(())
}
