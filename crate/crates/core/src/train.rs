//! Objectives, optimizer, calibration, pruning and the five-stage workflow.
//!
//! 1. float training of the ungated model (early stop on validation bpd),
//! 2. gated training until the FLOPs target is met,
//! 3. pruning and fine-tuning with the surviving filters,
//! 4. fake quantization of activations,
//! 5. fake quantization of weights as well.

use std::fmt;
use std::path::PathBuf;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::flow::{Exec, FlowModel, Net, Probe};
use crate::params::{Grads, ParamId, ParamKind, ParamStore};
use crate::quant::{init_scale, MIN_INIT_SCALE};
use crate::tape::{binarize, Tape};
use crate::tensor::Tensor;

/// Bit width of every quantizer.
pub const BITS: u32 = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Stage 1 learning rate.
    pub lr: f32,
    /// Multiplicative decay applied once per epoch.
    pub lr_decay: f32,
    /// Gate learning rate in stage 2.
    pub gate_lr: f32,
    /// Weight learning rate in stages 2 and 3.
    pub prune_lr: f32,
    /// Learning rate in stages 4 and 5.
    pub quant_lr: f32,
    /// Epoch budget per stage; for stage 2 this is the hard cap.
    pub epochs: [usize; 5],
    pub batch: usize,
    /// Penalty strength per level, counted from the deepest level. The last
    /// entry is reused for deeper architectures.
    pub lambda: Vec<f32>,
    /// Extra multiplier on every penalty on top of the `1 / G` normalization.
    pub lambda_scale: f32,
    pub alpha: f32,
    pub r_target: f64,
    pub patience: usize,
    pub min_delta: f64,
    pub calib_images: usize,
    pub seed: u64,
    /// Write `stage<n>.ckpt` here after every stage.
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            lr_decay: 0.99,
            gate_lr: 5e-5,
            prune_lr: 5e-5,
            quant_lr: 1e-4,
            epochs: [100, 50, 5, 10, 10],
            batch: 32,
            lambda: vec![1.0, 2.0, 4.0, 8.0],
            lambda_scale: 1.0,
            alpha: 0.8,
            r_target: 0.6,
            patience: 5,
            min_delta: 1e-3,
            calib_images: 64,
            seed: 0,
            checkpoint_dir: None,
        }
    }
}

impl TrainConfig {
    /// Settings that finish the whole workflow on one CPU core in minutes.
    pub fn desk() -> Self {
        Self {
            lr: 2e-3,
            lr_decay: 0.97,
            gate_lr: 1e-2,
            prune_lr: 1e-3,
            quant_lr: 1e-3,
            epochs: [20, 40, 5, 5, 5],
            batch: 16,
            lambda_scale: 8.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.into()));
        if !(self.r_target > 0.0 && self.r_target <= 1.0) {
            return bad("r_target must lie in (0, 1]");
        }
        if self.batch == 0 {
            return bad("batch size must be positive");
        }
        if self.lambda.is_empty() || self.lambda.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
            return bad("lambda must be a non-empty list of non-negative numbers");
        }
        for lr in [self.lr, self.gate_lr, self.prune_lr, self.quant_lr, self.lr_decay] {
            if !(lr.is_finite() && lr > 0.0) {
                return bad("learning rates and decay must be positive");
            }
        }
        if self.calib_images == 0 {
            return bad("calibration needs at least one image");
        }
        Ok(())
    }
}

/// Training and validation images, `[n, c, h, w]` with byte values.
#[derive(Clone, Debug)]
pub struct Split {
    pub train: Tensor,
    pub valid: Tensor,
}

/// Mean bits per dimension of `batch` under the model's current execution
/// mode (float, gated and/or fake-quantized).
pub fn loss_bpd(batch: &Tensor, model: &FlowModel) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let mut tape = Tape::new(&model.store);
    let f = model.forward_tape(&mut tape, batch, model.exec())?;
    Ok(-(tape.value(f.log2p).data()[0] as f64) / batch.len() as f64)
}

/// Validation bpd, evaluated in chunks to bound memory.
pub fn eval_bpd(data: &Tensor, model: &FlowModel, chunk: usize) -> Result<f64> {
    let n = data.shape()[0];
    let mut bits = 0.0;
    for start in (0..n).step_by(chunk.max(1)) {
        let b = data.slice_batch(start, chunk.min(n - start))?;
        bits += loss_bpd(&b, model)? * b.len() as f64;
    }
    Ok(bits / data.len() as f64)
}

/// Total number of gated filters.
pub fn gated_filters(model: &FlowModel) -> usize {
    model.coupling_nets().flat_map(|n| n.convs()).filter_map(|c| c.gate).map(|g| model.store.get(g).len()).sum()
}

/// Penalty per gate for each level (index 0 = shallowest), already divided
/// by the number of gated filters.
pub fn level_lambdas(cfg: &TrainConfig, model: &FlowModel) -> Vec<f32> {
    let levels = model.levels.len();
    let g = gated_filters(model).max(1) as f32;
    (0..levels)
        .map(|l| {
            let from_deepest = levels - 1 - l;
            cfg.lambda[from_deepest.min(cfg.lambda.len() - 1)] * cfg.lambda_scale / g
        })
        .collect()
}

/// `sum_l lambda_l * (surviving gated filters in level l)`.
pub fn gate_penalty(model: &FlowModel, lambdas: &[f32]) -> f64 {
    model
        .coupling_nets()
        .map(|net| {
            let alive: usize = net
                .convs()
                .filter_map(|c| c.gate)
                .map(|g| model.store.get(g).data().iter().map(|&v| binarize(v) as usize).sum::<usize>())
                .sum();
            lambdas[net.level] as f64 * alive as f64
        })
        .sum()
}

/// `L_IDF + sum_l lambda_l * ||binarize(g)||_1` in bpd units.
pub fn gated_objective(batch: &Tensor, model: &FlowModel, lambdas: &[f32]) -> Result<f64> {
    Ok(loss_bpd(batch, model)? + gate_penalty(model, lambdas))
}

/// Loss in bpd and its gradients for one batch. With `lambdas` the gate
/// gradients also receive the penalty's derivative (one per gate, through
/// the straight-through binarization).
pub fn loss_and_grads(batch: &Tensor, model: &FlowModel, lambdas: Option<&[f32]>) -> Result<(f64, Grads)> {
    let mut tape = Tape::new(&model.store);
    let f = model.forward_tape(&mut tape, batch, model.exec())?;
    let d = batch.len() as f64;
    let loss = -(tape.value(f.log2p).data()[0] as f64) / d;
    if !loss.is_finite() {
        return Err(Error::NonFinite("training loss"));
    }
    let mut grads = tape.backward(f.log2p).params;
    grads.scale(-1.0 / d as f32);
    if let Some(lambdas) = lambdas {
        for net in model.coupling_nets() {
            for g in net.convs().filter_map(|c| c.gate) {
                grads.add_scalar_to(g, model.store.get(g).shape(), lambdas[net.level]);
            }
        }
    }
    Ok((loss, grads))
}

/// Adamax with per-kind learning rates.
#[derive(Clone, Debug)]
pub struct Adamax {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    t: i32,
    m: Vec<Vec<f32>>,
    u: Vec<Vec<f32>>,
}

impl Adamax {
    pub fn new(store: &ParamStore) -> Self {
        let z: Vec<Vec<f32>> = store.iter().map(|(_, p)| vec![0.0; p.value.len()]).collect();
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: z.clone(), u: z }
    }

    /// Carry the moments of a parameter through a pruning selection.
    pub fn select(&mut self, sel: &Selection) {
        for buf in [&mut self.m[sel.id.0], &mut self.u[sel.id.0]] {
            if buf.len() == sel.shape.iter().product::<usize>() {
                let t = Tensor::new(&sel.shape, std::mem::take(buf)).expect("length checked");
                *buf = select_axis(&t, sel.axis, &sel.keep).into_data();
            }
        }
    }

    /// One update. `lr(kind)` returns `None` for frozen groups. Gates are
    /// clamped to `[0, 1]` and quantizer scales kept positive.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Grads, lr: impl Fn(ParamKind) -> Option<f32>) {
        self.t += 1;
        let bias = 1.0 - self.beta1.powi(self.t);
        for (id, p) in store.iter_mut() {
            let (Some(rate), Some(g)) = (lr(p.kind), grads.get(id)) else { continue };
            let (m, u) = (&mut self.m[id.0], &mut self.u[id.0]);
            if m.len() != g.len() {
                // shapes changed under us (pruning); restart the moments
                *m = vec![0.0; g.len()];
                *u = vec![0.0; g.len()];
            }
            let step = rate / bias;
            let kind = p.kind;
            for (((w, &gi), mi), ui) in p.value.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(u.iter_mut()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *ui = (self.beta2 * *ui).max(gi.abs());
                *w -= step * *mi / (*ui + self.eps);
                match kind {
                    ParamKind::Gate => *w = w.clamp(0.0, 1.0),
                    ParamKind::WeightScale | ParamKind::ActScale => *w = w.max(MIN_INIT_SCALE),
                    _ => {}
                }
            }
        }
    }
}

/// One line of training progress.
#[derive(Clone, Debug, PartialEq)]
pub struct StageReport {
    pub stage: u8,
    pub epoch: usize,
    pub bpd: f64,
    pub flops: u64,
    pub lr: f32,
}

impl fmt::Display for StageReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "stage={} epoch={} bpd={:.6} flops={} lr={:e}", self.stage, self.epoch, self.bpd, self.flops, self.lr)
    }
}

/// Initialize every activation scale from the float activations of the
/// first `n` training images.
pub fn calibrate_activations(model: &mut FlowModel, data: &Tensor, n: usize) -> Result<()> {
    let n = n.min(data.shape()[0]);
    let batch = data.slice_batch(0, n)?;
    let mut scales: Vec<(ParamId, f32)> = Vec::new();
    {
        let mut tape = Tape::new(&model.store);
        let mut probe = Probe::new();
        let ex = Exec { acts: false, ..model.exec() };
        model.forward_tape_probed(&mut tape, &batch, ex, Some(&mut probe))?;
        for (id, v) in probe {
            scales.push((id, init_scale(tape.value(v).data(), BITS)?));
        }
    }
    for (id, s) in scales {
        model.store.get_mut(id).data_mut()[0] = s;
    }
    Ok(())
}

/// Initialize every per-filter weight scale from the filter's weights.
pub fn calibrate_weights(model: &mut FlowModel) -> Result<()> {
    let pairs: Vec<(ParamId, ParamId)> =
        model.nets().flat_map(|n| n.convs()).filter_map(|c| c.w_scale.map(|s| (c.weight, s))).collect();
    for (w, s) in pairs {
        let wt = model.store.get(w).clone();
        let per = wt.len() / wt.shape()[0];
        let scales = wt.data().chunks(per).map(|f| init_scale(f, BITS)).collect::<Result<Vec<_>>>()?;
        model.store.get_mut(s).data_mut().copy_from_slice(&scales);
    }
    Ok(())
}

fn select_axis(t: &Tensor, axis: usize, keep: &[usize]) -> Tensor {
    let shape = t.shape();
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let n = shape[axis];
    let mut data = Vec::with_capacity(outer * keep.len() * inner);
    for o in 0..outer {
        for &k in keep {
            let start = (o * n + k) * inner;
            data.extend_from_slice(&t.data()[start..start + inner]);
        }
    }
    let mut new_shape = shape.to_vec();
    new_shape[axis] = keep.len();
    Tensor::new(&new_shape, data).expect("selection preserves sizes")
}

/// Sub-selection of one axis of a parameter made by pruning.
#[derive(Clone, Debug, PartialEq)]
pub struct Selection {
    pub id: ParamId,
    /// Shape before the selection.
    pub shape: Vec<usize>,
    pub axis: usize,
    pub keep: Vec<usize>,
}

fn shrink(store: &mut ParamStore, id: Option<ParamId>, axis: usize, keep: &[usize], log: &mut Vec<Selection>) {
    if let Some(id) = id {
        let t = select_axis(store.get(id), axis, keep);
        log.push(Selection { id, shape: store.get(id).shape().to_vec(), axis, keep: keep.to_vec() });
        *store.get_mut(id) = t;
    }
}

/// Surviving filters of a gated conv. A layer whose gates are all zero keeps
/// its highest gate, silenced so the network output does not change.
fn survivors(store: &mut ParamStore, net_name: &str, conv: &crate::flow::ConvLayer) -> Vec<usize> {
    let Some(g) = conv.gate else { return (0..conv.c_out(store)).collect() };
    let gv = store.get(g).data();
    let keep: Vec<usize> = (0..gv.len()).filter(|&i| binarize(gv[i]) == 1.0).collect();
    if !keep.is_empty() {
        return keep;
    }
    let best = (0..gv.len()).max_by(|&a, &b| gv[a].total_cmp(&gv[b]).then(b.cmp(&a))).expect("non-empty layer");
    warn!("every gate is zero in a layer of {net_name}; keeping filter {best} with zeroed weights");
    let per = store.get(conv.weight).len() / gv.len();
    store.get_mut(conv.weight).data_mut()[best * per..(best + 1) * per].fill(0.0);
    store.get_mut(conv.bias).data_mut()[best] = 0.0;
    vec![best]
}

fn prune_net(store: &mut ParamStore, net: &mut Net, name: &str, log: &mut Vec<Selection>) {
    for b in &mut net.blocks {
        let k1 = survivors(store, name, &b.conv1);
        let k2 = survivors(store, name, &b.conv2);
        let c1 = &b.conv1;
        for id in [Some(c1.weight), Some(c1.bias), c1.w_scale, c1.gate] {
            shrink(store, id, 0, &k1, log);
        }
        let c2 = &b.conv2;
        for id in [Some(c2.weight), Some(c2.bias), c2.w_scale, c2.gate] {
            shrink(store, id, 0, &k2, log);
        }
        shrink(store, Some(c2.weight), 1, &k1, log);
        b.keep = k2.iter().map(|&i| b.keep[i]).collect();
        for g in [b.conv1.gate, b.conv2.gate].into_iter().flatten() {
            store.get_mut(g).data_mut().fill(1.0);
        }
    }
}

/// Physically remove every filter whose gate is off, together with the
/// matching input channels of the following conv. The result computes the
/// same function as the gated model with gating switched off. Gate tensors
/// shrink along with their filters and are left at one.
pub fn prune(model: &FlowModel) -> Result<FlowModel> {
    Ok(prune_with_selections(model)?.0)
}

/// [`prune`], also returning every selection applied, in order.
pub fn prune_with_selections(model: &FlowModel) -> Result<(FlowModel, Vec<Selection>)> {
    let mut out = model.clone();
    let mut log = Vec::new();
    if !model.state.gates_active {
        return Ok((out, log));
    }
    let FlowModel { store, levels, .. } = &mut out;
    for (l, level) in levels.iter_mut().enumerate() {
        for (j, net) in level.couplings.iter_mut().enumerate() {
            prune_net(store, net, &format!("l{l}.c{j}"), &mut log);
        }
    }
    out.state.gates_active = false;
    out.state.pruned = true;
    out.validate()?;
    Ok((out, log))
}

/// FLOPs of the model with gating switched off (the stage 2 baseline).
pub fn ungated_flops(model: &FlowModel) -> u64 {
    let mut m = model.clone();
    m.state.gates_active = false;
    m.flops()
}

fn gather(data: &Tensor, idx: &[usize]) -> Result<Tensor> {
    let (_, c, h, w) = data.dims4()?;
    let per = c * h * w;
    let mut v = Vec::with_capacity(idx.len() * per);
    for &i in idx {
        v.extend_from_slice(&data.data()[i * per..(i + 1) * per]);
    }
    Tensor::new(&[idx.len(), c, h, w], v)
}

/// Which parameter groups a stage trains, and at what rate.
fn stage_lr(stage: u8, cfg: &TrainConfig, decay: f32) -> impl Fn(ParamKind) -> Option<f32> {
    let (main, gate, act, weight_scale) = match stage {
        1 => (cfg.lr, None, None, None),
        2 => (cfg.prune_lr, Some(cfg.gate_lr), None, None),
        3 => (cfg.prune_lr, None, None, None),
        4 => (cfg.quant_lr, None, Some(cfg.quant_lr), None),
        _ => (cfg.quant_lr, None, Some(cfg.quant_lr), Some(cfg.quant_lr)),
    };
    move |k| {
        let r = match k {
            ParamKind::Weight | ParamKind::Bias | ParamKind::Prior => Some(main),
            ParamKind::Gate => gate,
            ParamKind::ActScale => act,
            ParamKind::WeightScale => weight_scale,
        };
        r.map(|r| r * decay)
    }
}

/// Drives the stages and collects their reports.
pub struct Trainer<'a> {
    pub cfg: TrainConfig,
    pub data: &'a Split,
    pub reports: Vec<StageReport>,
    /// Baseline FLOPs of the ungated model, fixed once stage 2 starts.
    pub f0: Option<u64>,
    /// Optimizer state carried from stage to stage.
    opt: Option<Adamax>,
    sink: Box<dyn FnMut(&StageReport) + 'a>,
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: TrainConfig, data: &'a Split) -> Result<Self> {
        cfg.validate()?;
        if data.train.dims4()?.0 == 0 || data.valid.dims4()?.0 == 0 {
            return Err(Error::InvalidArgument("training and validation sets must be non-empty".into()));
        }
        Ok(Self { cfg, data, reports: Vec::new(), f0: None, opt: None, sink: Box::new(|_| {}) })
    }

    /// Called with every report as it is produced.
    pub fn on_report(mut self, f: impl FnMut(&StageReport) + 'a) -> Self {
        self.sink = Box::new(f);
        self
    }

    fn report(&mut self, r: StageReport) {
        info!("{r}");
        (self.sink)(&r);
        self.reports.push(r);
    }

    fn take_opt(&mut self, model: &FlowModel) -> Adamax {
        match self.opt.take() {
            Some(o) if o.m.len() == model.store.len() => o,
            _ => Adamax::new(&model.store),
        }
    }

    fn valid_bpd(&self, model: &FlowModel) -> Result<f64> {
        eval_bpd(&self.data.valid, model, 64)
    }

    /// One pass over the shuffled training set. Returns `true` if
    /// `stop_after_step` fired.
    fn epoch(
        &mut self,
        model: &mut FlowModel,
        opt: &mut Adamax,
        stage: u8,
        epoch: usize,
        lambdas: Option<&[f32]>,
        mut stop_after_step: impl FnMut(&FlowModel) -> bool,
    ) -> Result<bool> {
        let n = self.data.train.shape()[0];
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed ^ ((stage as u64) << 32) ^ epoch as u64);
        order.shuffle(&mut rng);
        let decay = self.cfg.lr_decay.powi(epoch as i32);
        let lr = stage_lr(stage, &self.cfg, decay);
        for idx in order.chunks(self.cfg.batch) {
            let batch = gather(&self.data.train, idx)?;
            let (_, grads) = loss_and_grads(&batch, model, lambdas)?;
            opt.step(&mut model.store, &grads, &lr);
            if stop_after_step(model) {
                return Ok(true);
            }
        }
        Ok(false)
    }

    fn base_lr(&self, stage: u8) -> f32 {
        match stage {
            1 => self.cfg.lr,
            2 | 3 => self.cfg.prune_lr,
            _ => self.cfg.quant_lr,
        }
    }

    /// Fixed budget with early stopping on validation bpd.
    fn converge(&mut self, model: &mut FlowModel, stage: u8) -> Result<()> {
        let mut opt = self.take_opt(model);
        let mut best = self.valid_bpd(model)?;
        self.report(StageReport { stage, epoch: 0, bpd: best, flops: model.flops(), lr: self.base_lr(stage) });
        let mut stale = 0;
        for epoch in 0..self.cfg.epochs[stage as usize - 1] {
            self.epoch(model, &mut opt, stage, epoch, None, |_| false)?;
            let bpd = self.valid_bpd(model)?;
            let lr = self.base_lr(stage) * self.cfg.lr_decay.powi(epoch as i32);
            self.report(StageReport { stage, epoch: epoch + 1, bpd, flops: model.flops(), lr });
            if bpd < best - self.cfg.min_delta {
                best = bpd;
                stale = 0;
            } else {
                stale += 1;
                if stale >= self.cfg.patience {
                    break;
                }
            }
        }
        self.opt = Some(opt);
        Ok(())
    }

    fn checkpoint(&self, model: &FlowModel, stage: u8) -> Result<()> {
        if let Some(dir) = &self.cfg.checkpoint_dir {
            std::fs::create_dir_all(dir)?;
            model.save(&dir.join(format!("stage{stage}.ckpt")))?;
        }
        Ok(())
    }

    /// Float training of the ungated model, from data-dependent prior init.
    pub fn stage1(&mut self, model: &mut FlowModel) -> Result<()> {
        model.state = Default::default();
        let n = self.data.train.shape()[0].min(256);
        model.init_priors(&self.data.train.slice_batch(0, n)?)?;
        self.converge(model, 1)?;
        self.checkpoint(model, 1)
    }

    /// Gated training until FLOPs fall to `r_target * F0`.
    pub fn stage2(&mut self, model: &mut FlowModel) -> Result<()> {
        if model.state.pruned || model.state.quant_acts {
            return Err(Error::Training("stage 2 needs an unpruned float model".into()));
        }
        let f0 = *self.f0.get_or_insert(ungated_flops(model));
        let target = (self.cfg.r_target * f0 as f64).floor() as u64;
        for (_, p) in model.store.iter_mut().filter(|(_, p)| p.kind == ParamKind::Gate) {
            p.value.data_mut().fill(self.cfg.alpha);
        }
        model.state.gates_active = true;
        let lambdas = level_lambdas(&self.cfg, model);
        let mut opt = self.take_opt(model);
        let cap = self.cfg.epochs[1];
        let mut epoch = 0;
        let bpd = self.valid_bpd(model)?;
        self.report(StageReport { stage: 2, epoch: 0, bpd, flops: model.flops(), lr: self.cfg.gate_lr });
        while model.flops() > target {
            if epoch == cap {
                return Err(Error::Training(format!(
                    "stage 2 hit its {cap}-epoch cap at {} FLOPs ({:.3} of F0 = {f0}, target {:.3}); \
                     {} of {} gates still on — raise lambda_scale or gate_lr",
                    model.flops(),
                    model.flops() as f64 / f0 as f64,
                    self.cfg.r_target,
                    gate_penalty(model, &vec![1.0; lambdas.len()]),
                    gated_filters(model),
                )));
            }
            self.epoch(model, &mut opt, 2, epoch, Some(&lambdas), |m| m.flops() <= target)?;
            epoch += 1;
            let bpd = self.valid_bpd(model)?;
            let lr = self.cfg.gate_lr * self.cfg.lr_decay.powi(epoch as i32 - 1);
            self.report(StageReport { stage: 2, epoch, bpd, flops: model.flops(), lr });
        }
        self.opt = Some(opt);
        self.checkpoint(model, 2)
    }

    /// Prune, then fine-tune the surviving filters.
    pub fn stage3(&mut self, model: &mut FlowModel) -> Result<()> {
        let (pruned, selections) = prune_with_selections(model)?;
        *model = pruned;
        if let Some(opt) = self.opt.as_mut() {
            for sel in &selections {
                opt.select(sel);
            }
        }
        self.converge(model, 3)?;
        self.checkpoint(model, 3)
    }

    /// Calibrate and switch on activation fake quantization.
    pub fn stage4(&mut self, model: &mut FlowModel) -> Result<()> {
        calibrate_activations(model, &self.data.train, self.cfg.calib_images)?;
        model.state.quant_acts = true;
        self.converge(model, 4)?;
        self.checkpoint(model, 4)
    }

    /// Calibrate and switch on weight fake quantization.
    pub fn stage5(&mut self, model: &mut FlowModel) -> Result<()> {
        if !model.state.quant_acts {
            return Err(Error::Training("stage 5 needs activation quantization from stage 4".into()));
        }
        calibrate_weights(model)?;
        model.state.quant_weights = true;
        self.converge(model, 5)?;
        self.checkpoint(model, 5)
    }

    pub fn run_stage(&mut self, model: &mut FlowModel, stage: u8) -> Result<()> {
        match stage {
            1 => self.stage1(model),
            2 => self.stage2(model),
            3 => self.stage3(model),
            4 => self.stage4(model),
            5 => self.stage5(model),
            _ => Err(Error::InvalidArgument(format!("no stage {stage}"))),
        }
    }
}

/// Every stage in order. Returns the reports and the baseline FLOPs.
pub fn run_pipeline(cfg: TrainConfig, model: &mut FlowModel, data: &Split) -> Result<(Vec<StageReport>, u64)> {
    let mut t = Trainer::new(cfg, data)?;
    for stage in 1..=5 {
        t.run_stage(model, stage)?;
    }
    let f0 = t.f0.expect("stage 2 ran");
    Ok((t.reports, f0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::{FlowConfig, Path, Runner};
    use rand::Rng;

    fn tiny() -> FlowConfig {
        FlowConfig { channels: 3, height: 8, width: 8, levels: 2, couplings: 2, hidden: 8, blocks: 1, prior_blocks: 1 }
    }

    fn images(n: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[n, 3, 8, 8], |_| rng.gen_range(0..256) as f32)
    }

    /// Give every weight and bias random values so gating matters.
    fn scrambled(seed: u64) -> FlowModel {
        let mut m = FlowModel::new(tiny(), seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (_, p) in m.store.iter_mut() {
            if matches!(p.kind, ParamKind::Weight | ParamKind::Bias) {
                for v in p.value.data_mut() {
                    *v = rng.gen_range(-0.3..0.3);
                }
            }
        }
        m
    }

    #[test]
    fn identical_images_have_the_same_bpd() {
        let mut m = FlowModel::new(tiny(), 0).unwrap();
        for id in [m.final_mu, m.final_log_s] {
            m.store.get_mut(id).data_mut().fill(0.0);
        }
        let x = images(2, 1);
        let single = loss_bpd(&x.slice_batch(0, 1).unwrap(), &m).unwrap();
        let doubled = Tensor::concat_batch(&[&x.slice_batch(0, 1).unwrap(), &x.slice_batch(0, 1).unwrap()]);
        assert!((loss_bpd(&doubled, &m).unwrap() - single).abs() < 1e-6);
        assert!(loss_bpd(&Tensor::zeros(&[0, 3, 8, 8]), &m).is_err());
    }

    #[test]
    fn penalty_counts_surviving_gates() {
        let mut m = FlowModel::new(tiny(), 0).unwrap();
        m.state.gates_active = true;
        let g = gated_filters(&m);
        assert_eq!(g, 2 * 2 * 2 * 8);
        let uniform = vec![0.25f32; 2];
        assert!((gate_penalty(&m, &uniform) - 0.25 * g as f64).abs() < 1e-9);
        assert_eq!(gate_penalty(&m, &[0.0, 0.0]), 0.0);
        let id = m.coupling_nets().next().unwrap().blocks[0].conv1.gate.unwrap();
        m.store.get_mut(id).data_mut()[3] = 0.49;
        assert!((gate_penalty(&m, &uniform) - 0.25 * (g - 1) as f64).abs() < 1e-9);
        let x = images(1, 2);
        let l = loss_bpd(&x, &m).unwrap();
        assert!((gated_objective(&x, &m, &[0.0, 0.0]).unwrap() - l).abs() < 1e-12);
    }

    #[test]
    fn lambda_is_largest_at_the_shallowest_level() {
        let m = FlowModel::new(tiny(), 0).unwrap();
        let l = level_lambdas(&TrainConfig::default(), &m);
        let g = gated_filters(&m) as f32;
        assert_eq!(l, vec![2.0 / g, 1.0 / g]);
    }

    #[test]
    fn gate_gradient_includes_penalty() {
        let mut m = scrambled(4);
        m.state.gates_active = true;
        let x = images(2, 5);
        let (_, plain) = loss_and_grads(&x, &m, None).unwrap();
        let (_, pen) = loss_and_grads(&x, &m, Some(&[0.5, 0.25])).unwrap();
        for net in m.coupling_nets() {
            let want = [0.5, 0.25][net.level];
            for g in net.convs().filter_map(|c| c.gate) {
                let (a, b) = (plain.get(g).unwrap(), pen.get(g).unwrap());
                for (x, y) in a.data().iter().zip(b.data()) {
                    assert!((y - x - want).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn adamax_first_step_moves_by_lr() {
        let mut store = ParamStore::new();
        let w = store.add("w", ParamKind::Weight, Tensor::full(&[3], 1.0));
        let g = store.add("g", ParamKind::Gate, Tensor::full(&[1], 0.99));
        let mut grads = Grads::zeros_like(&store);
        grads.accumulate(w, &Tensor::new(&[3], vec![2.0, -0.5, 0.0]).unwrap());
        grads.accumulate(g, &Tensor::full(&[1], -3.0));
        let mut opt = Adamax::new(&store);
        opt.step(&mut store, &grads, |_| Some(0.1));
        let v = store.get(w).data();
        assert!((v[0] - 0.9).abs() < 1e-6 && (v[1] - 1.1).abs() < 1e-6 && v[2] == 1.0);
        assert_eq!(store.get(g).data()[0], 1.0);
        opt.step(&mut store, &grads, |k| (k != ParamKind::Weight).then_some(0.1));
        assert!((store.get(w).data()[0] - 0.9).abs() < 1e-6);
    }

    #[test]
    fn prune_removes_filters_and_preserves_outputs() {
        let mut m = scrambled(6);
        m.state.gates_active = true;
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let ids: Vec<ParamId> = m.store.iter().filter(|(_, p)| p.kind == ParamKind::Gate).map(|(i, _)| i).collect();
        for id in ids {
            for v in m.store.get_mut(id).data_mut() {
                *v = rng.gen_range(0.0..1.0);
            }
        }
        let p = prune(&m).unwrap();
        assert_eq!(p.flops(), m.flops());
        assert!(p.flops() < ungated_flops(&m));
        for seed in 0..100 {
            let x = images(1, 100 + seed);
            let a = Runner::new(&m, Path::Float).unwrap().forward(&x).unwrap();
            let b = Runner::new(&p, Path::Float).unwrap().forward(&x).unwrap();
            assert_eq!(a.parts, b.parts);
            assert_eq!(a.log2p(), b.log2p());
        }
    }

    #[test]
    fn prune_of_a_two_filter_block_keeps_the_live_index() {
        let cfg = FlowConfig { hidden: 2, ..tiny() };
        let mut m = FlowModel::new(cfg, 1).unwrap();
        m.state.gates_active = true;
        let g2 = m.levels[0].couplings[0].blocks[0].conv2.gate.unwrap();
        m.store.get_mut(g2).data_mut()[0] = 0.2;
        let p = prune(&m).unwrap();
        let b = &p.levels[0].couplings[0].blocks[0];
        assert_eq!(p.store.get(b.conv2.weight).shape(), &[1, 2, 3, 3]);
        assert_eq!(b.keep, vec![1]);
        let untouched = &p.levels[0].couplings[1].blocks[0];
        assert_eq!(untouched.keep, vec![0, 1]);
    }

    #[test]
    fn all_zero_layer_keeps_one_silent_filter() {
        let mut m = scrambled(8);
        m.state.gates_active = true;
        let g1 = m.levels[1].couplings[0].blocks[0].conv1.gate.unwrap();
        let vals: Vec<f32> = (0..8).map(|i| i as f32 * 0.05).collect();
        m.store.get_mut(g1).data_mut().copy_from_slice(&vals);
        let g2 = m.levels[0].couplings[1].blocks[0].conv2.gate.unwrap();
        m.store.get_mut(g2).data_mut().copy_from_slice(&vals);
        let p = prune(&m).unwrap();
        assert_eq!(p.levels[0].couplings[1].blocks[0].keep, vec![7]);
        let b = &p.levels[1].couplings[0].blocks[0];
        assert_eq!(p.store.get(b.conv1.weight).shape()[0], 1);
        assert_eq!(p.flops(), m.flops());
        let x = images(3, 9);
        let a = Runner::new(&m, Path::Float).unwrap().forward(&x).unwrap();
        let c = Runner::new(&p, Path::Float).unwrap().forward(&x).unwrap();
        assert_eq!(a.parts, c.parts);
    }

    #[test]
    fn calibration_sets_positive_scales() {
        let mut m = scrambled(10);
        let x = images(4, 11);
        calibrate_activations(&mut m, &x, 64).unwrap();
        calibrate_weights(&mut m).unwrap();
        for (_, p) in m.store.iter() {
            if matches!(p.kind, ParamKind::ActScale | ParamKind::WeightScale) {
                assert!(p.value.data().iter().all(|&s| s >= MIN_INIT_SCALE && s != 1.0), "{}", p.name);
            }
        }
    }

    #[test]
    fn report_line_format() {
        let r = StageReport { stage: 2, epoch: 3, bpd: 5.25, flops: 1234, lr: 5e-5 };
        assert_eq!(r.to_string(), "stage=2 epoch=3 bpd=5.250000 flops=1234 lr=5e-5");
    }

    #[test]
    fn stage_two_with_full_target_stops_immediately() {
        let data = Split { train: images(4, 12), valid: images(2, 13) };
        let cfg = TrainConfig { r_target: 1.0, ..TrainConfig::desk() };
        let mut t = Trainer::new(cfg, &data).unwrap();
        let mut m = FlowModel::new(tiny(), 3).unwrap();
        t.stage2(&mut m).unwrap();
        assert_eq!(t.reports.len(), 1);
        assert_eq!(t.reports[0].epoch, 0);
    }

    #[test]
    fn stage_two_cap_is_an_error() {
        let data = Split { train: images(4, 12), valid: images(2, 13) };
        let cfg = TrainConfig { r_target: 0.05, epochs: [1, 1, 1, 1, 1], lambda_scale: 0.0, ..TrainConfig::desk() };
        let mut t = Trainer::new(cfg, &data).unwrap();
        let mut m = FlowModel::new(tiny(), 3).unwrap();
        assert!(matches!(t.stage2(&mut m), Err(Error::Training(_))));
    }

    #[test]
    fn rejects_bad_config() {
        assert!(TrainConfig { r_target: 0.0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { batch: 0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { lambda: vec![], ..TrainConfig::default() }.validate().is_err());
    }
}
