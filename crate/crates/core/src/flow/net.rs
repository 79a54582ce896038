//! Coupling and prior networks.
//!
//! A network is `first conv -> ReLU -> residual blocks -> output conv`. The
//! first conv always runs in float. In quantizable networks every residual
//! block is
//!
//! ```text
//! y = ReLU(SAdd(Q(x), G2(Q(ReLU(G1(Q(x))))) ))
//! ```
//!
//! where `G1`, `G2` are gated convolutions and `SAdd` scatters the (possibly
//! channel-pruned) inner result into the shortcut's channel space. The
//! output conv reads a quantized input as well.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::conv::{self, int_conv2d, IntConv};
use crate::error::{shape_err, Error, Result};
use crate::params::{ParamId, ParamKind, ParamStore};
use crate::quant::{self, round_half_away_f64, Bounds, QuantizedTensor, QuantizerParams, Scale};
use crate::tape::{binarize, Tape, Var};
use crate::tensor::Tensor;

/// Translations and prior locations are produced in units of this many
/// integer steps per unit of network output.
pub const OUTPUT_SCALE: f32 = 128.0;
pub const KERNEL: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    /// Per-filter weight quantizer scale; absent for layers that always run
    /// in float.
    pub w_scale: Option<ParamId>,
    pub gate: Option<ParamId>,
}

impl ConvLayer {
    pub fn c_out(&self, store: &ParamStore) -> usize {
        store.get(self.weight).shape()[0]
    }

    pub fn c_in(&self, store: &ParamStore) -> usize {
        store.get(self.weight).shape()[1]
    }

    /// Binarized gates, or all ones when gating is off or absent.
    pub fn gate_mask(&self, store: &ParamStore, gates_active: bool) -> Vec<bool> {
        match (self.gate, gates_active) {
            (Some(g), true) => store.get(g).data().iter().map(|&v| binarize(v) == 1.0).collect(),
            _ => vec![true; self.c_out(store)],
        }
    }

    pub fn alive_out(&self, store: &ParamStore, gates_active: bool) -> usize {
        self.gate_mask(store, gates_active).iter().filter(|&&k| k).count()
    }

    /// Filters that do work: gate on, and for gated layers not silenced
    /// (all-zero weights and bias, the placeholder pruning leaves behind
    /// when a whole layer is gated off).
    pub fn working_out(&self, store: &ParamStore, gates_active: bool) -> usize {
        let mask = self.gate_mask(store, gates_active);
        if self.gate.is_none() {
            return mask.iter().filter(|&&k| k).count();
        }
        let w = store.get(self.weight).data();
        let b = store.get(self.bias).data();
        let per = w.len() / mask.len().max(1);
        (0..mask.len()).filter(|&i| mask[i] && (b[i] != 0.0 || w[i * per..(i + 1) * per].iter().any(|&v| v != 0.0))).count()
    }

    fn weight_var(&self, tape: &mut Tape, quantize: bool) -> Result<Var> {
        let w = tape.param(self.weight);
        match (quantize, self.w_scale) {
            (true, Some(s)) => {
                let c = tape.value(w).shape()[0];
                let s = tape.param(s);
                tape.fake_quant(w, s, Bounds::SIGNED, c)
            }
            _ => Ok(w),
        }
    }

    fn apply(&self, tape: &mut Tape, x: Var, ex: Exec) -> Result<Var> {
        let w = self.weight_var(tape, ex.weights)?;
        let b = tape.param(self.bias);
        let y = tape.conv2d(x, w, b)?;
        match (self.gate, ex.gates) {
            (Some(g), true) => {
                let g = tape.param(g);
                let gb = tape.binarize(g);
                tape.channel_mul(y, gb)
            }
            _ => Ok(y),
        }
    }

    /// Integer version of this layer's weights.
    pub fn to_int(&self, store: &ParamStore) -> Result<IntConv> {
        let s = self.w_scale.ok_or_else(|| Error::InvalidArgument("layer is not quantizable".into()))?;
        let q = quant::quantize_per_channel(store.get(self.weight), store.get(s).data(), true)?;
        IntConv::from_quantized(&q, store.get(self.bias).data())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResBlock {
    pub conv1: ConvLayer,
    pub conv2: ConvLayer,
    /// Activation scales: block input, conv2 input, conv2 output.
    pub s_in: Option<ParamId>,
    pub s_mid: Option<ParamId>,
    pub s_res: Option<ParamId>,
    /// Shortcut channel receiving each conv2 filter's output.
    pub keep: Vec<usize>,
}

/// Which optional parts of the graph are switched on.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Exec {
    pub gates: bool,
    pub acts: bool,
    pub weights: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Net {
    pub first: ConvLayer,
    pub blocks: Vec<ResBlock>,
    pub out: ConvLayer,
    /// Input scale of the output conv; present iff the net is quantizable.
    pub s_out: Option<ParamId>,
    /// Flow level the net belongs to (selects the gate penalty).
    pub level: usize,
}

pub(crate) struct Builder<'a> {
    pub store: &'a mut ParamStore,
    pub rng: ChaCha8Rng,
    pub alpha: f32,
}

impl Builder<'_> {
    fn conv(&mut self, name: &str, c_in: usize, c_out: usize, zero: bool, quant: bool, gated: bool) -> ConvLayer {
        let k = KERNEL;
        let w = if zero {
            Tensor::zeros(&[c_out, c_in, k, k])
        } else {
            let bound = (6.0 / (c_in * k * k) as f32).sqrt();
            let rng = &mut self.rng;
            Tensor::from_fn(&[c_out, c_in, k, k], |_| rng.gen_range(-bound..bound))
        };
        let weight = self.store.add(format!("{name}.w"), ParamKind::Weight, w);
        let bias = self.store.add(format!("{name}.b"), ParamKind::Bias, Tensor::zeros(&[c_out]));
        let w_scale = quant.then(|| self.store.add(format!("{name}.ws"), ParamKind::WeightScale, Tensor::full(&[c_out], 1.0)));
        let gate = gated.then(|| self.store.add(format!("{name}.g"), ParamKind::Gate, Tensor::full(&[c_out], self.alpha)));
        ConvLayer { weight, bias, w_scale, gate }
    }

    fn act_scale(&mut self, name: &str, quant: bool) -> Option<ParamId> {
        quant.then(|| self.store.add(name.to_string(), ParamKind::ActScale, Tensor::scalar(1.0)))
    }

    /// Coupling nets are quantizable and gated; prior nets are neither.
    pub fn net(&mut self, name: &str, c_in: usize, hidden: usize, c_out: usize, blocks: usize, quant: bool, level: usize) -> Net {
        let first = self.conv(&format!("{name}.first"), c_in, hidden, false, false, false);
        let blocks = (0..blocks)
            .map(|i| {
                let p = format!("{name}.block{i}");
                ResBlock {
                    s_in: self.act_scale(&format!("{p}.s_in"), quant),
                    conv1: self.conv(&format!("{p}.conv1"), hidden, hidden, false, quant, quant),
                    s_mid: self.act_scale(&format!("{p}.s_mid"), quant),
                    conv2: self.conv(&format!("{p}.conv2"), hidden, hidden, false, quant, quant),
                    s_res: self.act_scale(&format!("{p}.s_res"), quant),
                    keep: (0..hidden).collect(),
                }
            })
            .collect();
        let s_out = self.act_scale(&format!("{name}.s_out"), quant);
        let out = self.conv(&format!("{name}.out"), hidden, c_out, true, quant, false);
        Net { first, blocks, out, s_out, level }
    }
}

/// Collects `(activation scale, quantizer input)` pairs during a forward
/// pass, for calibration.
pub type Probe = Vec<(ParamId, Var)>;

fn fq(tape: &mut Tape, x: Var, s: Option<ParamId>, bounds: Bounds, on: bool, probe: &mut Option<&mut Probe>) -> Result<Var> {
    if let (Some(p), Some(s)) = (probe.as_deref_mut(), s) {
        p.push((s, x));
    }
    match (on, s) {
        (true, Some(s)) => {
            let c = tape.value(x).shape()[1];
            let s = tape.param(s);
            tape.fake_quant(x, s, bounds, c)
        }
        _ => Ok(x),
    }
}

impl Net {
    pub fn quantizable(&self) -> bool {
        self.s_out.is_some()
    }

    /// Every conv in execution order.
    pub fn convs(&self) -> impl Iterator<Item = &ConvLayer> {
        std::iter::once(&self.first)
            .chain(self.blocks.iter().flat_map(|b| [&b.conv1, &b.conv2]))
            .chain(std::iter::once(&self.out))
    }

    /// Float or fake-quantized forward on the tape; returns the raw output
    /// (before [`OUTPUT_SCALE`]).
    pub fn forward(&self, tape: &mut Tape, x: Var, ex: Exec) -> Result<Var> {
        self.forward_probed(tape, x, ex, None)
    }

    pub fn forward_probed(&self, tape: &mut Tape, x: Var, ex: Exec, mut probe: Option<&mut Probe>) -> Result<Var> {
        let ex = if self.quantizable() { ex } else { Exec::default() };
        let ex_first = Exec { gates: false, acts: false, weights: false };
        let h = self.first.apply(tape, x, ex_first)?;
        let mut h = tape.relu(h);
        for b in &self.blocks {
            let xq = fq(tape, h, b.s_in, Bounds::UNSIGNED, ex.acts, &mut probe)?;
            let a = b.conv1.apply(tape, xq, ex)?;
            let a = tape.relu(a);
            let aq = fq(tape, a, b.s_mid, Bounds::UNSIGNED, ex.acts, &mut probe)?;
            let r = b.conv2.apply(tape, aq, ex)?;
            let rq = fq(tape, r, b.s_res, Bounds::SIGNED, ex.acts, &mut probe)?;
            let sum = tape.scatter_add(xq, rq, &b.keep)?;
            h = tape.relu(sum);
        }
        let hq = fq(tape, h, self.s_out, Bounds::UNSIGNED, ex.acts, &mut probe)?;
        self.out.apply(tape, hq, Exec { gates: false, ..ex })
    }

    /// Float/fake-quant evaluation without keeping gradients around.
    pub fn eval(&self, store: &ParamStore, x: &Tensor, ex: Exec) -> Result<Tensor> {
        let mut tape = Tape::new(store);
        let xv = tape.input(x.clone());
        let y = self.forward(&mut tape, xv, ex)?;
        Ok(tape.value(y).clone())
    }

    /// Multiply-accumulate FLOPs (2 per MAC) on an `h x w` map, counting only
    /// working filters and input channels whose producer works.
    pub fn flops(&self, store: &ParamStore, gates_active: bool, hw: usize) -> u64 {
        let k2 = (KERNEL * KERNEL) as u64;
        let f = |co: usize, ci: usize| 2 * co as u64 * ci as u64 * k2 * hw as u64;
        let mut total = f(self.first.c_out(store), self.first.c_in(store));
        for b in &self.blocks {
            let width = b.conv1.c_in(store);
            let a1 = b.conv1.working_out(store, gates_active);
            let a2 = b.conv2.working_out(store, gates_active);
            total += f(a1, width) + f(a2, a1);
        }
        total + f(self.out.c_out(store), self.out.c_in(store))
    }
}

/// Integer residual add: `round(clip((s_x x + s_r SAdd(r)) / s_y, 0, 255))`,
/// with both multipliers in double precision. The clip at zero is the
/// block's ReLU.
pub fn int_residual_add(x: &QuantizedTensor, r: &QuantizedTensor, keep: &[usize], s_y: f32) -> Result<QuantizedTensor> {
    let (b, c, h, w) = match x.shape[..] {
        [b, c, h, w] => (b, c, h, w),
        _ => return Err(shape_err("residual add expects rank 4")),
    };
    let cr = r.shape[1];
    if r.shape != [b, cr, h, w] || keep.len() != cr {
        return Err(shape_err(format!("residual add of {:?} into {:?}", r.shape, x.shape)));
    }
    if let Some(&bad) = keep.iter().find(|&&k| k >= c) {
        return Err(shape_err(format!("scatter index {bad} out of range for {c} channels")));
    }
    let (Scale::PerTensor(sx), Scale::PerTensor(sr)) = (&x.scale, &r.scale) else {
        return Err(shape_err("residual add needs per-tensor scales"));
    };
    let m1 = *sx as f64 / s_y as f64;
    let m2 = *sr as f64 / s_y as f64;
    let hw = h * w;
    let mut acc: Vec<f64> = x.values.iter().map(|&v| m1 * v as f64).collect();
    for bi in 0..b {
        for (k, &ch) in keep.iter().enumerate() {
            let dst = &mut acc[(bi * c + ch) * hw..(bi * c + ch + 1) * hw];
            for (d, &v) in dst.iter_mut().zip(&r.values[(bi * cr + k) * hw..(bi * cr + k + 1) * hw]) {
                *d += m2 * v as f64;
            }
        }
    }
    let values = acc.into_iter().map(|v| round_half_away_f64(v).clamp(0.0, 255.0) as i32).collect();
    Ok(QuantizedTensor { shape: x.shape.clone(), values, scale: Scale::PerTensor(s_y), signed: false })
}

fn zero_masked(q: &mut QuantizedTensor, mask: &Option<Vec<bool>>) {
    if let Some(mask) = mask {
        let c = q.shape[1];
        let hw = q.shape[2] * q.shape[3];
        for (i, v) in q.values.iter_mut().enumerate() {
            if !mask[(i / hw) % c] {
                *v = 0;
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct IntBlock {
    pub conv1: IntConv,
    pub conv2: IntConv,
    pub mask1: Option<Vec<bool>>,
    pub mask2: Option<Vec<bool>>,
    pub s_in: f32,
    pub s_mid: f32,
    pub s_res: f32,
    pub keep: Vec<usize>,
}

/// A quantizable net lowered to 8-bit weights and fixed activation scales.
#[derive(Clone, Debug)]
pub struct IntNet {
    pub first_w: Tensor,
    pub first_b: Tensor,
    pub blocks: Vec<IntBlock>,
    pub out: IntConv,
    pub s_out: f32,
}

fn scale_of(store: &ParamStore, s: Option<ParamId>) -> Result<f32> {
    let s = s.ok_or_else(|| Error::InvalidArgument("net is not quantizable".into()))?;
    let v = store.get(s).data()[0];
    if !(v > 0.0 && v.is_finite()) {
        return Err(Error::InvalidScale(v));
    }
    Ok(v)
}

impl IntNet {
    pub fn prepare(net: &Net, store: &ParamStore, gates_active: bool) -> Result<Self> {
        let mask = |c: &ConvLayer| {
            let m = c.gate_mask(store, gates_active);
            (!m.iter().all(|&k| k)).then_some(m)
        };
        let blocks = net
            .blocks
            .iter()
            .map(|b| {
                Ok(IntBlock {
                    conv1: b.conv1.to_int(store)?,
                    conv2: b.conv2.to_int(store)?,
                    mask1: mask(&b.conv1),
                    mask2: mask(&b.conv2),
                    s_in: scale_of(store, b.s_in)?,
                    s_mid: scale_of(store, b.s_mid)?,
                    s_res: scale_of(store, b.s_res)?,
                    keep: b.keep.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            first_w: store.get(net.first.weight).clone(),
            first_b: store.get(net.first.bias).clone(),
            blocks,
            out: net.out.to_int(store)?,
            s_out: scale_of(store, net.s_out)?,
        })
    }

    /// Output accumulators of the last conv, `[b][c_out][hw]`, and the
    /// input activation scale they were computed with.
    pub fn accumulate(&self, x: &Tensor) -> Result<(Vec<i32>, f32)> {
        let h = conv::conv2d(x, &self.first_w, &self.first_b)?;
        let h = Tensor::from_fn(h.shape(), |i| h.data()[i].max(0.0));
        let first_scale = self.blocks.first().map_or(self.s_out, |b| b.s_in);
        let mut q = quant::quantize(&h, QuantizerParams::unsigned(first_scale))?;
        for (i, b) in self.blocks.iter().enumerate() {
            let next = self.blocks.get(i + 1).map_or(self.s_out, |n| n.s_in);
            let mut a = int_conv2d(&q, &b.conv1, b.s_mid, false)?;
            zero_masked(&mut a, &b.mask1);
            let mut r = int_conv2d(&a, &b.conv2, b.s_res, true)?;
            zero_masked(&mut r, &b.mask2);
            q = int_residual_add(&q, &r, &b.keep, next)?;
        }
        Ok((self.out.accumulate(&q)?, self.s_out))
    }

    /// Integer translation `round(acc * s_w * s_x * OUTPUT_SCALE)`.
    pub fn translation(&self, x: &Tensor) -> Result<Vec<i32>> {
        let (acc, s_x) = self.accumulate(x)?;
        let hw = x.shape()[2] * x.shape()[3];
        let c = self.out.c_out;
        let mult: Vec<f64> = self.out.w_scales.iter().map(|&sw| sw as f64 * s_x as f64 * OUTPUT_SCALE as f64).collect();
        Ok(acc
            .iter()
            .enumerate()
            .map(|(i, &a)| round_half_away_f64(a as f64 * mult[(i / hw) % c]) as i32)
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn build(quant: bool) -> (ParamStore, Net) {
        let mut store = ParamStore::new();
        let mut b = Builder { store: &mut store, rng: ChaCha8Rng::seed_from_u64(3), alpha: 0.8 };
        let net = b.net("t", 2, 4, 2, 2, quant, 0);
        (store, net)
    }

    #[test]
    fn zero_initialized_output_gives_zero() {
        let (store, net) = build(true);
        let x = Tensor::from_fn(&[1, 2, 4, 4], |i| i as f32 * 0.1);
        let y = net.eval(&store, &x, Exec { gates: true, acts: false, weights: false }).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn residual_add_places_pruned_channel() {
        // Two shortcut channels, one inner channel routed to channel 0.
        let x = QuantizedTensor { shape: vec![1, 2, 1, 1], values: vec![3, 5], scale: Scale::PerTensor(1.0), signed: false };
        let r = QuantizedTensor { shape: vec![1, 1, 1, 1], values: vec![-2], scale: Scale::PerTensor(0.5), signed: true };
        let y = int_residual_add(&x, &r, &[0], 0.5).unwrap();
        assert_eq!(y.values, vec![4, 10]);
        assert!(int_residual_add(&x, &r, &[2], 0.5).is_err());
    }

    #[test]
    fn flops_of_full_width_block() {
        let (store, net) = build(true);
        // first 2->4, two blocks of 4->4 twice, out 4->2, on a 4x4 map
        let per = |co: u64, ci: u64| 2 * co * ci * 9 * 16;
        let expected = per(4, 2) + 2 * (per(4, 4) + per(4, 4)) + per(2, 4);
        assert_eq!(net.flops(&store, true, 16), expected);
    }

    #[test]
    fn closed_gates_remove_producer_and_consumer_work() {
        let (mut store, net) = build(true);
        let full = net.flops(&store, true, 16);
        let g = net.blocks[0].conv1.gate.unwrap();
        store.get_mut(g).data_mut()[..2].fill(0.2);
        let per = |co: u64, ci: u64| 2 * co * ci * 9 * 16;
        // conv1 keeps 2 of 4 filters, conv2 sees 2 of 4 inputs
        assert_eq!(full - net.flops(&store, true, 16), per(2, 4) + per(4, 2));
        assert_eq!(net.flops(&store, false, 16), full);
    }

    #[test]
    fn unquantizable_net_cannot_be_lowered() {
        let (store, net) = build(false);
        assert!(IntNet::prepare(&net, &store, false).is_err());
    }
}
