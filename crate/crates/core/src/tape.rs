//! Reverse-mode differentiation over the small, fixed op set the flow needs.
//!
//! Every op appends a node holding its output; [`Tape::backward`] walks the
//! nodes in reverse and applies each op's adjoint. Rounding and gate
//! binarization use straight-through gradients, quantizers use the LSQ
//! gradient from [`crate::quant`]. Parameters are borrowed from the
//! [`ParamStore`] rather than copied.

use crate::conv;
use crate::error::{shape_err, Result};
use crate::flow::squeeze;
use crate::logistic;
use crate::params::{Grads, ParamId, ParamStore};
use crate::quant::{self, Bounds};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Value {
    Owned(Tensor),
    Param(ParamId),
}

enum Op {
    Input,
    Param(ParamId),
    Conv2d { x: Var, w: Var, b: Var },
    Relu(Var),
    Add(Var, Var),
    ScatterAdd { base: Var, inner: Var, index: Vec<usize> },
    FakeQuant { x: Var, scale: Var, bounds: Bounds, group: usize, factor: f32 },
    RoundSte(Var),
    Binarize(Var),
    ChannelMul { x: Var, g: Var },
    Squeeze(Var),
    Unsqueeze(Var),
    Slice { x: Var, start: usize },
    Concat(Vec<Var>),
    Affine { x: Var, mul: f32 },
    Broadcast { p: Var },
    LogPmf { z: Var, mu: Var, log_s: Var },
    Sum(Var),
}

struct Node {
    value: Value,
    op: Op,
}

pub struct Tape<'a> {
    store: &'a ParamStore,
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`].
pub struct TapeGrads {
    leaves: Vec<Option<Tensor>>,
    pub params: Grads,
}

impl TapeGrads {
    /// Gradient with respect to an input or parameter node.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.leaves.get(v.0).and_then(|g| g.as_ref())
    }
}

/// `[b][c][hw]` view helpers.
fn bchw(t: &Tensor) -> Result<(usize, usize, usize)> {
    let (b, c, h, w) = t.dims4()?;
    Ok((b, c, h * w))
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err(format!("{what}: {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

impl<'a> Tape<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Self { store, nodes: Vec::with_capacity(256) }
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    #[inline]
    pub fn value(&self, v: Var) -> &Tensor {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Param(id) => self.store.get(*id),
        }
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value: Value::Owned(value), op });
        Var(self.nodes.len() - 1)
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.nodes.push(Node { value: Value::Param(id), op: Op::Param(id) });
        Var(self.nodes.len() - 1)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = conv::conv2d(self.value(x), self.value(w), self.value(b))?;
        Ok(self.push(y, Op::Conv2d { x, w, b }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = Tensor::from_fn(self.value(x).shape(), |i| self.value(x).data()[i].max(0.0));
        self.push(y, Op::Relu(x))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "add")?;
        let mut y = self.value(a).clone();
        y.add_assign(self.value(b));
        Ok(self.push(y, Op::Add(a, b)))
    }

    /// `out = base; out[:, index[k]] += inner[:, k]`
    pub fn scatter_add(&mut self, base: Var, inner: Var, index: &[usize]) -> Result<Var> {
        let (b, c, hw) = bchw(self.value(base))?;
        let (bi, ci, hwi) = bchw(self.value(inner))?;
        if b != bi || hw != hwi || ci != index.len() {
            return Err(shape_err(format!(
                "scatter-add of {:?} into {:?} with {} indices",
                self.value(inner).shape(),
                self.value(base).shape(),
                index.len()
            )));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= c) {
            return Err(shape_err(format!("scatter index {bad} out of range for {c} channels")));
        }
        let mut y = self.value(base).clone();
        {
            let src = self.value(inner).data();
            let dst = y.data_mut();
            for bb in 0..b {
                for (k, &ch) in index.iter().enumerate() {
                    let d = &mut dst[(bb * c + ch) * hw..(bb * c + ch + 1) * hw];
                    for (o, &v) in d.iter_mut().zip(&src[(bb * ci + k) * hw..(bb * ci + k + 1) * hw]) {
                        *o += v;
                    }
                }
            }
        }
        Ok(self.push(y, Op::ScatterAdd { base, inner, index: index.to_vec() }))
    }

    /// Quantize-dequantize with a learnable scale. `scale` holds one entry
    /// per group of `len / scale.len()` consecutive elements; `channels` is
    /// the `C` of the `1/sqrt(C Q_P)` gradient re-scaling.
    pub fn fake_quant(&mut self, x: Var, scale: Var, bounds: Bounds, channels: usize) -> Result<Var> {
        let n = self.value(x).len();
        let ns = self.value(scale).len();
        if ns == 0 || n % ns != 0 {
            return Err(shape_err(format!("{ns} scales for {n} elements")));
        }
        if let Some(&s) = self.value(scale).data().iter().find(|&&s| !(s > 0.0 && s.is_finite())) {
            return Err(crate::error::Error::InvalidScale(s));
        }
        let group = n / ns;
        let y = quant::fake_quantize(self.value(x).data(), self.value(scale).data(), group, bounds);
        let y = Tensor::new(self.value(x).shape(), y)?;
        let factor = quant::scale_grad_factor(channels, bounds.q_p());
        Ok(self.push(y, Op::FakeQuant { x, scale, bounds, group, factor }))
    }

    pub fn round_ste(&mut self, x: Var) -> Var {
        let y = Tensor::from_fn(self.value(x).shape(), |i| quant::round_half_away(self.value(x).data()[i]));
        self.push(y, Op::RoundSte(x))
    }

    /// `1` where `g > 0.5`, else `0`.
    pub fn binarize(&mut self, g: Var) -> Var {
        let y = Tensor::from_fn(self.value(g).shape(), |i| binarize(self.value(g).data()[i]));
        self.push(y, Op::Binarize(g))
    }

    /// `y[:, c] = g[c] * x[:, c]`
    pub fn channel_mul(&mut self, x: Var, g: Var) -> Result<Var> {
        let (_, c, hw) = bchw(self.value(x))?;
        if self.value(g).len() != c {
            return Err(shape_err(format!("{} gates for {c} channels", self.value(g).len())));
        }
        let gv = self.value(g).data();
        let xv = self.value(x).data();
        let y = Tensor::from_fn(self.value(x).shape(), |i| gv[(i / hw) % c] * xv[i]);
        Ok(self.push(y, Op::ChannelMul { x, g }))
    }

    pub fn squeeze(&mut self, x: Var) -> Result<Var> {
        let (d, s) = squeeze::squeeze(self.value(x).data(), self.value(x).shape())?;
        let y = Tensor::new(&s, d)?;
        Ok(self.push(y, Op::Squeeze(x)))
    }

    pub fn unsqueeze(&mut self, x: Var) -> Result<Var> {
        let (d, s) = squeeze::unsqueeze(self.value(x).data(), self.value(x).shape())?;
        let y = Tensor::new(&s, d)?;
        Ok(self.push(y, Op::Unsqueeze(x)))
    }

    /// Channels `start..start+len`.
    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let y = self.value(x).slice_channels(start, len)?;
        Ok(self.push(y, Op::Slice { x, start }))
    }

    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let vals: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let y = Tensor::concat_channels(&vals)?;
        Ok(self.push(y, Op::Concat(parts.to_vec())))
    }

    /// `mul * x + add` with constants.
    pub fn affine(&mut self, x: Var, mul: f32, add: f32) -> Var {
        let y = Tensor::from_fn(self.value(x).shape(), |i| mul * self.value(x).data()[i] + add);
        self.push(y, Op::Affine { x, mul })
    }

    /// Broadcast a per-channel vector to `[b, c, h, w]`.
    pub fn broadcast(&mut self, p: Var, b: usize, h: usize, w: usize) -> Var {
        let c = self.value(p).len();
        let hw = h * w;
        let y = Tensor::from_fn(&[b, c, h, w], |i| self.value(p).data()[(i / hw) % c]);
        self.push(y, Op::Broadcast { p })
    }

    /// Elementwise base-2 discretized-logistic log-mass.
    pub fn log_pmf(&mut self, z: Var, mu: Var, log_s: Var) -> Result<Var> {
        same_shape(self.value(z), self.value(mu), "log_pmf mu")?;
        same_shape(self.value(z), self.value(log_s), "log_pmf log_s")?;
        let y = logistic::logistic_logpmf(self.value(z).data(), self.value(mu).data(), self.value(log_s).data());
        let y = Tensor::new(self.value(z).shape(), y)?;
        Ok(self.push(y, Op::LogPmf { z, mu, log_s }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum() as f32;
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    /// Gradients of the scalar `loss` with respect to every input and
    /// parameter node.
    pub fn backward(&self, loss: Var) -> TapeGrads {
        let n = self.nodes.len();
        let mut g: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        g[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));
        let mut params = Grads::zeros_like(self.store);
        let mut leaves: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();

        fn acc(g: &mut [Option<Tensor>], v: Var, t: Tensor) {
            match &mut g[v.0] {
                Some(a) => a.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
        }

        for i in (0..n).rev() {
            let Some(up) = g[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Input => leaves[i] = Some(up),
                Op::Param(id) => {
                    params.accumulate(*id, &up);
                    leaves[i] = Some(up);
                }
                Op::Conv2d { x, w, b } => {
                    let cg = conv::conv2d_backward(self.value(*x), self.value(*w), &up)
                        .expect("shapes validated in forward");
                    acc(&mut g, *x, cg.x);
                    acc(&mut g, *w, cg.w);
                    acc(&mut g, *b, cg.bias);
                }
                Op::Relu(x) => {
                    let xv = self.value(*x).data();
                    let d = up.data().iter().zip(xv).map(|(&u, &v)| if v > 0.0 { u } else { 0.0 }).collect();
                    acc(&mut g, *x, Tensor::new(up.shape(), d).unwrap());
                }
                Op::Add(a, b) => {
                    acc(&mut g, *a, up.clone());
                    acc(&mut g, *b, up);
                }
                Op::ScatterAdd { base, inner, index } => {
                    let (b, c, hw) = bchw(&up).unwrap();
                    let ishape = self.value(*inner).shape().to_vec();
                    let ci = index.len();
                    let mut gi = vec![0.0f32; b * ci * hw];
                    for bb in 0..b {
                        for (k, &ch) in index.iter().enumerate() {
                            gi[(bb * ci + k) * hw..(bb * ci + k + 1) * hw]
                                .copy_from_slice(&up.data()[(bb * c + ch) * hw..(bb * c + ch + 1) * hw]);
                        }
                    }
                    acc(&mut g, *inner, Tensor::new(&ishape, gi).unwrap());
                    acc(&mut g, *base, up);
                }
                Op::FakeQuant { x, scale, bounds, group, factor } => {
                    let (gx, gs) = quant::lsq_backward(
                        self.value(*x).data(),
                        self.value(*scale).data(),
                        *group,
                        *bounds,
                        up.data(),
                        *factor,
                    );
                    acc(&mut g, *x, Tensor::new(up.shape(), gx).unwrap());
                    acc(&mut g, *scale, Tensor::new(self.value(*scale).shape(), gs).unwrap());
                }
                Op::RoundSte(x) | Op::Binarize(x) | Op::Affine { x, mul: 1.0 } => acc(&mut g, *x, up),
                Op::Affine { x, mul } => {
                    let d = up.data().iter().map(|&u| u * mul).collect();
                    acc(&mut g, *x, Tensor::new(up.shape(), d).unwrap());
                }
                Op::ChannelMul { x, g: gate } => {
                    let (b, c, hw) = bchw(&up).unwrap();
                    let gv = self.value(*gate).data();
                    let xv = self.value(*x).data();
                    let mut gx = vec![0.0f32; up.len()];
                    let mut gg = vec![0.0f64; c];
                    for bb in 0..b {
                        for ch in 0..c {
                            let r = (bb * c + ch) * hw..(bb * c + ch + 1) * hw;
                            for j in r {
                                gx[j] = gv[ch] * up.data()[j];
                                gg[ch] += (up.data()[j] * xv[j]) as f64;
                            }
                        }
                    }
                    acc(&mut g, *x, Tensor::new(up.shape(), gx).unwrap());
                    let gg = gg.into_iter().map(|v| v as f32).collect();
                    acc(&mut g, *gate, Tensor::new(self.value(*gate).shape(), gg).unwrap());
                }
                Op::Squeeze(x) => {
                    let (d, s) = squeeze::unsqueeze(up.data(), up.shape()).unwrap();
                    acc(&mut g, *x, Tensor::new(&s, d).unwrap());
                }
                Op::Unsqueeze(x) => {
                    let (d, s) = squeeze::squeeze(up.data(), up.shape()).unwrap();
                    acc(&mut g, *x, Tensor::new(&s, d).unwrap());
                }
                Op::Slice { x, start } => {
                    let xs = self.value(*x).shape().to_vec();
                    let (b, c, hw) = bchw(self.value(*x)).unwrap();
                    let len = up.shape()[1];
                    let mut d = vec![0.0f32; b * c * hw];
                    for bb in 0..b {
                        d[(bb * c + start) * hw..(bb * c + start + len) * hw]
                            .copy_from_slice(&up.data()[bb * len * hw..(bb + 1) * len * hw]);
                    }
                    acc(&mut g, *x, Tensor::new(&xs, d).unwrap());
                }
                Op::Concat(parts) => {
                    let (b, total, hw) = bchw(&up).unwrap();
                    let mut off = 0;
                    for &p in parts {
                        let ps = self.value(p).shape().to_vec();
                        let pc = ps[1];
                        let mut d = Vec::with_capacity(b * pc * hw);
                        for bb in 0..b {
                            d.extend_from_slice(&up.data()[(bb * total + off) * hw..(bb * total + off + pc) * hw]);
                        }
                        acc(&mut g, p, Tensor::new(&ps, d).unwrap());
                        off += pc;
                    }
                }
                Op::Broadcast { p } => {
                    let c = self.value(*p).len();
                    let (_, _, hw) = bchw(&up).unwrap();
                    let mut d = vec![0.0f64; c];
                    for (i, &u) in up.data().iter().enumerate() {
                        d[(i / hw) % c] += u as f64;
                    }
                    let d = d.into_iter().map(|v| v as f32).collect();
                    acc(&mut g, *p, Tensor::new(self.value(*p).shape(), d).unwrap());
                }
                Op::LogPmf { z, mu, log_s } => {
                    let (zv, mv, lv) = (self.value(*z).data(), self.value(*mu).data(), self.value(*log_s).data());
                    let n = up.len();
                    let (mut gz, mut gm, mut gl) = (vec![0.0f32; n], vec![0.0f32; n], vec![0.0f32; n]);
                    for j in 0..n {
                        let d = logistic::log2_pmf_with_grad(zv[j] as f64, mv[j] as f64, lv[j] as f64);
                        let u = up.data()[j] as f64;
                        gz[j] = (u * d.d_z) as f32;
                        gm[j] = (u * d.d_mu) as f32;
                        gl[j] = (u * d.d_log_s) as f32;
                    }
                    let s = up.shape().to_vec();
                    acc(&mut g, *z, Tensor::new(&s, gz).unwrap());
                    acc(&mut g, *mu, Tensor::new(&s, gm).unwrap());
                    acc(&mut g, *log_s, Tensor::new(&s, gl).unwrap());
                }
                Op::Sum(x) => {
                    let u = up.data()[0];
                    acc(&mut g, *x, Tensor::full(self.value(*x).shape(), u));
                }
            }
        }
        TapeGrads { leaves, params }
    }
}

#[inline]
pub fn binarize(g: f32) -> f32 {
    if g > 0.5 {
        1.0
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamKind;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    /// Finite-difference check of d(sum(up * f(x)))/dx for a graph builder.
    fn fd_check(x0: &Tensor, build: impl Fn(&mut Tape, Var) -> Var) {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let x = tape.input(x0.clone());
        let y = build(&mut tape, x);
        let s = tape.sum(y);
        let grads = tape.backward(s);
        let analytic = grads.wrt(x).unwrap().clone();
        let eval = |xv: &Tensor| -> f64 {
            let mut t = Tape::new(&store);
            let x = t.input(xv.clone());
            let y = build(&mut t, x);
            t.value(y).sum()
        };
        let h = 1e-2f32;
        for i in 0..x0.len() {
            let mut p = x0.clone();
            p.data_mut()[i] += h;
            let mut m = x0.clone();
            m.data_mut()[i] -= h;
            let fd = (eval(&p) - eval(&m)) / (2.0 * h as f64);
            let a = analytic.data()[i] as f64;
            assert!((a - fd).abs() <= 1e-3 * fd.abs().max(1.0), "elem {i}: {a} vs {fd}");
        }
    }

    #[test]
    fn shape_ops_have_exact_adjoints() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = rand_t(&mut rng, &[2, 4, 2, 2]);
        let w: Vec<f32> = (0..x.len()).map(|i| (i as f32 * 0.37).sin()).collect();
        let weight = Tensor::new(x.shape(), w.clone()).unwrap();
        // weight the output so that permutations are visible to the check
        fd_check(&x, |t, v| {
            let s = t.squeeze(v).unwrap();
            let u = t.unsqueeze(s).unwrap();
            let a = t.slice(u, 1, 2).unwrap();
            let b = t.slice(u, 0, 1).unwrap();
            let c = t.slice(u, 3, 1).unwrap();
            let cat = t.concat(&[a, b, c]).unwrap();
            let wv = t.input(weight.clone());
            let g = t_const_gate(t);
            let m = t.channel_mul(cat, g).unwrap();
            let m2 = t.add(m, wv).unwrap();
            t.affine(m2, 1.5, 0.0)
        });
    }

    fn t_const_gate(t: &mut Tape) -> Var {
        t.input(Tensor::new(&[4], vec![1.0, 0.5, -2.0, 3.0]).unwrap())
    }

    #[test]
    fn relu_add_and_scatter_add_adjoints() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        // keep values away from the relu kink
        let x = Tensor::from_fn(&[1, 3, 3, 3], |_| {
            let v: f32 = rng.gen_range(0.1..1.0);
            if rng.gen_bool(0.5) { v } else { -v }
        });
        fd_check(&x, |t, v| {
            let r = t.relu(v);
            let inner = t.slice(v, 1, 2).unwrap();
            let sa = t.scatter_add(r, inner, &[2, 0]).unwrap();
            let sq = t.affine(sa, 2.0, 0.3);
            t.add(sq, r).unwrap()
        });
    }

    #[test]
    fn scatter_add_rejects_bad_index() {
        let store = ParamStore::new();
        let mut t = Tape::new(&store);
        let base = t.input(Tensor::zeros(&[1, 2, 2, 2]));
        let inner = t.input(Tensor::zeros(&[1, 1, 2, 2]));
        assert!(t.scatter_add(base, inner, &[2]).is_err());
        assert!(t.scatter_add(base, inner, &[0, 1]).is_err());
    }

    #[test]
    fn scatter_add_places_pruned_channel() {
        // Two-channel shortcut, one surviving inner channel mapped to channel 0.
        let store = ParamStore::new();
        let mut t = Tape::new(&store);
        let base = t.input(Tensor::new(&[1, 2, 1, 1], vec![1.0, 2.0]).unwrap());
        let inner = t.input(Tensor::new(&[1, 1, 1, 1], vec![10.0]).unwrap());
        let y = t.scatter_add(base, inner, &[0]).unwrap();
        assert_eq!(t.value(y).data(), &[11.0, 2.0]);
    }

    #[test]
    fn conv_and_pmf_adjoints_through_params() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::new();
        let w = store.add("w", ParamKind::Weight, rand_t(&mut rng, &[2, 2, 3, 3]));
        let b = store.add("b", ParamKind::Bias, rand_t(&mut rng, &[2]));
        let ls = store.add("ls", ParamKind::Prior, Tensor::new(&[2], vec![0.3, -0.4]).unwrap());
        let z = Tensor::from_fn(&[1, 2, 4, 4], |_| rng.gen_range(-3i32..4) as f32);
        let x = rand_t(&mut rng, &[1, 2, 4, 4]);
        let build = |store: &ParamStore| -> f64 {
            let mut t = Tape::new(store);
            let xv = t.input(x.clone());
            let (wv, bv, lv) = (t.param(w), t.param(b), t.param(ls));
            let mu = t.conv2d(xv, wv, bv).unwrap();
            let lsb = t.broadcast(lv, 1, 4, 4);
            let zv = t.input(z.clone());
            let lp = t.log_pmf(zv, mu, lsb).unwrap();
            t.value(lp).sum()
        };
        let mut t = Tape::new(&store);
        let xv = t.input(x.clone());
        let (wv, bv, lv) = (t.param(w), t.param(b), t.param(ls));
        let mu = t.conv2d(xv, wv, bv).unwrap();
        let lsb = t.broadcast(lv, 1, 4, 4);
        let zv = t.input(z.clone());
        let lp = t.log_pmf(zv, mu, lsb).unwrap();
        let s = t.sum(lp);
        let grads = t.backward(s);
        for id in [w, b, ls] {
            let an = grads.params.get(id).unwrap().clone();
            for i in 0..an.len() {
                let h = 1e-3;
                let mut sp = store.clone();
                sp.get_mut(id).data_mut()[i] += h;
                let mut sm = store.clone();
                sm.get_mut(id).data_mut()[i] -= h;
                let fd = (build(&sp) - build(&sm)) / (2.0 * h as f64);
                let a = an.data()[i] as f64;
                assert!((a - fd).abs() <= 2e-3 * fd.abs().max(1.0), "{id:?}[{i}] {a} vs {fd}");
            }
        }
    }

    #[test]
    fn round_and_binarize_are_straight_through() {
        let store = ParamStore::new();
        let mut t = Tape::new(&store);
        let x = t.input(Tensor::new(&[3], vec![0.4, 0.5, 2.6]).unwrap());
        let r = t.round_ste(x);
        assert_eq!(t.value(r).data(), &[0.0, 1.0, 3.0]);
        let b = t.binarize(x);
        assert_eq!(t.value(b).data(), &[0.0, 0.0, 1.0]);
        let a = t.add(r, b).unwrap();
        let s = t.sum(a);
        let g = t.backward(s);
        assert_eq!(g.wrt(x).unwrap().data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn fake_quant_scale_gradient_uses_lsq_form() {
        let mut store = ParamStore::new();
        let sid = store.add("s", ParamKind::ActScale, Tensor::scalar(0.5));
        let mut t = Tape::new(&store);
        let x = t.input(Tensor::new(&[1, 1, 1, 4], vec![0.3, 1.1, 300.0, -2.0]).unwrap());
        let s = t.param(sid);
        let q = t.fake_quant(x, s, Bounds::UNSIGNED, 1).unwrap();
        assert_eq!(t.value(q).data(), &[0.5, 1.0, 127.5, 0.0]);
        let l = t.sum(q);
        let g = t.backward(l);
        // branches: (1 - 0.6), (2 - 2.2), Q_P = 255, below zero -> lo = 0
        let expected = ((1.0 - 0.6) + (2.0 - 2.2) + 255.0 + 0.0) / (255f32).sqrt();
        let got = g.params.get(sid).unwrap().data()[0];
        assert!((got - expected).abs() < 1e-4, "{got} vs {expected}");
        assert_eq!(g.wrt(x).unwrap().data(), &[1.0, 1.0, 0.0, 0.0]);
    }
}
