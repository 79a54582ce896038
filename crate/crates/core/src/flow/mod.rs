//! The multi-scale integer discrete flow.
//!
//! Each level squeezes its input 2x2 into channels, applies `couplings`
//! additive couplings `z_b = x_b + round(t(x_a))` with alternating
//! orientation, and (except the last level) factors out the second half of
//! the channels. A factored half is modelled by a discretized logistic whose
//! parameters a prior network predicts from the retained half; the final
//! latent uses learnable per-channel parameters.
//!
//! Training goes through [`FlowModel::forward_tape`]; inference, the codec
//! and the integer-only path go through [`Runner`].

mod checkpoint;
pub mod net;
mod runner;
pub mod squeeze;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use checkpoint::{checksum_bytes, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use net::{ConvLayer, Exec, IntNet, Net, Probe, ResBlock, OUTPUT_SCALE};
pub use runner::{Latents, Path, Prior, Runner};

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamKind, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Bytes are fed to coupling networks as `x / 128 - 1`.
pub const INPUT_SCALE: f32 = 1.0 / 128.0;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FlowConfig {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub levels: usize,
    pub couplings: usize,
    pub hidden: usize,
    pub blocks: usize,
    pub prior_blocks: usize,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl FlowConfig {
    /// Two levels of four couplings, 32 hidden channels, 16x16x3 images.
    pub fn desk() -> Self {
        Self { channels: 3, height: 16, width: 16, levels: 2, couplings: 4, hidden: 32, blocks: 2, prior_blocks: 2 }
    }

    /// The ImageNet32-sized architecture (3 levels of 8 couplings, 128
    /// channels, 8 residual blocks).
    pub fn imagenet32() -> Self {
        Self { channels: 3, height: 32, width: 32, levels: 3, couplings: 8, hidden: 128, blocks: 8, prior_blocks: 2 }
    }

    pub fn validate(&self) -> Result<()> {
        let f = 1usize << self.levels.min(16);
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.levels == 0 || self.couplings == 0 || self.hidden == 0 || self.channels == 0 {
            return bad(format!("degenerate flow config {self:?}"));
        }
        if self.height == 0 || self.width == 0 || self.height % f != 0 || self.width % f != 0 {
            return bad(format!("{}x{} is not divisible by 2^{}", self.height, self.width, self.levels));
        }
        if self.hidden > u16::MAX as usize || self.channels > 255 || self.height > u16::MAX as usize || self.width > u16::MAX as usize {
            return bad("config out of range".into());
        }
        Ok(())
    }

    /// Dimensions per image.
    pub fn dims(&self) -> usize {
        self.channels * self.height * self.width
    }

    /// `(channels, height, width)` inside level `l`, after its squeeze.
    pub fn level_shape(&self, l: usize) -> (usize, usize, usize) {
        ((4 * self.channels) << l, self.height >> (l + 1), self.width >> (l + 1))
    }

    /// Per-image shape of each latent in production order: factored halves
    /// from the shallowest level down, then the final latent.
    pub fn latent_shapes(&self) -> Vec<[usize; 3]> {
        (0..self.levels)
            .map(|l| {
                let (c, h, w) = self.level_shape(l);
                if l + 1 < self.levels {
                    [c / 2, h, w]
                } else {
                    [c, h, w]
                }
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Level {
    pub couplings: Vec<Net>,
    pub prior: Option<Net>,
}

/// Which optional machinery is active. Serialized with the checkpoint.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ModelState {
    pub gates_active: bool,
    pub quant_acts: bool,
    pub quant_weights: bool,
    pub pruned: bool,
}

#[derive(Clone, Debug)]
pub struct FlowModel {
    pub config: FlowConfig,
    pub store: ParamStore,
    pub levels: Vec<Level>,
    pub final_mu: ParamId,
    pub final_log_s: ParamId,
    pub state: ModelState,
}

/// Result of a forward pass on the tape.
pub struct TapeForward {
    /// Scalar sum of base-2 log-likelihoods over the batch.
    pub log2p: Var,
    /// Latents in production order (see [`FlowConfig::latent_shapes`]).
    pub latents: Vec<Var>,
}

/// Default gate initialization.
pub const GATE_INIT: f32 = 0.8;

/// Coupling `j` transforms the second half when even, the first when odd.
fn halves(c: usize, j: usize) -> (usize, usize, usize) {
    let m = c / 2;
    if j % 2 == 0 {
        (0, m, m)
    } else {
        (m, 0, m)
    }
}

impl FlowModel {
    /// Rezero-initialized model: every coupling starts as the identity.
    pub fn new(config: FlowConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut b = net::Builder { store: &mut store, rng: ChaCha8Rng::seed_from_u64(seed), alpha: GATE_INIT };
        let mut levels = Vec::with_capacity(config.levels);
        for l in 0..config.levels {
            let (c, _, _) = config.level_shape(l);
            let couplings = (0..config.couplings)
                .map(|j| b.net(&format!("l{l}.c{j}"), c / 2, config.hidden, c - c / 2, config.blocks, true, l))
                .collect();
            let prior = (l + 1 < config.levels)
                .then(|| b.net(&format!("l{l}.prior"), c / 2, config.hidden, 2 * (c / 2), config.prior_blocks, false, l));
            levels.push(Level { couplings, prior });
        }
        let (c, _, _) = config.level_shape(config.levels - 1);
        let final_mu = store.add("final.mu", ParamKind::Prior, Tensor::zeros(&[c]));
        let final_log_s = store.add("final.log_s", ParamKind::Prior, Tensor::zeros(&[c]));
        Ok(Self { config, store, levels, final_mu, final_log_s, state: ModelState::default() })
    }

    pub fn exec(&self) -> Exec {
        Exec { gates: self.state.gates_active, acts: self.state.quant_acts, weights: self.state.quant_weights }
    }

    /// Coupling networks, level by level.
    pub fn coupling_nets(&self) -> impl Iterator<Item = &Net> {
        self.levels.iter().flat_map(|l| l.couplings.iter())
    }

    /// Every network in declaration order.
    pub fn nets(&self) -> impl Iterator<Item = &Net> {
        self.levels.iter().flat_map(|l| l.couplings.iter().chain(l.prior.iter()))
    }

    pub(crate) fn nets_mut(&mut self) -> impl Iterator<Item = &mut Net> {
        self.levels.iter_mut().flat_map(|l| l.couplings.iter_mut().chain(l.prior.iter_mut()))
    }

    /// FLOPs of one image through every convolution, honouring active gates.
    pub fn flops(&self) -> u64 {
        self.levels
            .iter()
            .enumerate()
            .map(|(l, lv)| {
                let (_, h, w) = self.config.level_shape(l);
                lv.couplings.iter().chain(lv.prior.iter()).map(|n| n.flops(&self.store, self.state.gates_active, h * w)).sum::<u64>()
            })
            .sum()
    }

    fn coupling_tape(&self, tape: &mut Tape, net: &Net, j: usize, x: Var, ex: Exec, probe: Option<&mut Probe>) -> Result<Var> {
        let c = tape.value(x).shape()[1];
        let (a_off, b_off, m) = halves(c, j);
        let xa = tape.slice(x, a_off, m)?;
        let xb = tape.slice(x, b_off, c - m)?;
        let inp = tape.affine(xa, INPUT_SCALE, -1.0);
        let raw = net.forward_probed(tape, inp, ex, probe)?;
        let t = tape.affine(raw, OUTPUT_SCALE, 0.0);
        let t = tape.round_ste(t);
        let zb = tape.add(xb, t)?;
        if j % 2 == 0 {
            tape.concat(&[xa, zb])
        } else {
            tape.concat(&[zb, xa])
        }
    }

    fn prior_tape(&self, tape: &mut Tape, net: &Net, retained: Var) -> Result<(Var, Var)> {
        let inp = tape.affine(retained, INPUT_SCALE, -1.0);
        let raw = net.forward(tape, inp, Exec::default())?;
        let n = tape.value(raw).shape()[1] / 2;
        let mu = tape.slice(raw, 0, n)?;
        let mu = tape.affine(mu, OUTPUT_SCALE, 0.0);
        let log_s = tape.slice(raw, n, n)?;
        Ok((mu, log_s))
    }

    /// Forward pass on the tape. `x` holds integer-valued pixels.
    pub fn forward_tape(&self, tape: &mut Tape, x: &Tensor, ex: Exec) -> Result<TapeForward> {
        self.forward_tape_probed(tape, x, ex, None)
    }

    /// As [`forward_tape`](Self::forward_tape), recording every activation
    /// quantizer's input into `probe`.
    pub fn forward_tape_probed(&self, tape: &mut Tape, x: &Tensor, ex: Exec, mut probe: Option<&mut Probe>) -> Result<TapeForward> {
        let (b, c, h, w) = x.dims4()?;
        if (c, h, w) != (self.config.channels, self.config.height, self.config.width) {
            return Err(crate::error::shape_err(format!(
                "model expects {}x{}x{} images, got {c}x{h}x{w}",
                self.config.channels, self.config.height, self.config.width
            )));
        }
        let mut hv = tape.input(x.clone());
        let mut latents = Vec::with_capacity(self.levels.len());
        let mut total: Option<Var> = None;
        for (l, level) in self.levels.iter().enumerate() {
            hv = tape.squeeze(hv)?;
            for (j, net) in level.couplings.iter().enumerate() {
                hv = self.coupling_tape(tape, net, j, hv, ex, probe.as_deref_mut())?;
            }
            let (z, mu, log_s) = match &level.prior {
                Some(prior) => {
                    let c = tape.value(hv).shape()[1];
                    let retained = tape.slice(hv, 0, c / 2)?;
                    let factored = tape.slice(hv, c / 2, c - c / 2)?;
                    let (mu, log_s) = self.prior_tape(tape, prior, retained)?;
                    hv = retained;
                    (factored, mu, log_s)
                }
                None => {
                    let (_, lh, lw) = self.config.level_shape(l);
                    let mu = tape.param(self.final_mu);
                    let mu = tape.broadcast(mu, b, lh, lw);
                    let ls = tape.param(self.final_log_s);
                    let ls = tape.broadcast(ls, b, lh, lw);
                    (hv, mu, ls)
                }
            };
            let lp = tape.log_pmf(z, mu, log_s)?;
            let s = tape.sum(lp);
            total = Some(match total {
                Some(t) => tape.add(t, s)?,
                None => s,
            });
            latents.push(z);
        }
        Ok(TapeForward { log2p: total.expect("at least one level"), latents })
    }

    /// Data-dependent initialization of every prior from the latents the
    /// current model produces on `x`: location at the per-channel mean,
    /// scale matched to the per-channel standard deviation.
    pub fn init_priors(&mut self, x: &Tensor) -> Result<()> {
        let latents = Runner::new(self, Path::Float)?.forward(x)?;
        let stats = |t: &Tensor| -> Vec<(f32, f32)> {
            let (b, c, h, w) = t.dims4().expect("rank 4 latent");
            let hw = h * w;
            (0..c)
                .map(|ch| {
                    let vals: Vec<f64> = (0..b).flat_map(|bi| t.data()[(bi * c + ch) * hw..(bi * c + ch + 1) * hw].iter().map(|&v| v as f64)).collect();
                    let n = vals.len() as f64;
                    let mean = vals.iter().sum::<f64>() / n;
                    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                    // logistic std = s * pi / sqrt(3)
                    let s = (var.sqrt().max(0.5) * 3f64.sqrt() / std::f64::consts::PI).ln();
                    (mean as f32, s as f32)
                })
                .collect()
        };
        for l in 0..self.levels.len() {
            let st = stats(&latents.parts[l]);
            match self.levels[l].prior.as_ref().map(|p| p.out.bias) {
                Some(bias) => {
                    let n = st.len();
                    let b = self.store.get_mut(bias).data_mut();
                    for (k, &(m, s)) in st.iter().enumerate() {
                        b[k] = m / OUTPUT_SCALE;
                        b[n + k] = s;
                    }
                }
                None => {
                    for (k, &(m, s)) in st.iter().enumerate() {
                        self.store.get_mut(self.final_mu).data_mut()[k] = m;
                        self.store.get_mut(self.final_log_s).data_mut()[k] = s;
                    }
                }
            }
        }
        Ok(())
    }

    /// Structural sanity checks (used after loading and pruning).
    pub fn validate(&self) -> Result<()> {
        let s = &self.store;
        let bad = |m: String| Err(Error::Format(m));
        for net in self.nets() {
            let mut width = net.first.c_out(s);
            for b in &net.blocks {
                if b.conv1.c_in(s) != width || b.conv2.c_in(s) != b.conv1.c_out(s) || b.conv2.c_out(s) != b.keep.len() {
                    return bad("inconsistent residual block shapes".into());
                }
                if b.keep.iter().any(|&k| k >= width) || b.keep.windows(2).any(|w| w[0] >= w[1]) {
                    return bad("invalid scatter-add index list".into());
                }
                width = b.conv1.c_in(s);
            }
            if net.out.c_in(s) != width {
                return bad("output conv width mismatch".into());
            }
            for conv in net.convs() {
                let co = conv.c_out(s);
                if s.get(conv.bias).len() != co
                    || conv.w_scale.is_some_and(|p| s.get(p).len() != co)
                    || conv.gate.is_some_and(|p| s.get(p).len() != co)
                {
                    return bad("per-filter parameter length mismatch".into());
                }
            }
        }
        for (_, p) in s.iter() {
            p.value.check_finite("model parameter")?;
        }
        Ok(())
    }

    /// Mean bits per dimension of a batch under the given path.
    pub fn bpd(&self, x: &Tensor, path: Path) -> Result<f64> {
        let lat = Runner::new(self, path)?.forward(x)?;
        Ok(-lat.log2p() / (x.len() as f64))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn small() -> FlowConfig {
        FlowConfig { channels: 3, height: 8, width: 8, levels: 2, couplings: 2, hidden: 8, blocks: 1, prior_blocks: 1 }
    }

    fn images(seed: u64, b: usize, cfg: &FlowConfig) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[b, cfg.channels, cfg.height, cfg.width], |_| rng.gen_range(0..256) as f32)
    }

    #[test]
    fn latent_dims_sum_to_input_dims() {
        for cfg in [FlowConfig::desk(), FlowConfig::imagenet32(), small()] {
            let d: usize = cfg.latent_shapes().iter().map(|s| s.iter().product::<usize>()).sum();
            assert_eq!(d, cfg.dims());
        }
    }

    #[test]
    fn rejects_indivisible_sizes() {
        let cfg = FlowConfig { height: 10, ..FlowConfig::desk() };
        assert!(FlowModel::new(cfg, 0).is_err());
    }

    #[test]
    fn identity_init_latents_are_a_permutation() {
        let cfg = small();
        let m = FlowModel::new(cfg.clone(), 1).unwrap();
        let x = images(2, 2, &cfg);
        let lat = Runner::new(&m, Path::Float).unwrap().forward(&x).unwrap();
        let mut a: Vec<i64> = lat.parts.iter().flat_map(|p| p.data().iter().map(|&v| v as i64)).collect();
        let mut b: Vec<i64> = x.data().iter().map(|&v| v as i64).collect();
        a.sort();
        b.sort();
        assert_eq!(a, b);
    }

    #[test]
    fn tape_and_runner_agree() {
        let cfg = small();
        let mut m = FlowModel::new(cfg.clone(), 4).unwrap();
        // break rezero so the couplings do something
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for (_, p) in m.store.iter_mut() {
            if p.kind == ParamKind::Weight {
                p.value.data_mut().iter_mut().for_each(|v| *v += rng.gen_range(-0.05..0.05));
            }
        }
        let x = images(6, 3, &cfg);
        m.init_priors(&x).unwrap();
        let mut tape = Tape::new(&m.store);
        let f = m.forward_tape(&mut tape, &x, m.exec()).unwrap();
        let lat = Runner::new(&m, Path::Float).unwrap().forward(&x).unwrap();
        for (v, t) in f.latents.iter().zip(&lat.parts) {
            assert_eq!(tape.value(*v), t);
        }
        let a = tape.value(f.log2p).data()[0] as f64;
        assert!((a - lat.log2p()).abs() <= 1e-4 * a.abs(), "{a} vs {}", lat.log2p());
        let inv = Runner::new(&m, Path::Float).unwrap().inverse(&lat.parts).unwrap();
        assert_eq!(inv, x);
    }
}
