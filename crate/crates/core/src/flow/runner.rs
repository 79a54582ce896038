//! Gradient-free execution of a [`FlowModel`] in float, fake-quant or
//! integer-only arithmetic.

use super::net::{Exec, IntNet, OUTPUT_SCALE};
use super::{halves, squeeze, FlowModel, INPUT_SCALE};
use crate::error::{shape_err, Error, Result};
use crate::logistic;
use crate::quant::round_half_away;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Path {
    /// Float networks, quantizers ignored.
    Float,
    /// Fake quantization as enabled on the model.
    FakeQuant,
    /// Integer-only coupling networks; requires a fully quantized model.
    Integer,
}

impl Path {
    pub fn tag(self) -> u8 {
        match self {
            Path::Float => 0,
            Path::FakeQuant => 1,
            Path::Integer => 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prior {
    pub mu: Tensor,
    pub log_s: Tensor,
}

impl Prior {
    pub fn log2p(&self, z: &Tensor) -> f64 {
        logistic::logistic_logpmf(z.data(), self.mu.data(), self.log_s.data()).iter().map(|&v| v as f64).sum()
    }
}

/// Latents in production order with the prior each one is coded under.
#[derive(Clone, Debug)]
pub struct Latents {
    pub parts: Vec<Tensor>,
    pub priors: Vec<Prior>,
}

impl Latents {
    pub fn log2p(&self) -> f64 {
        self.parts.iter().zip(&self.priors).map(|(z, p)| p.log2p(z)).sum()
    }
}

pub struct Runner<'m> {
    model: &'m FlowModel,
    ex: Exec,
    int: Option<Vec<Vec<IntNet>>>,
}

fn scale_input(x: &Tensor) -> Tensor {
    Tensor::from_fn(x.shape(), |i| INPUT_SCALE * x.data()[i] + -1.0)
}

impl<'m> Runner<'m> {
    pub fn new(model: &'m FlowModel, path: Path) -> Result<Self> {
        let gates = model.state.gates_active;
        let (ex, int) = match path {
            Path::Float => (Exec { gates, acts: false, weights: false }, None),
            Path::FakeQuant => (model.exec(), None),
            Path::Integer => {
                if !(model.state.quant_acts && model.state.quant_weights) {
                    return Err(Error::InvalidArgument("integer path needs a fully quantized model".into()));
                }
                let nets = model
                    .levels
                    .iter()
                    .map(|l| l.couplings.iter().map(|n| IntNet::prepare(n, &model.store, gates)).collect::<Result<Vec<_>>>())
                    .collect::<Result<Vec<_>>>()?;
                (model.exec(), Some(nets))
            }
        };
        Ok(Self { model, ex, int })
    }

    pub fn model(&self) -> &FlowModel {
        self.model
    }

    /// Rounded translation `round(t(x_a))` of coupling `j` at level `l`.
    pub fn translation(&self, l: usize, j: usize, xa: &Tensor) -> Result<Tensor> {
        let inp = scale_input(xa);
        match &self.int {
            Some(nets) => {
                let t = nets[l][j].translation(&inp)?;
                let (b, _, h, w) = xa.dims4()?;
                Tensor::new(&[b, t.len() / (b * h * w), h, w], t.into_iter().map(|v| v as f32).collect())
            }
            None => {
                let net = &self.model.levels[l].couplings[j];
                let raw = net.eval(&self.model.store, &inp, self.ex)?;
                Ok(Tensor::from_fn(raw.shape(), |i| round_half_away(OUTPUT_SCALE * raw.data()[i] + 0.0)))
            }
        }
    }

    fn coupling(&self, l: usize, j: usize, x: &Tensor, sign: f32) -> Result<Tensor> {
        let c = x.shape()[1];
        let (a_off, b_off, m) = halves(c, j);
        let xa = x.slice_channels(a_off, m)?;
        let mut xb = x.slice_channels(b_off, c - m)?;
        let t = self.translation(l, j, &xa)?;
        if t.shape() != xb.shape() {
            return Err(shape_err(format!("translation {:?} for half {:?}", t.shape(), xb.shape())));
        }
        for (v, &d) in xb.data_mut().iter_mut().zip(t.data()) {
            *v += sign * d;
        }
        if j % 2 == 0 {
            Tensor::concat_channels(&[&xa, &xb])
        } else {
            Tensor::concat_channels(&[&xb, &xa])
        }
    }

    pub fn coupling_forward(&self, l: usize, j: usize, x: &Tensor) -> Result<Tensor> {
        self.coupling(l, j, x, 1.0)
    }

    pub fn coupling_inverse(&self, l: usize, j: usize, z: &Tensor) -> Result<Tensor> {
        self.coupling(l, j, z, -1.0)
    }

    /// Prior of the half factored out at level `l`, given the retained half.
    pub fn factor_prior(&self, l: usize, retained: &Tensor) -> Result<Prior> {
        let net = self.model.levels[l].prior.as_ref().ok_or_else(|| Error::InvalidArgument(format!("level {l} has no factor-out")))?;
        let raw = net.eval(&self.model.store, &scale_input(retained), Exec::default())?;
        let n = raw.shape()[1] / 2;
        let mu = raw.slice_channels(0, n)?;
        let mu = Tensor::from_fn(mu.shape(), |i| OUTPUT_SCALE * mu.data()[i] + 0.0);
        Ok(Prior { mu, log_s: raw.slice_channels(n, n)? })
    }

    pub fn final_prior(&self, batch: usize) -> Prior {
        let (c, h, w) = self.model.config.level_shape(self.model.levels.len() - 1);
        let hw = h * w;
        let mu = self.model.store.get(self.model.final_mu).data();
        let ls = self.model.store.get(self.model.final_log_s).data();
        Prior {
            mu: Tensor::from_fn(&[batch, c, h, w], |i| mu[(i / hw) % c]),
            log_s: Tensor::from_fn(&[batch, c, h, w], |i| ls[(i / hw) % c]),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Latents> {
        let cfg = &self.model.config;
        let (b, c, h, w) = x.dims4()?;
        if (c, h, w) != (cfg.channels, cfg.height, cfg.width) {
            return Err(shape_err(format!("model expects {}x{}x{} images, got {c}x{h}x{w}", cfg.channels, cfg.height, cfg.width)));
        }
        let mut parts = Vec::new();
        let mut priors = Vec::new();
        let (d, s) = squeeze::squeeze(x.data(), x.shape())?;
        let mut hcur = Tensor::new(&s, d)?;
        for l in 0..self.model.levels.len() {
            if l > 0 {
                let (d, s) = squeeze::squeeze(hcur.data(), hcur.shape())?;
                hcur = Tensor::new(&s, d)?;
            }
            for j in 0..self.model.levels[l].couplings.len() {
                hcur = self.coupling_forward(l, j, &hcur)?;
            }
            if self.model.levels[l].prior.is_some() {
                let c = hcur.shape()[1];
                let retained = hcur.slice_channels(0, c / 2)?;
                let factored = hcur.slice_channels(c / 2, c - c / 2)?;
                priors.push(self.factor_prior(l, &retained)?);
                parts.push(factored);
                hcur = retained;
            } else {
                priors.push(self.final_prior(b));
                parts.push(hcur.clone());
            }
        }
        Ok(Latents { parts, priors })
    }

    /// Undo level `l`'s couplings and squeeze.
    pub fn level_inverse(&self, l: usize, z: &Tensor) -> Result<Tensor> {
        let mut hcur = z.clone();
        for j in (0..self.model.levels[l].couplings.len()).rev() {
            hcur = self.coupling_inverse(l, j, &hcur)?;
        }
        let (d, s) = squeeze::unsqueeze(hcur.data(), hcur.shape())?;
        Tensor::new(&s, d)
    }

    /// Reconstruct images from latents in production order.
    pub fn inverse(&self, parts: &[Tensor]) -> Result<Tensor> {
        let n = self.model.levels.len();
        if parts.len() != n {
            return Err(shape_err(format!("expected {n} latents, got {}", parts.len())));
        }
        let mut hcur = self.level_inverse(n - 1, &parts[n - 1])?;
        for l in (0..n - 1).rev() {
            let z = Tensor::concat_channels(&[&hcur, &parts[l]])?;
            hcur = self.level_inverse(l, &z)?;
        }
        Ok(hcur)
    }
}
