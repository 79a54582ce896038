//! Lossless image codec: flow latents entropy-coded with rANS.
//!
//! Container layout (little-endian):
//!
//! ```text
//! "IODF1" | version u8 | model checksum u64 | h u16 | w u16 | c u8 | count u32
//! | count x (len u32 | payload)
//! ```
//!
//! All images share one rANS stream. Images are pushed last to first, so the
//! decoder pops image 0 first. Payload `i` holds the words emitted while
//! image `i` was encoded; payload 0 additionally ends with the final 64-bit
//! state. Within an image the decoder needs the final latent first (it is
//! unconditional), then each factored latent from the deepest level up,
//! because a factored latent's prior depends on the half retained at its
//! level, which is only known once the deeper levels are inverted.
//!
//! The stored checksum covers the checkpoint and the execution path, so a
//! container only decodes under the exact model and path that produced it.

use std::borrow::Cow;

use crate::data::Image;
use crate::error::{Error, Result};
use crate::flow::{checksum_bytes, FlowModel, Path, Prior, Runner};
use crate::rans::{bytes_to_words, mass_table, words_to_bytes, MassTable, RansDecoder, RansEncoder, CODEC_PRECISION, RANS_L};
use crate::tensor::Tensor;

pub const CONTAINER_MAGIC: &[u8; 5] = b"IODF1";
pub const CONTAINER_VERSION: u8 = 1;

/// Latent alphabet.
pub const LATENT_LO: i32 = -2048;
pub const LATENT_HI: i32 = 2047;

/// Logistic scales are clamped to this range when building tables.
const MIN_SCALE: f64 = 1e-2;
const MAX_SCALE: f64 = 1e4;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Container {
    pub checksum: u64,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub payloads: Vec<Vec<u8>>,
}

impl Container {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(25 + self.payloads.iter().map(|p| p.len() + 4).sum::<usize>());
        out.extend_from_slice(CONTAINER_MAGIC);
        out.push(CONTAINER_VERSION);
        out.extend_from_slice(&self.checksum.to_le_bytes());
        out.extend_from_slice(&(self.height as u16).to_le_bytes());
        out.extend_from_slice(&(self.width as u16).to_le_bytes());
        out.push(self.channels as u8);
        out.extend_from_slice(&(self.payloads.len() as u32).to_le_bytes());
        for p in &self.payloads {
            out.extend_from_slice(&(p.len() as u32).to_le_bytes());
            out.extend_from_slice(p);
        }
        out
    }

    pub fn from_bytes(b: &[u8]) -> Result<Self> {
        if b.len() < 5 || &b[..5] != CONTAINER_MAGIC {
            return Err(if b.len() < 5 { Error::Truncated } else { Error::Format("not an IODF1 container".into()) });
        }
        let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
            let s = b.get(*pos..*pos + n).ok_or(Error::Truncated)?;
            *pos += n;
            Ok(s)
        };
        let mut pos = 5;
        let version = take(&mut pos, 1)?[0];
        if version != CONTAINER_VERSION {
            return Err(Error::Format(format!("unsupported container version {version}")));
        }
        let checksum = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap());
        let height = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap()) as usize;
        let width = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap()) as usize;
        let channels = take(&mut pos, 1)?[0] as usize;
        let count = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        // every payload costs at least its length field
        if count > (b.len() - pos) / 4 {
            return Err(Error::Truncated);
        }
        let mut payloads = Vec::with_capacity(count);
        for _ in 0..count {
            let len = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
            payloads.push(take(&mut pos, len)?.to_vec());
        }
        if pos != b.len() {
            return Err(Error::Format("trailing bytes after the last payload".into()));
        }
        Ok(Self { checksum, height, width, channels, payloads })
    }

    /// Total payload size in bits (what coding bpd counts).
    pub fn payload_bits(&self) -> u64 {
        self.payloads.iter().map(|p| p.len() as u64 * 8).sum()
    }
}

/// Bits per dimension of one compression run.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CodingReport {
    /// `-log2 p(x)` under the model, averaged over dimensions.
    pub analytic_bpd: f64,
    /// Payload bits averaged over dimensions.
    pub coding_bpd: f64,
}

impl CodingReport {
    pub fn gap(&self) -> f64 {
        self.coding_bpd - self.analytic_bpd
    }
}

/// Checksum identifying a model together with the path it runs under.
pub fn model_checksum(model: &FlowModel, path: Path) -> u64 {
    let mut b = model.checksum().to_le_bytes().to_vec();
    b.extend_from_slice(b"path");
    b.push(path.tag());
    checksum_bytes(&b)
}

fn scale_of(log_s: f32) -> f64 {
    (log_s as f64).exp().clamp(MIN_SCALE, MAX_SCALE)
}

fn latent_symbol(v: f32) -> Result<i32> {
    let s = v as i64;
    if !(LATENT_LO as i64..=LATENT_HI as i64).contains(&s) {
        return Err(Error::AlphabetOverflow { value: s, lo: LATENT_LO, hi: LATENT_HI });
    }
    Ok(s as i32)
}

fn table(mu: f32, log_s: f32) -> Result<MassTable> {
    mass_table(mu as f64, scale_of(log_s), LATENT_LO, LATENT_HI, CODEC_PRECISION)
}

/// Where the mass table of each latent dimension comes from.
enum Tables<'a> {
    /// One table per dimension, built on demand.
    PerDim(&'a Prior),
    /// One prebuilt table per channel.
    PerChannel { tables: &'a [MassTable], hw: usize },
}

impl Tables<'_> {
    fn at(&self, i: usize) -> Result<Cow<'_, MassTable>> {
        match self {
            Tables::PerDim(p) => Ok(Cow::Owned(table(p.mu.data()[i], p.log_s.data()[i])?)),
            Tables::PerChannel { tables, hw } => Ok(Cow::Borrowed(&tables[(i / hw) % tables.len()])),
        }
    }
}

/// Push one latent so that it decodes in scan order.
fn push_latent(enc: &mut RansEncoder, z: &Tensor, tables: &Tables) -> Result<()> {
    for i in (0..z.len()).rev() {
        enc.put(latent_symbol(z.data()[i])?, &*tables.at(i)?)?;
    }
    Ok(())
}

fn pop_latent(dec: &mut RansDecoder, shape: &[usize], tables: &Tables) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let mut v = Vec::with_capacity(n);
    for i in 0..n {
        v.push(dec.get(&*tables.at(i)?)? as f32);
    }
    Tensor::new(shape, v)
}

/// A model bound to an execution path, ready to code images of its shape.
pub struct Codec<'m> {
    runner: Runner<'m>,
    model: &'m FlowModel,
    checksum: u64,
    threads: usize,
    /// Tables of the final latent, which depend only on the channel.
    final_tables: Vec<MassTable>,
}

impl<'m> Codec<'m> {
    pub fn new(model: &'m FlowModel, path: Path) -> Result<Self> {
        let mu = model.store.get(model.final_mu).data();
        let ls = model.store.get(model.final_log_s).data();
        let final_tables = mu.iter().zip(ls).map(|(&m, &l)| table(m, l)).collect::<Result<Vec<_>>>()?;
        Ok(Self { runner: Runner::new(model, path)?, model, checksum: model_checksum(model, path), threads: 1, final_tables })
    }

    /// Run the flow for up to `n` images concurrently (entropy coding itself
    /// is sequential).
    pub fn with_threads(mut self, n: usize) -> Self {
        self.threads = n.max(1);
        self
    }

    pub fn checksum(&self) -> u64 {
        self.checksum
    }

    fn forward_all(&self, x: &Tensor) -> Result<Vec<crate::flow::Latents>> {
        let n = x.dims4()?.0;
        let one = |i: usize| x.slice_batch(i, 1).and_then(|xi| self.runner.forward(&xi));
        if self.threads <= 1 || n <= 1 {
            return (0..n).map(one).collect();
        }
        let per = n.div_ceil(self.threads);
        std::thread::scope(|s| {
            let handles: Vec<_> = (0..n)
                .step_by(per)
                .map(|start| s.spawn(move || (start..(start + per).min(n)).map(one).collect::<Result<Vec<_>>>()))
                .collect();
            let mut out = Vec::with_capacity(n);
            for h in handles {
                out.extend(h.join().expect("flow worker panicked")?);
            }
            Ok(out)
        })
    }

    /// Compress a `[n, c, h, w]` batch of byte images.
    pub fn compress(&self, x: &Tensor) -> Result<(Container, CodingReport)> {
        let cfg = &self.model.config;
        let (n, c, h, w) = x.dims4()?;
        if (c, h, w) != (cfg.channels, cfg.height, cfg.width) {
            return Err(Error::InvalidArgument(format!(
                "model codes {}x{}x{} images, got {c}x{h}x{w}",
                cfg.channels, cfg.height, cfg.width
            )));
        }
        if x.data().iter().any(|&v| !(0.0..=255.0).contains(&v) || v.fract() != 0.0) {
            return Err(Error::InvalidArgument("pixels must be bytes".into()));
        }
        let latents = self.forward_all(x)?;
        let mut enc = RansEncoder::new();
        let mut payloads = vec![Vec::new(); n];
        let mut analytic = 0.0;
        for (i, lat) in latents.iter().enumerate().rev() {
            analytic -= lat.log2p();
            // production order is the reverse of decode order
            let last = lat.parts.len() - 1;
            for (l, (z, p)) in lat.parts.iter().zip(&lat.priors).enumerate() {
                push_latent(&mut enc, z, &self.tables_for(l == last, p, z))?;
            }
            payloads[i] = words_to_bytes(&enc.take_words());
        }
        if let Some(first) = payloads.first_mut() {
            first.extend_from_slice(&enc.state().to_le_bytes());
        }
        let container = Container { checksum: self.checksum, height: h, width: w, channels: c, payloads };
        let dims = (n * cfg.dims()).max(1) as f64;
        let report = CodingReport { analytic_bpd: analytic / dims, coding_bpd: container.payload_bits() as f64 / dims };
        Ok((container, report))
    }

    pub fn decompress(&self, container: &Container) -> Result<Tensor> {
        if container.checksum != self.checksum {
            return Err(Error::ChecksumMismatch { expected: container.checksum, found: self.checksum });
        }
        let cfg = &self.model.config;
        if (container.channels, container.height, container.width) != (cfg.channels, cfg.height, cfg.width) {
            return Err(Error::Format("container image shape disagrees with the model".into()));
        }
        let n = container.payloads.len();
        if n == 0 {
            return Tensor::new(&[0, cfg.channels, cfg.height, cfg.width], Vec::new());
        }
        let first = &container.payloads[0];
        if first.len() < 8 {
            return Err(Error::Truncated);
        }
        let (words0, state) = first.split_at(first.len() - 8);
        let mut dec = RansDecoder::from_state(u64::from_le_bytes(state.try_into().unwrap()))?;
        let mut images = Vec::with_capacity(n * cfg.dims());
        for i in 0..n {
            let seg = if i == 0 { words0 } else { &container.payloads[i][..] };
            dec.set_words(bytes_to_words(seg)?);
            images.extend_from_slice(self.decode_image(&mut dec)?.data());
            if dec.words_left() != 0 {
                return Err(Error::Corrupt(format!("payload {i} has {} unread words", dec.words_left())));
            }
        }
        if dec.state() != RANS_L {
            return Err(Error::Corrupt("stream did not return to its initial state".into()));
        }
        let out = Tensor::new(&[n, cfg.channels, cfg.height, cfg.width], images)?;
        if out.data().iter().any(|&v| !(0.0..=255.0).contains(&v)) {
            return Err(Error::Corrupt("decoded pixels outside the byte range".into()));
        }
        Ok(out)
    }

    fn tables_for<'a>(&'a self, is_final: bool, prior: &'a Prior, z: &Tensor) -> Tables<'a> {
        if is_final {
            let s = z.shape();
            Tables::PerChannel { tables: &self.final_tables, hw: s[2] * s[3] }
        } else {
            Tables::PerDim(prior)
        }
    }

    fn decode_image(&self, dec: &mut RansDecoder) -> Result<Tensor> {
        let levels = self.model.levels.len();
        let shapes = self.model.config.latent_shapes();
        let last = shapes[levels - 1];
        let tables = Tables::PerChannel { tables: &self.final_tables, hw: last[1] * last[2] };
        let z = pop_latent(dec, &[1, last[0], last[1], last[2]], &tables)?;
        let mut h = self.runner.level_inverse(levels - 1, &z)?;
        for l in (0..levels - 1).rev() {
            let prior = self.runner.factor_prior(l, &h)?;
            let s = shapes[l];
            let z = pop_latent(dec, &[1, s[0], s[1], s[2]], &Tables::PerDim(&prior))?;
            h = self.runner.level_inverse(l, &Tensor::concat_channels(&[&h, &z])?)?;
        }
        Ok(h)
    }
}

/// Compress images to container bytes.
pub fn compress(images: &[Image], model: &FlowModel, path: Path) -> Result<(Vec<u8>, CodingReport)> {
    let x = crate::data::to_tensor(images)?;
    let (c, r) = Codec::new(model, path)?.compress(&x)?;
    Ok((c.to_bytes(), r))
}

pub fn decompress(bytes: &[u8], model: &FlowModel, path: Path) -> Result<Vec<Image>> {
    let c = Container::from_bytes(bytes)?;
    let x = Codec::new(model, path)?.decompress(&c)?;
    crate::data::from_tensor(&x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_synth;
    use crate::flow::FlowConfig;
    use crate::params::ParamKind;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> FlowConfig {
        FlowConfig { channels: 3, height: 8, width: 8, levels: 2, couplings: 2, hidden: 8, blocks: 1, prior_blocks: 1 }
    }

    /// Random non-trivial weights, small enough to keep latents in range.
    fn model(seed: u64) -> FlowModel {
        let mut m = FlowModel::new(cfg(), seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (_, p) in m.store.iter_mut() {
            if matches!(p.kind, ParamKind::Weight | ParamKind::Bias) {
                for v in p.value.data_mut() {
                    *v = rng.gen_range(-0.2..0.2);
                }
            }
        }
        let x = crate::data::to_tensor(&gen_synth(seed, 8, 3, 8, 8)).unwrap();
        m.init_priors(&x).unwrap();
        m
    }

    #[test]
    fn round_trips_and_reports_sensible_rates() {
        let m = model(1);
        let ims = gen_synth(2, 10, 3, 8, 8);
        let (bytes, r) = compress(&ims, &m, Path::Float).unwrap();
        assert_eq!(decompress(&bytes, &m, Path::Float).unwrap(), ims);
        assert!(r.coding_bpd >= r.analytic_bpd - 1e-3, "{r:?}");
        assert!(r.gap() < 0.2, "{r:?}");
    }

    #[test]
    fn identity_model_round_trips() {
        let m = FlowModel::new(cfg(), 0).unwrap();
        let ims = gen_synth(3, 3, 3, 8, 8);
        let (bytes, _) = compress(&ims, &m, Path::Float).unwrap();
        assert_eq!(decompress(&bytes, &m, Path::Float).unwrap(), ims);
    }

    #[test]
    fn threads_do_not_change_the_bitstream() {
        let m = model(4);
        let x = crate::data::to_tensor(&gen_synth(5, 5, 3, 8, 8)).unwrap();
        let a = Codec::new(&m, Path::Float).unwrap().compress(&x).unwrap().0;
        let b = Codec::new(&m, Path::Float).unwrap().with_threads(3).compress(&x).unwrap().0;
        assert_eq!(a, b);
    }

    #[test]
    fn empty_batch() {
        let m = model(1);
        let codec = Codec::new(&m, Path::Float).unwrap();
        let (c, _) = codec.compress(&Tensor::zeros(&[0, 3, 8, 8])).unwrap();
        assert_eq!(codec.decompress(&c).unwrap().shape(), &[0, 3, 8, 8]);
    }

    #[test]
    fn container_round_trip_and_layout() {
        let c = Container { checksum: 0x0102030405060708, height: 16, width: 8, channels: 3, payloads: vec![vec![9; 12], vec![]] };
        let b = c.to_bytes();
        assert_eq!(&b[..6], b"IODF1\x01");
        assert_eq!(&b[6..14], &0x0102030405060708u64.to_le_bytes());
        assert_eq!(&b[14..19], &[16, 0, 8, 0, 3]);
        assert_eq!(&b[19..23], &2u32.to_le_bytes());
        assert_eq!(&b[23..27], &12u32.to_le_bytes());
        assert_eq!(b.len(), 23 + 4 + 12 + 4);
        assert_eq!(Container::from_bytes(&b).unwrap(), c);
        assert!(Container::from_bytes(&b[..b.len() - 1]).is_err());
        let mut extra = b.clone();
        extra.push(0);
        assert!(Container::from_bytes(&extra).is_err());
        assert!(Container::from_bytes(b"IODF2").is_err());
    }

    #[test]
    fn wrong_model_or_path_is_a_checksum_error() {
        let m = model(1);
        let ims = gen_synth(2, 2, 3, 8, 8);
        let (bytes, _) = compress(&ims, &m, Path::Float).unwrap();
        assert!(matches!(decompress(&bytes, &model(2), Path::Float), Err(Error::ChecksumMismatch { .. })));
        let mut q = m.clone();
        q.state.quant_acts = true;
        q.state.quant_weights = true;
        let (qb, _) = compress(&ims, &q, Path::FakeQuant).unwrap();
        assert!(matches!(decompress(&qb, &q, Path::Float), Err(Error::ChecksumMismatch { .. })));
        assert_eq!(decompress(&qb, &q, Path::FakeQuant).unwrap(), ims);
    }

    #[test]
    fn tampering_never_panics() {
        let m = model(1);
        let ims = gen_synth(7, 3, 3, 8, 8);
        let (bytes, _) = compress(&ims, &m, Path::Float).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..40 {
            let mut bad = bytes.clone();
            let i = rng.gen_range(27..bad.len());
            bad[i] ^= 1 << rng.gen_range(0..8);
            if let Ok(out) = decompress(&bad, &m, Path::Float) {
                assert_ne!(out, ims);
            }
        }
    }

    #[test]
    fn out_of_alphabet_latent_is_an_error() {
        let mut m = FlowModel::new(cfg(), 0).unwrap();
        let out_bias = m.levels[0].couplings[0].out.bias;
        m.store.get_mut(out_bias).data_mut().fill(40.0);
        let ims = gen_synth(1, 1, 3, 8, 8);
        assert!(matches!(compress(&ims, &m, Path::Float), Err(Error::AlphabetOverflow { .. })));
    }

    /// Decoding a factored latent before its conditioner is known (here with
    /// the conditioner guessed as zeros) breaks the round trip.
    #[test]
    fn conditioned_latent_cannot_be_decoded_first() {
        let m = model(3);
        let runner = Runner::new(&m, Path::Float).unwrap();
        let x = crate::data::to_tensor(&gen_synth(9, 1, 3, 8, 8)).unwrap();
        let lat = runner.forward(&x).unwrap();
        let mut enc = RansEncoder::new();
        // decode order: factored latent first, then the final latent
        push_latent(&mut enc, &lat.parts[1], &Tables::PerDim(&lat.priors[1])).unwrap();
        push_latent(&mut enc, &lat.parts[0], &Tables::PerDim(&lat.priors[0])).unwrap();
        let mut dec = RansDecoder::new(&enc.finish()).unwrap();
        let s0 = lat.parts[0].shape().to_vec();
        let guessed = Tensor::zeros(lat.parts[0].shape());
        let prior = runner.factor_prior(0, &guessed).unwrap();
        let z0 = pop_latent(&mut dec, &s0, &Tables::PerDim(&prior));
        assert!(z0.map_or(true, |z| z != lat.parts[0]));
    }
}
