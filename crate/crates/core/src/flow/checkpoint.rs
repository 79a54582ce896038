//! Checkpoint serialization.
//!
//! ```text
//! "IODFCKPT" | version u32 | config 8 x u32 | state flags u8
//! | levels x (squeezed channels u32 | split u32)
//! | blocks u32 | per block: len u32 | len x u16     (scatter-add indices)
//! | params u32 | per param: rank u8 | rank x u32 | f32 data
//! | checksum u64
//! ```
//!
//! Everything is little-endian. Parameters appear in declaration order. The
//! checksum is the first eight bytes of the SHA-256 of everything before it.

use sha2::{Digest, Sha256};

use super::{FlowConfig, FlowModel, ModelState};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"IODFCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn checksum_bytes(bytes: &[u8]) -> u64 {
    let d = Sha256::digest(bytes);
    u64::from_le_bytes(d[..8].try_into().expect("digest is 32 bytes"))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or(Error::Truncated)?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn usize(&mut self, max: usize, what: &str) -> Result<usize> {
        let v = self.u32()? as usize;
        if v > max {
            return Err(Error::Format(format!("{what} = {v} exceeds {max}")));
        }
        Ok(v)
    }
}

impl FlowModel {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let c = &self.config;
        for v in [c.channels, c.height, c.width, c.levels, c.couplings, c.hidden, c.blocks, c.prior_blocks] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        let s = self.state;
        out.push(s.gates_active as u8 | (s.quant_acts as u8) << 1 | (s.quant_weights as u8) << 2 | (s.pruned as u8) << 3);
        for l in 0..c.levels {
            let (ch, _, _) = c.level_shape(l);
            out.extend_from_slice(&(ch as u32).to_le_bytes());
            out.extend_from_slice(&((ch / 2) as u32).to_le_bytes());
        }
        let blocks: Vec<&Vec<usize>> = self.nets().flat_map(|n| n.blocks.iter().map(|b| &b.keep)).collect();
        out.extend_from_slice(&(blocks.len() as u32).to_le_bytes());
        for keep in blocks {
            out.extend_from_slice(&(keep.len() as u32).to_le_bytes());
            for &k in keep {
                out.extend_from_slice(&(k as u16).to_le_bytes());
            }
        }
        out.extend_from_slice(&(self.store.len() as u32).to_le_bytes());
        for (_, p) in self.store.iter() {
            out.push(p.value.shape().len() as u8);
            for &d in p.value.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in p.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let sum = checksum_bytes(&out);
        out.extend_from_slice(&sum.to_le_bytes());
        out
    }

    /// Checksum identifying these exact parameters.
    pub fn checksum(&self) -> u64 {
        let b = self.to_bytes();
        u64::from_le_bytes(b[b.len() - 8..].try_into().unwrap())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < CHECKPOINT_MAGIC.len() + 12 {
            return Err(Error::Truncated);
        }
        if &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 8);
        let expected = u64::from_le_bytes(tail.try_into().unwrap());
        let found = checksum_bytes(body);
        if expected != found {
            return Err(Error::ChecksumMismatch { expected, found });
        }
        let mut r = Reader { buf: body, pos: 8 };
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let mut f = [0usize; 8];
        for v in f.iter_mut() {
            *v = r.usize(1 << 16, "config field")?;
        }
        let config = FlowConfig {
            channels: f[0],
            height: f[1],
            width: f[2],
            levels: f[3],
            couplings: f[4],
            hidden: f[5],
            blocks: f[6],
            prior_blocks: f[7],
        };
        if config.levels > 8 || config.couplings > 64 || config.blocks > 64 || config.prior_blocks > 64 {
            return Err(Error::Format("implausible architecture in checkpoint".into()));
        }
        let flags = r.u8()?;
        let mut model = FlowModel::new(config.clone(), 0)?;
        model.state = ModelState {
            gates_active: flags & 1 != 0,
            quant_acts: flags & 2 != 0,
            quant_weights: flags & 4 != 0,
            pruned: flags & 8 != 0,
        };
        for l in 0..config.levels {
            let (ch, _, _) = config.level_shape(l);
            if r.u32()? as usize != ch || r.u32()? as usize != ch / 2 {
                return Err(Error::Format("split sizes disagree with the architecture".into()));
            }
        }
        let nblocks = r.usize(1 << 20, "block count")?;
        let mut keeps = Vec::with_capacity(nblocks);
        for _ in 0..nblocks {
            let n = r.usize(config.hidden, "index list length")?;
            keeps.push((0..n).map(|_| r.u16().map(|v| v as usize)).collect::<Result<Vec<_>>>()?);
        }
        let slots: Vec<&mut Vec<usize>> = model.nets_mut().flat_map(|n| n.blocks.iter_mut().map(|b| &mut b.keep)).collect();
        if slots.len() != keeps.len() {
            return Err(Error::Format("block count disagrees with the architecture".into()));
        }
        for (slot, k) in slots.into_iter().zip(keeps) {
            *slot = k;
        }
        let nparams = r.usize(1 << 24, "parameter count")?;
        if nparams != model.store.len() {
            return Err(Error::Format(format!("{nparams} parameters, architecture declares {}", model.store.len())));
        }
        for (_, p) in model.store.iter_mut() {
            let rank = r.u8()? as usize;
            if rank != p.value.shape().len() {
                return Err(Error::Format(format!("parameter {} has rank {rank}", p.name)));
            }
            let mut shape = Vec::with_capacity(rank);
            for (i, &full) in p.value.shape().to_vec().iter().enumerate() {
                let d = r.u32()? as usize;
                // pruning may only shrink the two channel axes
                if d > full || (d != full && i > 1) || d == 0 {
                    return Err(Error::Format(format!("parameter {} has bad shape", p.name)));
                }
                shape.push(d);
            }
            let n: usize = shape.iter().product();
            let raw = r.take(n * 4)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            p.value = Tensor::new(&shape, data)?;
        }
        if r.pos != body.len() {
            return Err(Error::Format("trailing bytes in checkpoint".into()));
        }
        model.validate()?;
        Ok(model)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
