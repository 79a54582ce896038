//! Image datasets: the synthetic generator and the two on-disk formats.
//!
//! * PPM `P6` with maxval 255 (three channels, interleaved).
//! * `U8T1`: `"U8T1" | c u8 | h u16 LE | w u16 LE | c*h*w bytes`, planar.
//!
//! In memory a dataset is a `[n, c, h, w]` tensor holding byte values.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const U8T1_MAGIC: &[u8; 4] = b"U8T1";

/// One planar byte image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Format {
    Ppm,
    U8t1,
}

impl Format {
    pub fn extension(self) -> &'static str {
        match self {
            Format::Ppm => "ppm",
            Format::U8t1 => "u8t",
        }
    }

    pub fn parse(s: &str) -> Option<Format> {
        match s.to_ascii_lowercase().as_str() {
            "ppm" => Some(Format::Ppm),
            "u8t" | "u8t1" => Some(Format::U8t1),
            _ => None,
        }
    }
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != channels * height * width || channels == 0 || height == 0 || width == 0 {
            return Err(Error::Format(format!("{} bytes for a {channels}x{height}x{width} image", data.len())));
        }
        Ok(Self { channels, height, width, data })
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn encode(&self, format: Format) -> Result<Vec<u8>> {
        match format {
            Format::Ppm => self.to_ppm(),
            Format::U8t1 => self.to_u8t1(),
        }
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.starts_with(U8T1_MAGIC) {
            Self::from_u8t1(bytes)
        } else if bytes.starts_with(b"P6") {
            Self::from_ppm(bytes)
        } else {
            Err(Error::Format("unrecognized image format (expected P6 PPM or U8T1)".into()))
        }
    }

    pub fn to_u8t1(&self) -> Result<Vec<u8>> {
        if self.channels > 255 || self.height > u16::MAX as usize || self.width > u16::MAX as usize {
            return Err(Error::Format("image too large for U8T1".into()));
        }
        let mut out = Vec::with_capacity(9 + self.data.len());
        out.extend_from_slice(U8T1_MAGIC);
        out.push(self.channels as u8);
        out.extend_from_slice(&(self.height as u16).to_le_bytes());
        out.extend_from_slice(&(self.width as u16).to_le_bytes());
        out.extend_from_slice(&self.data);
        Ok(out)
    }

    pub fn from_u8t1(b: &[u8]) -> Result<Self> {
        if b.len() < 9 {
            return Err(Error::Truncated);
        }
        if &b[..4] != U8T1_MAGIC {
            return Err(Error::Format("bad U8T1 magic".into()));
        }
        let c = b[4] as usize;
        let h = u16::from_le_bytes([b[5], b[6]]) as usize;
        let w = u16::from_le_bytes([b[7], b[8]]) as usize;
        let body = &b[9..];
        if body.len() < c * h * w {
            return Err(Error::Truncated);
        }
        if body.len() > c * h * w {
            return Err(Error::Format("trailing bytes after U8T1 payload".into()));
        }
        Self::new(c, h, w, body.to_vec())
    }

    pub fn to_ppm(&self) -> Result<Vec<u8>> {
        if self.channels != 3 {
            return Err(Error::Format(format!("PPM needs 3 channels, image has {}", self.channels)));
        }
        let hw = self.height * self.width;
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        for i in 0..hw {
            for c in 0..3 {
                out.push(self.data[c * hw + i]);
            }
        }
        Ok(out)
    }

    pub fn from_ppm(b: &[u8]) -> Result<Self> {
        let mut pos = 0;
        let mut fields = Vec::with_capacity(4);
        while fields.len() < 4 {
            // whitespace and comments between header fields
            while pos < b.len() && (b[pos].is_ascii_whitespace() || b[pos] == b'#') {
                if b[pos] == b'#' {
                    while pos < b.len() && b[pos] != b'\n' {
                        pos += 1;
                    }
                } else {
                    pos += 1;
                }
            }
            let start = pos;
            while pos < b.len() && !b[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(Error::Truncated);
            }
            fields.push(std::str::from_utf8(&b[start..pos]).map_err(|_| Error::Format("bad PPM header".into()))?.to_string());
        }
        if fields[0] != "P6" {
            return Err(Error::Format("only binary P6 PPM is supported".into()));
        }
        let num = |s: &str| s.parse::<usize>().map_err(|_| Error::Format(format!("bad PPM header field {s:?}")));
        let (w, h, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
        if maxval != 255 {
            return Err(Error::Format(format!("PPM maxval {maxval} unsupported (need 255)")));
        }
        // exactly one whitespace byte separates the header from the raster
        pos += 1;
        let hw = h * w;
        let raster = b.get(pos..).ok_or(Error::Truncated)?;
        if raster.len() < 3 * hw {
            return Err(Error::Truncated);
        }
        let mut data = vec![0u8; 3 * hw];
        for i in 0..hw {
            for c in 0..3 {
                data[c * hw + i] = raster[3 * i + c];
            }
        }
        Self::new(3, h, w, data)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }
}

/// Stack images into a `[n, c, h, w]` tensor; all must share one shape.
pub fn to_tensor(images: &[Image]) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| Error::InvalidArgument("no images".into()))?;
    let (c, h, w) = first.shape();
    let mut data = Vec::with_capacity(images.len() * c * h * w);
    for (i, im) in images.iter().enumerate() {
        if im.shape() != (c, h, w) {
            return Err(Error::Format(format!("image {i} is {:?}, expected {:?}", im.shape(), (c, h, w))));
        }
        data.extend(im.data.iter().map(|&v| v as f32));
    }
    Tensor::new(&[images.len(), c, h, w], data)
}

/// Split a `[n, c, h, w]` tensor of byte values back into images.
pub fn from_tensor(t: &Tensor) -> Result<Vec<Image>> {
    let (n, c, h, w) = t.dims4()?;
    let per = c * h * w;
    (0..n)
        .map(|i| {
            let data = t.data()[i * per..(i + 1) * per]
                .iter()
                .map(|&v| {
                    if (0.0..=255.0).contains(&v) && v.fract() == 0.0 {
                        Ok(v as u8)
                    } else {
                        Err(Error::Corrupt(format!("pixel value {v} is not a byte")))
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            Image::new(c, h, w, data)
        })
        .collect()
}

/// Image files directly inside `dir`, sorted by name.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().and_then(|e| e.to_str()).is_some_and(|e| Format::parse(e).is_some()))
        .collect();
    files.sort();
    Ok(files)
}

/// Read every path; a directory contributes all its image files.
pub fn load(paths: &[PathBuf]) -> Result<Vec<Image>> {
    let mut out = Vec::new();
    for p in paths {
        if p.is_dir() {
            for f in list_images(p)? {
                out.push(Image::read(&f)?);
            }
        } else {
            out.push(Image::read(p)?);
        }
    }
    if out.is_empty() {
        return Err(Error::InvalidArgument("no images found".into()));
    }
    Ok(out)
}

/// Write `images` as `000000.<ext>`, `000001.<ext>`, ... into `dir`.
pub fn save_all(images: &[Image], dir: &Path, format: Format) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    images
        .iter()
        .enumerate()
        .map(|(i, im)| {
            let p = dir.join(format!("{i:06}.{}", format.extension()));
            fs::write(&p, im.encode(format)?)?;
            Ok(p)
        })
        .collect()
}

/// Bilinear upsampling of a `gh x gw` grid to `h x w`.
fn upsample(grid: &[f32], gh: usize, gw: usize, h: usize, w: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        let fy = (y as f32 + 0.5) * gh as f32 / h as f32 - 0.5;
        let y0 = fy.floor().clamp(0.0, (gh - 1) as f32) as usize;
        let y1 = (y0 + 1).min(gh - 1);
        let ty = (fy - y0 as f32).clamp(0.0, 1.0);
        for x in 0..w {
            let fx = (x as f32 + 0.5) * gw as f32 / w as f32 - 0.5;
            let x0 = fx.floor().clamp(0.0, (gw - 1) as f32) as usize;
            let x1 = (x0 + 1).min(gw - 1);
            let tx = (fx - x0 as f32).clamp(0.0, 1.0);
            let top = grid[y0 * gw + x0] * (1.0 - tx) + grid[y0 * gw + x1] * tx;
            let bot = grid[y1 * gw + x0] * (1.0 - tx) + grid[y1 * gw + x1] * tx;
            out.push(top * (1.0 - ty) + bot * ty);
        }
    }
    out
}

fn noise_field(rng: &mut ChaCha8Rng, h: usize, w: usize, amplitudes: &[(usize, f32)]) -> Vec<f32> {
    let mut field = vec![0.0f32; h * w];
    for &(cell, amp) in amplitudes {
        let (gh, gw) = (h.div_ceil(cell).max(1) + 1, w.div_ceil(cell).max(1) + 1);
        let grid: Vec<f32> = (0..gh * gw).map(|_| rng.gen_range(-1.0f32..1.0) * amp).collect();
        for (f, v) in field.iter_mut().zip(upsample(&grid, gh, gw, h, w)) {
            *f += v;
        }
    }
    field
}

/// Reproducible, spatially correlated byte images from ChaCha8 seeded with
/// `seed`.
///
/// Each image is a per-channel base level plus a shared luminance field and
/// a weaker per-channel field, both sums of bilinearly upsampled uniform
/// noise at cell sizes 8, 4 and 2, plus uniform per-pixel noise of +/-4;
/// the result is rounded and clamped to `[0, 255]`.
pub fn gen_synth(seed: u64, count: usize, channels: usize, height: usize, width: usize) -> Vec<Image> {
    const SHARED: [(usize, f32); 3] = [(8, 70.0), (4, 30.0), (2, 12.0)];
    const OWN: [(usize, f32); 2] = [(8, 25.0), (4, 10.0)];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let luma = noise_field(&mut rng, height, width, &SHARED);
            let mut data = Vec::with_capacity(channels * height * width);
            for _ in 0..channels {
                let base = rng.gen_range(60.0f32..196.0);
                let own = noise_field(&mut rng, height, width, &OWN);
                for i in 0..height * width {
                    let v = base + luma[i] + own[i] + rng.gen_range(-4.0f32..4.0);
                    data.push(v.round().clamp(0.0, 255.0) as u8);
                }
            }
            Image { channels, height, width, data }
        })
        .collect()
}
