//! Dense row-major `f32` tensors.
//!
//! Image-like tensors are laid out `[batch, channel, height, width]`. The
//! flow and the autodiff tape only ever need rank 1 and rank 4 tensors.

use crate::error::{shape_err, Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f32>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(shape_err(format!(
                "shape {:?} needs {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Self { shape: shape.to_vec(), data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![0.0; n] }
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; n] }
    }

    pub fn scalar(value: f32) -> Self {
        Self { shape: vec![1], data: vec![value] }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f32) -> Self {
        let n: usize = shape.iter().product();
        Self { shape: shape.to_vec(), data: (0..n).map(&mut f).collect() }
    }

    #[inline]
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    #[inline]
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// `(batch, channels, height, width)` of a rank-4 tensor.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [b, c, h, w] => Ok((b, c, h, w)),
            _ => Err(shape_err(format!("expected rank 4, got {:?}", self.shape))),
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(shape_err(format!("cannot reshape {:?} to {:?}", self.shape, shape)));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn check_finite(&self, what: &'static str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite(what))
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum()
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    /// Channels `start..start + len` of a rank-4 tensor.
    pub fn slice_channels(&self, start: usize, len: usize) -> Result<Tensor> {
        let (b, c, h, w) = self.dims4()?;
        if len == 0 || start + len > c {
            return Err(shape_err(format!("channel slice {start}..{} of {c}", start + len)));
        }
        let hw = h * w;
        let mut d = Vec::with_capacity(b * len * hw);
        for bi in 0..b {
            d.extend_from_slice(&self.data[(bi * c + start) * hw..(bi * c + start + len) * hw]);
        }
        Tensor::new(&[b, len, h, w], d)
    }

    /// Concatenate rank-4 tensors along the channel axis.
    pub fn concat_channels(parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts.first().ok_or_else(|| shape_err("concat of nothing"))?;
        let (b, _, h, w) = first.dims4()?;
        let mut total = 0;
        for p in parts {
            let (pb, pc, ph, pw) = p.dims4()?;
            if (pb, ph, pw) != (b, h, w) {
                return Err(shape_err(format!("concat of {:?} and {:?}", first.shape, p.shape)));
            }
            total += pc;
        }
        let hw = h * w;
        let mut d = Vec::with_capacity(b * total * hw);
        for bi in 0..b {
            for p in parts {
                let pc = p.shape[1];
                d.extend_from_slice(&p.data[bi * pc * hw..(bi + 1) * pc * hw]);
            }
        }
        Tensor::new(&[b, total, h, w], d)
    }

    /// Images `start..start + len` of the leading (batch) axis.
    pub fn slice_batch(&self, start: usize, len: usize) -> Result<Tensor> {
        let b = *self.shape.first().ok_or_else(|| shape_err("empty shape"))?;
        if start + len > b {
            return Err(shape_err(format!("batch slice {start}..{} of {b}", start + len)));
        }
        let per = self.data.len() / b.max(1);
        let mut shape = self.shape.clone();
        shape[0] = len;
        Tensor::new(&shape, self.data[start * per..(start + len) * per].to_vec())
    }

    /// Stack same-shaped tensors along the leading (batch) axis.
    pub fn concat_batch(parts: &[&Tensor]) -> Tensor {
        let mut shape = parts[0].shape.clone();
        shape[0] = parts.iter().map(|p| p.shape[0]).sum();
        let data = parts.iter().flat_map(|p| p.data.iter().copied()).collect();
        Tensor { shape, data }
    }
}
