//! Hybrid integer/scale tensors and the learned-step-size quantizer.
//!
//! A quantized tensor is an 8-bit integer grid together with a positive real
//! scale, `r ~= scale * values`. Weights use one scale per output channel,
//! activations a single scale. There is no zero point: quantization is
//! symmetric around zero for signed tensors and anchored at zero for
//! unsigned ones.

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

/// Lower bound applied to data-dependent scale initialisation so that a dead
/// channel never ends up with a zero learnable scale.
pub const MIN_INIT_SCALE: f32 = 1e-6;

/// Round half away from zero. This is the only rounding mode used anywhere in
/// the crate: quantizers, coupling translations and the integer engine.
#[inline]
pub fn round_half_away(x: f32) -> f32 {
    x.round()
}

#[inline]
pub fn round_half_away_f64(x: f64) -> f64 {
    x.round()
}

/// Integer clip range of a quantizer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Bounds {
    pub lo: i32,
    pub hi: i32,
}

impl Bounds {
    pub const SIGNED: Bounds = Bounds { lo: -128, hi: 127 };
    pub const UNSIGNED: Bounds = Bounds { lo: 0, hi: 255 };

    pub fn for_sign(signed: bool) -> Bounds {
        if signed {
            Self::SIGNED
        } else {
            Self::UNSIGNED
        }
    }

    /// Magnitude of the negative bound (`Q_N`).
    pub fn q_n(self) -> i32 {
        -self.lo
    }

    /// Positive bound (`Q_P`).
    pub fn q_p(self) -> i32 {
        self.hi
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QuantizerParams {
    pub scale: f32,
    pub signed: bool,
}

impl QuantizerParams {
    pub fn signed(scale: f32) -> Self {
        Self { scale, signed: true }
    }

    pub fn unsigned(scale: f32) -> Self {
        Self { scale, signed: false }
    }

    pub fn bounds(&self) -> Bounds {
        Bounds::for_sign(self.signed)
    }

    fn validate(&self) -> Result<()> {
        if self.scale > 0.0 && self.scale.is_finite() {
            Ok(())
        } else {
            Err(Error::InvalidScale(self.scale))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Scale {
    PerTensor(f32),
    /// One scale per index of the leading axis.
    PerChannel(Vec<f32>),
}

impl Scale {
    #[inline]
    pub fn at_channel(&self, c: usize) -> f32 {
        match self {
            Scale::PerTensor(s) => *s,
            Scale::PerChannel(v) => v[c],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedTensor {
    pub shape: Vec<usize>,
    pub values: Vec<i32>,
    pub scale: Scale,
    pub signed: bool,
}

impl QuantizedTensor {
    pub fn bounds(&self) -> Bounds {
        Bounds::for_sign(self.signed)
    }

    /// Number of elements governed by one per-channel scale.
    fn channel_stride(&self) -> usize {
        match self.scale {
            Scale::PerTensor(_) => self.values.len().max(1),
            Scale::PerChannel(ref s) => self.values.len() / s.len().max(1),
        }
    }

    pub fn in_range(&self) -> bool {
        let b = self.bounds();
        self.values.iter().all(|&v| v >= b.lo && v <= b.hi)
    }
}

fn quantize_one(r: f32, scale: f32, b: Bounds) -> i32 {
    let v = (r / scale).clamp(b.lo as f32, b.hi as f32);
    round_half_away(v) as i32
}

/// `values = round(clip(r / scale, lo, hi))` with a single scale.
pub fn quantize(r: &Tensor, p: QuantizerParams) -> Result<QuantizedTensor> {
    p.validate()?;
    r.check_finite("quantize input")?;
    let b = p.bounds();
    Ok(QuantizedTensor {
        shape: r.shape().to_vec(),
        values: r.data().iter().map(|&x| quantize_one(x, p.scale, b)).collect(),
        scale: Scale::PerTensor(p.scale),
        signed: p.signed,
    })
}

/// Per-output-channel quantization of a weight tensor; `scales[c]` applies to
/// the `c`-th slice of the leading axis.
pub fn quantize_per_channel(w: &Tensor, scales: &[f32], signed: bool) -> Result<QuantizedTensor> {
    let channels = w.shape().first().copied().unwrap_or(0);
    if scales.len() != channels || channels == 0 {
        return Err(shape_err(format!(
            "{} scales for leading axis of size {}",
            scales.len(),
            channels
        )));
    }
    for &s in scales {
        QuantizerParams { scale: s, signed }.validate()?;
    }
    w.check_finite("quantize input")?;
    let b = Bounds::for_sign(signed);
    let per = w.len() / channels;
    let values = w
        .data()
        .iter()
        .enumerate()
        .map(|(i, &x)| quantize_one(x, scales[i / per], b))
        .collect();
    Ok(QuantizedTensor {
        shape: w.shape().to_vec(),
        values,
        scale: Scale::PerChannel(scales.to_vec()),
        signed,
    })
}

pub fn dequantize(q: &QuantizedTensor) -> Tensor {
    let per = q.channel_stride();
    let data = q
        .values
        .iter()
        .enumerate()
        .map(|(i, &v)| q.scale.at_channel(i / per) * v as f32)
        .collect();
    Tensor::new(&q.shape, data).expect("shape preserved")
}

/// `2 * mean(|r|) / sqrt(2^bits - 1)`, floored at [`MIN_INIT_SCALE`].
pub fn init_scale(r: &[f32], bit_width: u32) -> Result<f32> {
    if r.is_empty() {
        return Err(Error::InvalidArgument("init_scale on an empty tensor".into()));
    }
    if !(1..=16).contains(&bit_width) {
        return Err(Error::InvalidArgument(format!("unsupported bit width {bit_width}")));
    }
    let mean_abs = r.iter().map(|v| v.abs() as f64).sum::<f64>() / r.len() as f64;
    let levels = ((1u64 << bit_width) - 1) as f64;
    let s = (2.0 * mean_abs / levels.sqrt()) as f32;
    if !s.is_finite() {
        return Err(Error::NonFinite("init_scale"));
    }
    Ok(s.max(MIN_INIT_SCALE))
}

/// Gradient re-scaling factor `1 / sqrt(C * Q_P)` for the scale parameter.
pub fn scale_grad_factor(channels: usize, q_p: i32) -> f32 {
    1.0 / ((channels as f64) * (q_p as f64)).sqrt() as f32
}

/// `d r_tilde / d s` for one element, three-branch form.
#[inline]
pub fn dquant_dscale(v: f32, b: Bounds) -> f32 {
    let (lo, hi) = (b.lo as f32, b.hi as f32);
    if v < lo {
        lo
    } else if v > hi {
        hi
    } else {
        round_half_away(v) - v
    }
}

/// Shared LSQ backward for per-tensor and per-channel scales.
///
/// Element `i` uses `scales[i / group]`. Returns the masked straight-through
/// gradient for `r` and the (already re-scaled) gradient of every scale.
pub fn lsq_backward(
    r: &[f32],
    scales: &[f32],
    group: usize,
    b: Bounds,
    upstream: &[f32],
    grad_factor: f32,
) -> (Vec<f32>, Vec<f32>) {
    debug_assert_eq!(r.len(), upstream.len());
    let mut grad_r = vec![0.0f32; r.len()];
    let mut grad_s = vec![0.0f64; scales.len()];
    let (lo, hi) = (b.lo as f32, b.hi as f32);
    for (i, (&x, &u)) in r.iter().zip(upstream).enumerate() {
        let k = i / group;
        let v = x / scales[k];
        if v >= lo && v <= hi {
            grad_r[i] = u;
        }
        grad_s[k] += (u * dquant_dscale(v, b)) as f64;
    }
    let grad_s = grad_s.into_iter().map(|g| g as f32 * grad_factor).collect();
    (grad_r, grad_s)
}

/// Channel count used by the gradient re-scaling: axis 1 of a
/// `[batch, channel, h, w]` activation, otherwise the leading axis.
pub fn channel_count(shape: &[usize]) -> usize {
    if shape.len() == 4 {
        shape[1]
    } else {
        shape.first().copied().unwrap_or(1)
    }
}

/// Backward pass of the per-tensor quantizer.
pub fn quantizer_backward(
    r: &Tensor,
    p: QuantizerParams,
    upstream: &Tensor,
) -> Result<(Tensor, f32)> {
    if r.shape() != upstream.shape() {
        return Err(shape_err(format!("{:?} vs {:?}", r.shape(), upstream.shape())));
    }
    p.validate()?;
    let b = p.bounds();
    let g = scale_grad_factor(channel_count(r.shape()), b.q_p());
    let (gr, gs) = lsq_backward(r.data(), &[p.scale], r.len().max(1), b, upstream.data(), g);
    Ok((Tensor::new(r.shape(), gr)?, gs[0]))
}

/// Quantize-dequantize in real arithmetic (fake quantization).
pub fn fake_quantize(r: &[f32], scales: &[f32], group: usize, b: Bounds) -> Vec<f32> {
    r.iter()
        .enumerate()
        .map(|(i, &x)| {
            let s = scales[i / group];
            s * quantize_one(x, s, b) as f32
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(v: &[f32]) -> Tensor {
        Tensor::new(&[v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn zero_is_fixed_point() {
        let q = quantize(&t(&[0.0]), QuantizerParams::signed(0.37)).unwrap();
        assert_eq!(q.values, vec![0]);
        assert_eq!(dequantize(&q).data(), &[0.0]);
    }

    #[test]
    fn rounds_to_nearest_grid_point() {
        let q = quantize(&t(&[3.2]), QuantizerParams::signed(0.5)).unwrap();
        assert_eq!(q.values, vec![6]);
        assert_eq!(dequantize(&q).data(), &[3.0]);
    }

    #[test]
    fn clips_to_signed_range() {
        let q = quantize(&t(&[1000.0, -1000.0]), QuantizerParams::signed(1.0)).unwrap();
        assert_eq!(q.values, vec![127, -128]);
        assert_eq!(dequantize(&q).data(), &[127.0, -128.0]);
        let q = quantize(&t(&[1000.0, -3.0]), QuantizerParams::unsigned(1.0)).unwrap();
        assert_eq!(q.values, vec![255, 0]);
    }

    #[test]
    fn ties_round_away_from_zero() {
        let q = quantize(&t(&[0.5, -0.5, 1.5, -2.5]), QuantizerParams::signed(1.0)).unwrap();
        assert_eq!(q.values, vec![1, -1, 2, -3]);
    }

    #[test]
    fn rejects_bad_scale_and_non_finite_input() {
        assert!(matches!(
            quantize(&t(&[1.0]), QuantizerParams::signed(0.0)),
            Err(Error::InvalidScale(_))
        ));
        assert!(quantize(&t(&[1.0]), QuantizerParams::signed(-1.0)).is_err());
        assert!(matches!(
            quantize(&t(&[f32::NAN]), QuantizerParams::signed(1.0)),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn dequantize_examples() {
        let q = QuantizedTensor {
            shape: vec![1],
            values: vec![6],
            scale: Scale::PerTensor(0.5),
            signed: true,
        };
        assert_eq!(dequantize(&q).data(), &[3.0]);
        let z = QuantizedTensor { values: vec![0; 4], shape: vec![4], ..q };
        assert!(dequantize(&z).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn per_channel_scales_broadcast_over_channel() {
        let w = Tensor::new(&[2, 2], vec![1.0, -1.0, 1.0, -1.0]).unwrap();
        let q = quantize_per_channel(&w, &[0.5, 0.25], true).unwrap();
        assert_eq!(q.values, vec![2, -2, 4, -4]);
        assert_eq!(dequantize(&q).data(), w.data());
        assert!(quantize_per_channel(&w, &[0.5], true).is_err());
    }

    #[test]
    fn init_scale_examples() {
        let s = init_scale(&[1.0, -1.0, 1.0], 8).unwrap();
        assert!((s - 0.125_245).abs() < 1e-6, "{s}");
        let s = init_scale(&[7.984, -7.984], 8).unwrap();
        assert!((s - 1.0).abs() < 1e-3, "{s}");
        assert_eq!(init_scale(&[0.0; 5], 8).unwrap(), MIN_INIT_SCALE);
        assert!(init_scale(&[], 8).is_err());
    }

    #[test]
    fn scale_gradient_branches() {
        let b = Bounds::SIGNED;
        // in range and integral: no contribution
        assert_eq!(dquant_dscale(3.0, b), 0.0);
        // above Q_P
        assert_eq!(dquant_dscale(130.0, b), 127.0);
        // below -Q_N
        assert_eq!(dquant_dscale(-200.0, b), -128.0);
        // in range, fractional
        assert!((dquant_dscale(2.25, b) - (2.0 - 2.25)).abs() < 1e-7);
    }

    #[test]
    fn rescale_factor() {
        let g = scale_grad_factor(128, 127);
        assert!((g - 0.007_843_1).abs() < 1e-7, "{g}");
    }

    #[test]
    fn quantizer_backward_masks_clipped_elements() {
        let r = t(&[1.0, 200.0, -300.0, 2.5]);
        let up = t(&[0.5, 0.5, 0.5, 0.5]);
        let (gr, gs) = quantizer_backward(&r, QuantizerParams::signed(1.0), &up).unwrap();
        assert_eq!(gr.data(), &[0.5, 0.0, 0.0, 0.5]);
        // rank-1 tensor: C = 4 channels along the leading axis
        let g = scale_grad_factor(4, 127);
        let expected = 0.5 * (0.0 + 127.0 - 128.0 + (3.0 - 2.5)) * g;
        assert!((gs - expected).abs() < 1e-7, "{gs} vs {expected}");
    }

    #[test]
    fn scale_gradient_matches_finite_differences() {
        // Points whose r/s is well away from half-integers and the clip edges.
        let r = t(&[0.31, -0.77, 1.93, 40.2, -50.0]);
        let up = t(&[1.0, -2.0, 0.5, 0.25, 3.0]);
        let s = 0.3f64;
        // Straight-through surrogate: the rounding residual is held at its
        // value at `s`, so only clip(r/s) moves with the scale.
        let frozen: Vec<f64> = r
            .data()
            .iter()
            .map(|&x| {
                let v = (x as f64 / s).clamp(-128.0, 127.0);
                v.round() - v
            })
            .collect();
        let f = |s2: f64| -> f64 {
            r.data()
                .iter()
                .zip(up.data())
                .zip(&frozen)
                .map(|((&x, &u), &d)| {
                    let v = (x as f64 / s2).clamp(-128.0, 127.0);
                    u as f64 * s2 * (v + d)
                })
                .sum()
        };
        let h = 1e-6;
        let fd = (f(s + h) - f(s - h)) / (2.0 * h);
        let (_, gs) = quantizer_backward(&r, QuantizerParams::signed(s as f32), &up).unwrap();
        let g = scale_grad_factor(5, 127) as f64;
        let rel = ((gs as f64 / g) - fd).abs() / fd.abs();
        assert!(rel < 1e-3, "analytic {} fd {fd}", gs as f64 / g);
    }

    proptest! {
        #[test]
        fn quantize_is_idempotent(vals in proptest::collection::vec(-500.0f32..500.0, 1..64),
                                  scale in 0.01f32..4.0, signed in any::<bool>()) {
            let p = QuantizerParams { scale, signed };
            let q1 = quantize(&t(&vals), p).unwrap();
            let q2 = quantize(&dequantize(&q1), p).unwrap();
            prop_assert_eq!(q1.values, q2.values);
        }

        #[test]
        fn values_stay_in_range(vals in proptest::collection::vec(-1e4f32..1e4, 1..64),
                                scale in 0.001f32..10.0, signed in any::<bool>()) {
            let q = quantize(&t(&vals), QuantizerParams { scale, signed }).unwrap();
            prop_assert!(q.in_range());
        }

        #[test]
        fn ste_passes_in_range_and_zeroes_clipped(vals in proptest::collection::vec(-400.0f32..400.0, 1..32),
                                                   ups in proptest::collection::vec(-3.0f32..3.0, 32)) {
            let r = t(&vals);
            let up = t(&ups[..vals.len()]);
            let (gr, _) = quantizer_backward(&r, QuantizerParams::signed(1.0), &up).unwrap();
            for ((&x, &u), &g) in vals.iter().zip(up.data()).zip(gr.data()) {
                if (-128.0..=127.0).contains(&x) {
                    prop_assert_eq!(g, u);
                } else {
                    prop_assert_eq!(g, 0.0);
                }
            }
        }

        #[test]
        fn exact_roundtrip_on_grid(ks in proptest::collection::vec(-128i32..=127, 1..32)) {
            let s = 0.125f32;
            let r = t(&ks.iter().map(|&k| k as f32 * s).collect::<Vec<_>>());
            let q = quantize(&r, QuantizerParams::signed(s)).unwrap();
            prop_assert_eq!(dequantize(&q), r);
        }
    }
}
