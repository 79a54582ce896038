//! Same-padding stride-1 convolutions: a float kernel with its adjoints and an
//! 8-bit integer kernel with 32-bit accumulation.
//!
//! Both lower the convolution to im2col followed by a matrix product. The
//! float product accumulates every output element as a sequential sum over
//! the reduction axis in a fixed order. Removing terms that are exactly zero
//! therefore never changes a result, which is what makes a physically pruned
//! network bit-identical to its gated counterpart.

use crate::error::{shape_err, Result};
use crate::quant::{round_half_away_f64, Bounds, QuantizedTensor, Scale};
use crate::tensor::Tensor;

fn check_kernel(w: &[usize]) -> Result<(usize, usize, usize)> {
    match *w {
        [co, ci, kh, kw] if kh == kw && kh % 2 == 1 => Ok((co, ci, kh)),
        _ => Err(shape_err(format!("expected square odd kernel [co, ci, k, k], got {w:?}"))),
    }
}

/// `col[(ci*k + ky)*k + kx][b*hw + y*w + x]`, zero outside the image.
fn im2col<T: Copy + Default>(
    x: &[T],
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
) -> Vec<T> {
    let hw = h * w;
    let n = b * hw;
    let pad = (k / 2) as isize;
    let mut col = vec![T::default(); c * k * k * n];
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut col[row * n..(row + 1) * n];
                let (dy, dx) = (ky as isize - pad, kx as isize - pad);
                for bi in 0..b {
                    let src = &x[(bi * c + ci) * hw..(bi * c + ci + 1) * hw];
                    let out = &mut dst[bi * hw..(bi + 1) * hw];
                    for y in 0..h {
                        let sy = y as isize + dy;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let srow = &src[sy as usize * w..(sy as usize + 1) * w];
                        let orow = &mut out[y * w..(y + 1) * w];
                        let x0 = (-dx).max(0) as usize;
                        let x1 = (w as isize - dx).min(w as isize) as usize;
                        for xx in x0..x1 {
                            orow[xx] = srow[(xx as isize + dx) as usize];
                        }
                    }
                }
            }
        }
    }
    col
}

fn col2im(col: &[f32], b: usize, c: usize, h: usize, w: usize, k: usize) -> Vec<f32> {
    let hw = h * w;
    let n = b * hw;
    let pad = (k / 2) as isize;
    let mut x = vec![0.0f32; b * c * hw];
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &col[row * n..(row + 1) * n];
                let (dy, dx) = (ky as isize - pad, kx as isize - pad);
                for bi in 0..b {
                    let dst = &mut x[(bi * c + ci) * hw..(bi * c + ci + 1) * hw];
                    let s = &src[bi * hw..(bi + 1) * hw];
                    for y in 0..h {
                        let sy = y as isize + dy;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let x0 = (-dx).max(0) as usize;
                        let x1 = (w as isize - dx).min(w as isize) as usize;
                        for xx in x0..x1 {
                            dst[sy as usize * w + (xx as isize + dx) as usize] += s[y * w + xx];
                        }
                    }
                }
            }
        }
    }
    x
}

/// `out[m][n] = init[m] + sum_k a[m][k] * bmat[k][n]`, summed in increasing k.
fn gemm_rows(a: &[f32], bmat: &[f32], init: &[f32], m: usize, kdim: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; m * n];
    let mut r = 0;
    while r < m {
        let rows = (m - r).min(4);
        let (head, _) = out.split_at_mut((r + rows) * n);
        let block = &mut head[r * n..];
        for (i, row) in block.chunks_mut(n).enumerate() {
            row.fill(init[r + i]);
        }
        if rows == 4 {
            let (o0, rest) = block.split_at_mut(n);
            let (o1, rest) = rest.split_at_mut(n);
            let (o2, o3) = rest.split_at_mut(n);
            for kk in 0..kdim {
                let brow = &bmat[kk * n..(kk + 1) * n];
                let w0 = a[r * kdim + kk];
                let w1 = a[(r + 1) * kdim + kk];
                let w2 = a[(r + 2) * kdim + kk];
                let w3 = a[(r + 3) * kdim + kk];
                for j in 0..n {
                    let v = brow[j];
                    o0[j] += w0 * v;
                    o1[j] += w1 * v;
                    o2[j] += w2 * v;
                    o3[j] += w3 * v;
                }
            }
        } else {
            for (i, row) in block.chunks_mut(n).enumerate() {
                for kk in 0..kdim {
                    let wv = a[(r + i) * kdim + kk];
                    let brow = &bmat[kk * n..(kk + 1) * n];
                    for (o, &v) in row.iter_mut().zip(brow) {
                        *o += wv * v;
                    }
                }
            }
        }
        r += rows;
    }
    out
}

/// `[m][b*hw]` -> `[b][m][hw]`
fn unfold_batch(t: &[f32], m: usize, b: usize, hw: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; t.len()];
    for mi in 0..m {
        for bi in 0..b {
            out[(bi * m + mi) * hw..(bi * m + mi + 1) * hw]
                .copy_from_slice(&t[mi * b * hw + bi * hw..mi * b * hw + (bi + 1) * hw]);
        }
    }
    out
}

/// `[b][m][hw]` -> `[m][b*hw]`
fn fold_batch(t: &[f32], m: usize, b: usize, hw: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; t.len()];
    for bi in 0..b {
        for mi in 0..m {
            out[mi * b * hw + bi * hw..mi * b * hw + (bi + 1) * hw]
                .copy_from_slice(&t[(bi * m + mi) * hw..(bi * m + mi + 1) * hw]);
        }
    }
    out
}

/// `y[b, co] = sum_ci w[co, ci] (*) x[b, ci] + bias[co]`
pub fn conv2d(x: &Tensor, w: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (b, c, h, wd) = x.dims4()?;
    let (co, ci, k) = check_kernel(w.shape())?;
    if ci != c {
        return Err(shape_err(format!("conv expects {ci} input channels, got {c}")));
    }
    if bias.len() != co {
        return Err(shape_err(format!("bias has {} entries for {co} filters", bias.len())));
    }
    let hw = h * wd;
    let col = im2col(x.data(), b, c, h, wd, k);
    let out = gemm_rows(w.data(), &col, bias.data(), co, c * k * k, b * hw);
    Tensor::new(&[b, co, h, wd], unfold_batch(&out, co, b, hw))
}

pub struct ConvGrads {
    pub x: Tensor,
    pub w: Tensor,
    pub bias: Tensor,
}

pub fn conv2d_backward(x: &Tensor, w: &Tensor, grad_out: &Tensor) -> Result<ConvGrads> {
    let (b, c, h, wd) = x.dims4()?;
    let (co, _, k) = check_kernel(w.shape())?;
    let hw = h * wd;
    let n = b * hw;
    let kdim = c * k * k;
    let col = im2col(x.data(), b, c, h, wd, k);
    let g = fold_batch(grad_out.data(), co, b, hw);

    let gb: Vec<f32> = g.chunks(n).map(|r| r.iter().map(|&v| v as f64).sum::<f64>() as f32).collect();

    let mut gw = vec![0.0f32; co * kdim];
    for o in 0..co {
        let grow = &g[o * n..(o + 1) * n];
        for kk in 0..kdim {
            let crow = &col[kk * n..(kk + 1) * n];
            let mut acc = [0.0f32; 8];
            let chunks = n / 8;
            for j in 0..chunks {
                for l in 0..8 {
                    acc[l] += grow[j * 8 + l] * crow[j * 8 + l];
                }
            }
            let mut s: f32 = acc.iter().sum();
            for j in chunks * 8..n {
                s += grow[j] * crow[j];
            }
            gw[o * kdim + kk] = s;
        }
    }

    let mut dcol = vec![0.0f32; kdim * n];
    for o in 0..co {
        let grow = &g[o * n..(o + 1) * n];
        for kk in 0..kdim {
            let wv = w.data()[o * kdim + kk];
            if wv == 0.0 {
                continue;
            }
            for (d, &gv) in dcol[kk * n..(kk + 1) * n].iter_mut().zip(grow) {
                *d += wv * gv;
            }
        }
    }
    let gx = col2im(&dcol, b, c, h, wd, k);
    Ok(ConvGrads {
        x: Tensor::new(x.shape(), gx)?,
        w: Tensor::new(w.shape(), gw)?,
        bias: Tensor::new(&[co], gb)?,
    })
}

/// A convolution prepared for integer execution: `i8`-range weights with one
/// scale per filter and a float bias folded into the accumulator at run time.
#[derive(Clone, Debug, PartialEq)]
pub struct IntConv {
    pub weights: Vec<i32>,
    pub w_scales: Vec<f32>,
    pub bias: Vec<f32>,
    pub c_out: usize,
    pub c_in: usize,
    pub k: usize,
}

impl IntConv {
    pub fn from_quantized(w: &QuantizedTensor, bias: &[f32]) -> Result<Self> {
        let (co, ci, k) = check_kernel(&w.shape)?;
        let w_scales = match &w.scale {
            Scale::PerChannel(s) => s.clone(),
            Scale::PerTensor(s) => vec![*s; co],
        };
        if bias.len() != co || !w.signed {
            return Err(shape_err("integer conv needs signed weights and one bias per filter"));
        }
        let conv = Self { weights: w.values.clone(), w_scales, bias: bias.to_vec(), c_out: co, c_in: ci, k };
        conv.check_accumulator_bound()?;
        Ok(conv)
    }

    /// Worst-case |accumulator| for unsigned 8-bit activations.
    pub fn max_accumulator(&self) -> i64 {
        128 * 255 * (self.k * self.k * self.c_in) as i64
    }

    fn check_accumulator_bound(&self) -> Result<()> {
        if self.max_accumulator() >= (1i64 << 31) - (1 << 24) {
            return Err(shape_err(format!(
                "{} input channels can overflow a 32-bit accumulator",
                self.c_in
            )));
        }
        Ok(())
    }

    /// Bias expressed in accumulator units, `round(b / (s_w * s_x))`.
    pub fn folded_bias(&self, s_x: f32) -> Vec<i32> {
        self.bias
            .iter()
            .zip(&self.w_scales)
            .map(|(&b, &sw)| {
                let v = round_half_away_f64(b as f64 / (sw as f64 * s_x as f64));
                v.clamp(-(1i64 << 24) as f64, (1i64 << 24) as f64) as i32
            })
            .collect()
    }

    /// Integer accumulators `sum W^ (*) x^ + b^` for a batch, `[b][c_out][hw]`.
    pub fn accumulate(&self, x: &QuantizedTensor) -> Result<Vec<i32>> {
        let (b, c, h, w) = match x.shape[..] {
            [b, c, h, w] => (b, c, h, w),
            _ => return Err(shape_err(format!("expected rank 4 input, got {:?}", x.shape))),
        };
        if c != self.c_in {
            return Err(shape_err(format!("integer conv expects {} channels, got {c}", self.c_in)));
        }
        let s_x = match x.scale {
            Scale::PerTensor(s) => s,
            Scale::PerChannel(_) => return Err(shape_err("activations must use a per-tensor scale")),
        };
        let bias = self.folded_bias(s_x);
        let hw = h * w;
        let kdim = c * self.k * self.k;
        let mut out = vec![0i32; b * self.c_out * hw];
        let xs: Vec<i32> = x.values.clone();
        for bi in 0..b {
            let col = im2col(&xs[bi * c * hw..(bi + 1) * c * hw], 1, c, h, w, self.k);
            for o in 0..self.c_out {
                let acc = &mut out[(bi * self.c_out + o) * hw..(bi * self.c_out + o + 1) * hw];
                acc.fill(bias[o]);
                let wrow = &self.weights[o * kdim..(o + 1) * kdim];
                for (kk, &wv) in wrow.iter().enumerate() {
                    if wv == 0 {
                        continue;
                    }
                    for (a, &v) in acc.iter_mut().zip(&col[kk * hw..(kk + 1) * hw]) {
                        *a += wv * v;
                    }
                }
            }
        }
        Ok(out)
    }

    /// Per-filter multiplier `s_w * s_x / s_y` in double precision.
    pub fn multipliers(&self, s_x: f32, s_y: f32) -> Vec<f64> {
        self.w_scales
            .iter()
            .map(|&sw| sw as f64 * s_x as f64 / s_y as f64)
            .collect()
    }
}

/// Requantize accumulators `[b][c][hw]` with per-channel multipliers.
pub fn requantize(acc: &[i32], mult: &[f64], hw: usize, bounds: Bounds) -> Vec<i32> {
    let c = mult.len();
    acc.iter()
        .enumerate()
        .map(|(i, &a)| {
            let m = mult[(i / hw) % c];
            let v = round_half_away_f64(m * a as f64);
            v.clamp(bounds.lo as f64, bounds.hi as f64) as i32
        })
        .collect()
}

/// Integer-only convolution: 32-bit accumulation, bias folded in accumulator
/// units, double-precision rescale to `out_scale`, round and clip.
pub fn int_conv2d(
    x: &QuantizedTensor,
    conv: &IntConv,
    out_scale: f32,
    out_signed: bool,
) -> Result<QuantizedTensor> {
    let acc = conv.accumulate(x)?;
    let s_x = match x.scale {
        Scale::PerTensor(s) => s,
        Scale::PerChannel(_) => unreachable!("checked in accumulate"),
    };
    let hw = x.shape[2] * x.shape[3];
    let values = requantize(&acc, &conv.multipliers(s_x, out_scale), hw, Bounds::for_sign(out_signed));
    Ok(QuantizedTensor {
        shape: vec![x.shape[0], conv.c_out, x.shape[2], x.shape[3]],
        values,
        scale: Scale::PerTensor(out_scale),
        signed: out_signed,
    })
}

/// `max(0, values)`, scale unchanged, result unsigned.
pub fn relu_int(x: &QuantizedTensor) -> QuantizedTensor {
    QuantizedTensor {
        shape: x.shape.clone(),
        values: x.values.iter().map(|&v| v.max(0)).collect(),
        scale: x.scale.clone(),
        signed: false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::{dequantize, quantize, quantize_per_channel, QuantizerParams};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f32) -> Tensor {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0) * scale)
    }

    /// Direct six-loop convolution in f64, the reference for both kernels.
    fn naive_conv(x: &Tensor, w: &Tensor, b: &[f32]) -> Vec<f64> {
        let (bn, c, h, wd) = x.dims4().unwrap();
        let (co, _, k, _) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
        let p = (k / 2) as isize;
        let mut out = vec![0.0; bn * co * h * wd];
        for bi in 0..bn {
            for o in 0..co {
                for y in 0..h {
                    for xx in 0..wd {
                        let mut s = b[o] as f64;
                        for ci in 0..c {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let sy = y as isize + ky as isize - p;
                                    let sx = xx as isize + kx as isize - p;
                                    if sy < 0 || sx < 0 || sy >= h as isize || sx >= wd as isize {
                                        continue;
                                    }
                                    let xv = x.data()[((bi * c + ci) * h + sy as usize) * wd + sx as usize];
                                    let wv = w.data()[((o * c + ci) * k + ky) * k + kx];
                                    s += xv as f64 * wv as f64;
                                }
                            }
                        }
                        out[((bi * co + o) * h + y) * wd + xx] = s;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn zero_kernel_gives_zero() {
        let x = Tensor::full(&[1, 2, 4, 4], 3.0);
        let y = conv2d(&x, &Tensor::zeros(&[3, 2, 3, 3]), &Tensor::zeros(&[3])).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
        assert_eq!(y.shape(), &[1, 3, 4, 4]);
    }

    #[test]
    fn one_by_one_kernel() {
        let x = Tensor::new(&[1, 1, 1, 1], vec![1.5]).unwrap();
        let w = Tensor::new(&[1, 1, 1, 1], vec![2.0]).unwrap();
        let y = conv2d(&x, &w, &Tensor::scalar(0.25)).unwrap();
        assert_eq!(y.data(), &[3.25]);
    }

    #[test]
    fn dirac_kernel_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_tensor(&mut rng, &[2, 1, 5, 4], 3.0);
        let mut w = Tensor::zeros(&[1, 1, 3, 3]);
        w.data_mut()[4] = 1.0;
        let y = conv2d(&x, &w, &Tensor::zeros(&[1])).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn channel_mismatch_is_an_error() {
        let x = Tensor::zeros(&[1, 2, 4, 4]);
        assert!(conv2d(&x, &Tensor::zeros(&[1, 3, 3, 3]), &Tensor::zeros(&[1])).is_err());
    }

    #[test]
    fn matches_naive_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_tensor(&mut rng, &[3, 5, 6, 7], 2.0);
        let w = rand_tensor(&mut rng, &[6, 5, 3, 3], 1.0);
        let b = rand_tensor(&mut rng, &[6], 1.0);
        let y = conv2d(&x, &w, &b).unwrap();
        let r = naive_conv(&x, &w, b.data());
        for (a, e) in y.data().iter().zip(&r) {
            assert!((*a as f64 - e).abs() < 1e-4, "{a} vs {e}");
        }
    }

    #[test]
    fn batched_and_single_image_results_are_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_tensor(&mut rng, &[4, 3, 4, 4], 2.0);
        let w = rand_tensor(&mut rng, &[5, 3, 3, 3], 1.0);
        let b = rand_tensor(&mut rng, &[5], 1.0);
        let all = conv2d(&x, &w, &b).unwrap();
        let per = 3 * 16;
        for i in 0..4 {
            let xi = Tensor::new(&[1, 3, 4, 4], x.data()[i * per..(i + 1) * per].to_vec()).unwrap();
            let yi = conv2d(&xi, &w, &b).unwrap();
            assert_eq!(yi.data(), &all.data()[i * 80..(i + 1) * 80]);
        }
    }

    #[test]
    fn removing_zero_input_channels_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut x = rand_tensor(&mut rng, &[2, 4, 4, 4], 2.0);
        // channel 1 and 3 are dead
        for bi in 0..2 {
            for c in [1, 3] {
                x.data_mut()[(bi * 4 + c) * 16..(bi * 4 + c + 1) * 16].fill(0.0);
            }
        }
        let w = rand_tensor(&mut rng, &[3, 4, 3, 3], 1.0);
        let b = rand_tensor(&mut rng, &[3], 1.0);
        let full = conv2d(&x, &w, &b).unwrap();
        let keep = [0usize, 2];
        let xs = Tensor::from_fn(&[2, 2, 4, 4], |i| {
            let (bi, c, p) = (i / 32, (i / 16) % 2, i % 16);
            x.data()[(bi * 4 + keep[c]) * 16 + p]
        });
        let ws = Tensor::from_fn(&[3, 2, 3, 3], |i| {
            let (o, c, r) = (i / 18, (i / 9) % 2, i % 9);
            w.data()[(o * 4 + keep[c]) * 9 + r]
        });
        assert_eq!(conv2d(&xs, &ws, &b).unwrap(), full);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_tensor(&mut rng, &[1, 2, 4, 4], 1.0);
        let w = rand_tensor(&mut rng, &[2, 2, 3, 3], 1.0);
        let b = rand_tensor(&mut rng, &[2], 1.0);
        let up = rand_tensor(&mut rng, &[1, 2, 4, 4], 1.0);
        let loss = |x: &Tensor, w: &Tensor, b: &Tensor| -> f64 {
            naive_conv(x, w, b.data()).iter().zip(up.data()).map(|(a, &u)| a * u as f64).sum()
        };
        let g = conv2d_backward(&x, &w, &up).unwrap();
        let h = 1e-3f32;
        let check = |analytic: &Tensor, which: usize| {
            let mut num = Vec::new();
            for i in 0..analytic.len() {
                let (mut xp, mut wp, mut bp) = (x.clone(), w.clone(), b.clone());
                let (mut xm, mut wm, mut bm) = (x.clone(), w.clone(), b.clone());
                match which {
                    0 => {
                        xp.data_mut()[i] += h;
                        xm.data_mut()[i] -= h;
                    }
                    1 => {
                        wp.data_mut()[i] += h;
                        wm.data_mut()[i] -= h;
                    }
                    _ => {
                        bp.data_mut()[i] += h;
                        bm.data_mut()[i] -= h;
                    }
                }
                num.push((loss(&xp, &wp, &bp) - loss(&xm, &wm, &bm)) / (2.0 * h as f64));
            }
            let err: f64 = analytic.data().iter().zip(&num).map(|(a, n)| (*a as f64 - n).powi(2)).sum();
            let norm: f64 = num.iter().map(|n| n * n).sum();
            assert!((err / norm).sqrt() < 1e-3, "relative error {}", (err / norm).sqrt());
        };
        check(&g.x, 0);
        check(&g.w, 1);
        check(&g.bias, 2);
    }

    #[test]
    fn int_conv_hand_example() {
        let xq = quantize(&Tensor::new(&[1, 1, 1, 1], vec![1.5]).unwrap(), QuantizerParams::unsigned(0.5)).unwrap();
        assert_eq!(xq.values, vec![3]);
        let wq = quantize_per_channel(&Tensor::new(&[1, 1, 1, 1], vec![2.0]).unwrap(), &[1.0], true).unwrap();
        let conv = IntConv::from_quantized(&wq, &[0.25]).unwrap();
        assert_eq!(conv.accumulate(&xq).unwrap(), vec![7]);
        let y = int_conv2d(&xq, &conv, 0.25, false).unwrap();
        assert_eq!(y.values, vec![14]);
        assert_eq!(dequantize(&y).data(), &[3.5]);
    }

    #[test]
    fn int_conv_zero_input_zero_bias() {
        let xq = quantize(&Tensor::zeros(&[1, 2, 3, 3]), QuantizerParams::unsigned(0.1)).unwrap();
        let wq = quantize_per_channel(&Tensor::full(&[2, 2, 3, 3], 0.3), &[0.01, 0.02], true).unwrap();
        let conv = IntConv::from_quantized(&wq, &[0.0, 0.0]).unwrap();
        let y = int_conv2d(&xq, &conv, 0.05, false).unwrap();
        assert!(y.values.iter().all(|&v| v == 0));
    }

    #[test]
    fn int_conv_tracks_float_conv_within_step_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..20 {
            let x = Tensor::from_fn(&[1, 3, 4, 4], |_| rng.gen_range(0.0..2.0));
            let w = rand_tensor(&mut rng, &[4, 3, 3, 3], 0.5);
            let b = rand_tensor(&mut rng, &[4], 0.3);
            let s_x = 2.0 / 255.0;
            let xq = quantize(&x, QuantizerParams::unsigned(s_x)).unwrap();
            let w_scales: Vec<f32> = (0..4).map(|_| rng.gen_range(0.002..0.006)).collect();
            let wq = quantize_per_channel(&w, &w_scales, true).unwrap();
            let conv = IntConv::from_quantized(&wq, b.data()).unwrap();
            let s_y = 0.02;
            let y = int_conv2d(&xq, &conv, s_y, true).unwrap();
            let reference = conv2d(&dequantize(&xq), &dequantize(&wq), &b).unwrap();
            let deq = dequantize(&y);
            for (i, (a, r)) in deq.data().iter().zip(reference.data()).enumerate() {
                let o = i / 16;
                if r.abs() >= 127.0 * s_y {
                    continue;
                }
                let bound = 0.5 * s_y + 0.5 * w_scales[o] * s_x + 1e-6;
                assert!((a - r).abs() <= bound, "{a} vs {r} (bound {bound})");
            }
        }
    }

    #[test]
    fn relu_int_examples() {
        let q = QuantizedTensor { shape: vec![2], values: vec![-5, 3], scale: Scale::PerTensor(0.7), signed: true };
        let r = relu_int(&q);
        assert_eq!(r.values, vec![0, 3]);
        assert_eq!(r.scale, Scale::PerTensor(0.7));
        assert!(!r.signed);
        let pos = QuantizedTensor { values: vec![1, 2], ..q.clone() };
        assert_eq!(relu_int(&pos).values, pos.values);
        let neg = QuantizedTensor { values: vec![-1, -2], ..q };
        assert_eq!(relu_int(&neg).values, vec![0, 0]);
    }

    #[test]
    fn accumulator_bound_rejects_huge_fan_in() {
        let wq = QuantizedTensor {
            shape: vec![1, 8000, 3, 3],
            values: vec![0; 72000],
            scale: Scale::PerChannel(vec![1.0]),
            signed: true,
        };
        assert!(IntConv::from_quantized(&wq, &[0.0]).is_err());
    }
}
