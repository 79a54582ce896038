//! Fixtures shared by the kernel benchmarks.

use iodf::data::{gen_synth, to_tensor};
use iodf::quant::{quantize, quantize_per_channel, QuantizedTensor, QuantizerParams};
use iodf::train::{calibrate_activations, calibrate_weights};
use iodf::{FlowConfig, FlowModel, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_tensor(seed: u64, shape: &[usize], amp: f32) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.gen_range(-amp..amp))
}

/// `n` synthetic desk-sized images as a byte-valued tensor.
pub fn images(seed: u64, n: usize) -> Tensor {
    let c = FlowConfig::desk();
    to_tensor(&gen_synth(seed, n, c.channels, c.height, c.width)).expect("synthetic images share a shape")
}

/// Unsigned 8-bit activations `[b, c, h, w]`.
pub fn activations(seed: u64, shape: &[usize]) -> QuantizedTensor {
    let x = random_tensor(seed, shape, 1.0);
    let x = Tensor::from_fn(shape, |i| x.data()[i].abs());
    quantize(&x, QuantizerParams::unsigned(1.0 / 255.0)).expect("valid scale")
}

/// Signed 8-bit 3x3 weights `[co, ci, 3, 3]` with per-filter scales.
pub fn weights(seed: u64, co: usize, ci: usize) -> QuantizedTensor {
    let w = random_tensor(seed, &[co, ci, 3, 3], 0.5);
    quantize_per_channel(&w, &vec![0.5 / 127.0; co], true).expect("valid scales")
}

/// A desk model with randomized coupling outputs, calibrated and switched to
/// full 8-bit quantization so that every path can run.
pub fn quantized_model(seed: u64) -> FlowModel {
    let mut m = FlowModel::new(FlowConfig::desk(), seed).expect("desk config is valid");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (_, p) in m.store.iter_mut() {
        if matches!(p.kind, iodf::ParamKind::Weight) {
            for v in p.value.data_mut() {
                if *v == 0.0 {
                    *v = rng.gen_range(-0.01..0.01);
                }
            }
        }
    }
    calibrate_activations(&mut m, &images(seed, 16), 16).expect("calibration");
    calibrate_weights(&mut m).expect("calibration");
    m.state.quant_acts = true;
    m.state.quant_weights = true;
    m
}
