//! Latency and bandwidth report for the float and integer paths.

use std::time::Instant;

use anyhow::Result;
use iodf::codec::Codec;
use iodf::flow::Runner;
use iodf::{FlowModel, Path, Tensor};

pub const HEADER: &str = "path\tbatch\truns\tms_per_sample_min\tms_per_sample_median\tmb_per_s_min\tmb_per_s_median\tflops";

#[derive(Clone, Debug, PartialEq)]
pub struct Row {
    pub path: Path,
    pub batch: usize,
    pub runs: usize,
    pub ms_min: f64,
    pub ms_median: f64,
    pub mbs_min: f64,
    pub mbs_median: f64,
    pub flops: u64,
}

impl std::fmt::Display for Row {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let path = match self.path {
            Path::Float => "float",
            Path::FakeQuant => "fake-quant",
            Path::Integer => "integer",
        };
        write!(
            f,
            "{path}\t{}\t{}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\t{}",
            self.batch, self.runs, self.ms_min, self.ms_median, self.mbs_min, self.mbs_median, self.flops
        )
    }
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn min(v: &[f64]) -> f64 {
    v.iter().copied().fold(f64::INFINITY, f64::min)
}

/// Time `runs` inference passes and `runs` compressions of `x` on one path.
/// Inference latency covers the flow forward pass (latents and priors);
/// bandwidth is raw image bytes over end-to-end compression time.
pub fn measure(model: &FlowModel, path: Path, x: &Tensor, runs: usize, threads: usize) -> Result<Row> {
    let runner = Runner::new(model, path)?;
    let codec = Codec::new(model, path)?.with_threads(threads);
    let b = x.shape()[0];
    let mut ms = Vec::with_capacity(runs);
    let mut mbs = Vec::with_capacity(runs);
    for _ in 0..runs {
        let t = Instant::now();
        std::hint::black_box(runner.forward(x)?);
        ms.push(t.elapsed().as_secs_f64() * 1e3 / b as f64);
        let t = Instant::now();
        std::hint::black_box(codec.compress(x)?);
        mbs.push(x.len() as f64 / t.elapsed().as_secs_f64() / 1e6);
    }
    Ok(Row {
        path,
        batch: b,
        runs,
        ms_min: min(&ms),
        ms_median: median(&mut ms),
        mbs_min: min(&mbs),
        mbs_median: median(&mut mbs),
        flops: model.flops(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_of_odd_and_even() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), 2.5);
        assert_eq!(min(&[4.0, 1.0, 2.0]), 1.0);
    }

    #[test]
    fn row_has_one_column_per_header_field() {
        let r = Row { path: Path::Integer, batch: 4, runs: 20, ms_min: 1.0, ms_median: 2.0, mbs_min: 0.5, mbs_median: 0.6, flops: 7 };
        let line = r.to_string();
        assert_eq!(line.split('\t').count(), HEADER.split('\t').count());
        assert!(line.starts_with("integer\t4\t20\t"));
    }
}
