//! `iodf`: train, prune, quantize, compress and benchmark integer discrete
//! flows.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or format error, 3
//! verification failure.

mod bench;
mod config;

use std::fmt;
use std::path::{Path as FsPath, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::warn;

use iodf::codec::{Codec, Container};
use iodf::data::{self, gen_synth, Format, Image};
use iodf::train::{self, Split, StageReport, Trainer};
use iodf::{FlowModel, Path, Tensor};

use config::RunConfig;

/// Mixed into the seed for the synthetic validation split.
const VALID_SALT: u64 = 0x5eed_0f_7a11d;
const SYNTH_TRAIN: usize = 256;
const SYNTH_VALID: usize = 64;

#[derive(Parser)]
#[command(name = "iodf", version, about = "Integer-only discrete flows for lossless image compression")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train stages `--from`..=`--stage` and write the final checkpoint.
    Train(TrainArgs),
    /// Remove gated-off filters from a stage-2 checkpoint.
    Prune(PruneArgs),
    /// Stages 4-5 (activation, then weight quantization) from a stage-3 checkpoint.
    Quantize(QuantizeArgs),
    /// Compress images into one container.
    Compress(CompressArgs),
    /// Restore the images of a container.
    Decompress(DecompressArgs),
    /// Analytic and coding bpd of a dataset, with a round-trip check.
    Eval(EvalArgs),
    /// Inference latency and compression bandwidth per path and batch size.
    Bench(BenchArgs),
    /// Write a reproducible synthetic dataset.
    GenSynth(GenSynthArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PathArg {
    Float,
    FakeQuant,
    Integer,
}

impl From<PathArg> for Path {
    fn from(p: PathArg) -> Path {
        match p {
            PathArg::Float => Path::Float,
            PathArg::FakeQuant => Path::FakeQuant,
            PathArg::Integer => Path::Integer,
        }
    }
}

#[derive(Args)]
struct DataArgs {
    /// Training images (a directory or files). Synthetic data when absent.
    #[arg(long, num_args = 1..)]
    data: Vec<PathBuf>,
    /// Held-out images; defaults to the last fifth of `--data`.
    #[arg(long, num_args = 1..)]
    valid: Vec<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Training batch size.
    #[arg(long)]
    batch: Option<usize>,
    /// Also write `stage<n>.ckpt` after every stage into this directory.
    #[arg(long)]
    checkpoint_dir: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Start from this checkpoint instead of a fresh model.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=5))]
    from: Option<u8>,
    /// Last stage to run.
    #[arg(long, default_value_t = 5, value_parser = clap::value_parser!(u8).range(1..=5))]
    stage: u8,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PruneArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct QuantizeArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    /// 4 stops after activation quantization.
    #[arg(long, default_value_t = 5, value_parser = clap::value_parser!(u8).range(4..=5))]
    stage: u8,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ModelArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Arithmetic used by the coupling networks. Defaults to the most
    /// quantized path the checkpoint supports.
    #[arg(long, value_enum)]
    path: Option<PathArg>,
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

#[derive(Args)]
struct CompressArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    out: PathBuf,
    /// Image files or directories of images, coded in sorted order.
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
}

#[derive(Args)]
struct DecompressArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Output directory; images are written as `000000.<ext>`, ...
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "ppm")]
    format: String,
    container: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = [4, 8, 16, 32])]
    batch: Vec<usize>,
    #[arg(long, default_value_t = 20)]
    runs: usize,
    #[arg(long, default_value_t = 1)]
    threads: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Images to draw batches from; synthetic when absent.
    inputs: Vec<PathBuf>,
}

#[derive(Args)]
struct GenSynthArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1000)]
    count: usize,
    #[arg(long, default_value_t = 16)]
    height: usize,
    #[arg(long, default_value_t = 16)]
    width: usize,
    #[arg(long, default_value_t = 3)]
    channels: usize,
    #[arg(long, default_value = "ppm")]
    format: String,
    #[arg(long)]
    out: PathBuf,
}

/// Bad flags, config or arguments (exit 1).
#[derive(Debug)]
struct Usage(String);

/// A check on the output failed (exit 3).
#[derive(Debug)]
struct Verification(String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl fmt::Display for Verification {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}
impl std::error::Error for Verification {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if cause.is::<Usage>() || cause.is::<config::ConfigError>() {
            return 1;
        }
        if cause.is::<Verification>() {
            return 3;
        }
        match cause.downcast_ref::<iodf::Error>() {
            Some(iodf::Error::ChecksumMismatch { .. }) => return 3,
            Some(iodf::Error::InvalidArgument(_)) => return 1,
            Some(_) => return 2,
            None => {}
        }
    }
    2
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Train(a) => cmd_train(a),
        Cmd::Prune(a) => cmd_prune(a),
        Cmd::Quantize(a) => cmd_quantize(a),
        Cmd::Compress(a) => cmd_compress(a),
        Cmd::Decompress(a) => cmd_decompress(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Bench(a) => cmd_bench(a),
        Cmd::GenSynth(a) => cmd_gen_synth(a),
    }
}

fn load_model(path: &FsPath) -> Result<FlowModel> {
    FlowModel::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn save_model(model: &FlowModel, path: &FsPath) -> Result<()> {
    model.save(path).with_context(|| format!("writing checkpoint {}", path.display()))
}

/// Expand directories (sorted) and keep files as given.
fn expand(inputs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in inputs {
        if p.is_dir() {
            out.extend(data::list_images(p).with_context(|| format!("listing {}", p.display()))?);
        } else {
            out.push(p.clone());
        }
    }
    Ok(out)
}

fn load_images(inputs: &[PathBuf]) -> Result<Vec<Image>> {
    let paths = expand(inputs)?;
    if paths.is_empty() {
        bail!(iodf::Error::Format("no input images".into()));
    }
    Ok(data::load(&paths)?)
}

fn parse_format(s: &str) -> Result<Format> {
    Format::parse(s).ok_or_else(|| usage(format!("unknown image format {s:?} (ppm or u8t)")))
}

fn run_config(a: &DataArgs) -> Result<RunConfig> {
    let mut cfg = match &a.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            RunConfig::parse(&text)?
        }
        None => RunConfig::default(),
    };
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    if let Some(b) = a.batch {
        cfg.train.batch = b;
    }
    if let Some(d) = &a.checkpoint_dir {
        cfg.train.checkpoint_dir = Some(d.clone());
    }
    cfg.flow.validate()?;
    cfg.train.validate()?;
    Ok(cfg)
}

fn split(a: &DataArgs, cfg: &RunConfig) -> Result<Split> {
    let f = &cfg.flow;
    let (train, valid) = if a.data.is_empty() {
        let seed = cfg.train.seed;
        (
            gen_synth(seed, SYNTH_TRAIN, f.channels, f.height, f.width),
            gen_synth(seed ^ VALID_SALT, SYNTH_VALID, f.channels, f.height, f.width),
        )
    } else {
        let mut train = load_images(&a.data)?;
        let valid = if a.valid.is_empty() {
            if train.len() < 2 {
                bail!(usage("need at least two images to hold out a validation set"));
            }
            let n = (train.len() / 5).max(1);
            train.split_off(train.len() - n)
        } else {
            load_images(&a.valid)?
        };
        (train, valid)
    };
    if let Some(img) = train.iter().chain(&valid).find(|i| i.shape() != (f.channels, f.height, f.width)) {
        bail!(iodf::Error::Format(format!(
            "image is {:?}, the model expects {}x{}x{}",
            img.shape(),
            f.channels,
            f.height,
            f.width
        )));
    }
    Ok(Split { train: data::to_tensor(&train)?, valid: data::to_tensor(&valid)? })
}

fn print_report(r: &StageReport) {
    println!("{r}");
}

/// The furthest stage a checkpoint has completed, judged from its state.
fn completed_stage(m: &FlowModel) -> u8 {
    let s = m.state;
    match (s.quant_weights, s.quant_acts, s.pruned, s.gates_active) {
        (true, ..) => 5,
        (_, true, ..) => 4,
        (_, _, true, _) => 3,
        (.., true) => 2,
        _ => 1,
    }
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let cfg = run_config(&a.data)?;
    let (mut model, default_from) = match &a.checkpoint {
        Some(p) => {
            let m = load_model(p)?;
            if m.config != cfg.flow {
                warn!("checkpoint architecture overrides the configured one");
            }
            let next = completed_stage(&m) + 1;
            (m, next)
        }
        None => (FlowModel::new(cfg.flow.clone(), cfg.train.seed)?, 1),
    };
    let from = a.from.unwrap_or(default_from);
    if from > a.stage {
        bail!(usage(format!("nothing to do: --from {from} is past --stage {}", a.stage)));
    }
    let data = split(&a.data, &RunConfig { flow: model.config.clone(), train: cfg.train.clone() })?;
    let mut t = Trainer::new(cfg.train, &data)?.on_report(print_report);
    for stage in from..=a.stage {
        t.run_stage(&mut model, stage)?;
    }
    save_model(&model, &a.out)
}

fn cmd_prune(a: PruneArgs) -> Result<()> {
    let model = load_model(&a.checkpoint)?;
    if !model.state.gates_active {
        bail!(usage("prune needs a gated (stage-2) checkpoint"));
    }
    let pruned = train::prune(&model)?;
    println!("flops_before={} flops_after={}", model.flops(), pruned.flops());
    save_model(&pruned, &a.out)
}

fn cmd_quantize(a: QuantizeArgs) -> Result<()> {
    let mut model = load_model(&a.checkpoint)?;
    if !model.state.pruned || model.state.quant_acts {
        bail!(usage("quantize needs a stage-3 checkpoint (pruned, not yet quantized)"));
    }
    let mut cfg = run_config(&a.data)?;
    cfg.flow = model.config.clone();
    let data = split(&a.data, &cfg)?;
    let mut t = Trainer::new(cfg.train, &data)?.on_report(print_report);
    for stage in 4..=a.stage {
        t.run_stage(&mut model, stage)?;
    }
    save_model(&model, &a.out)
}

fn default_path(m: &FlowModel) -> Path {
    match (m.state.quant_acts, m.state.quant_weights) {
        (true, true) => Path::Integer,
        (false, false) => Path::Float,
        _ => Path::FakeQuant,
    }
}

fn codec_for<'m>(model: &'m FlowModel, a: &ModelArgs) -> Result<Codec<'m>> {
    if a.threads == 0 {
        bail!(usage("--threads must be at least 1"));
    }
    let path = a.path.map_or_else(|| default_path(model), Path::from);
    Ok(Codec::new(model, path)?.with_threads(a.threads))
}

fn cmd_compress(a: CompressArgs) -> Result<()> {
    let model = load_model(&a.model.checkpoint)?;
    let codec = codec_for(&model, &a.model)?;
    let x = data::to_tensor(&load_images(&a.inputs)?)?;
    let (container, report) = codec.compress(&x)?;
    std::fs::write(&a.out, container.to_bytes()).with_context(|| format!("writing {}", a.out.display()))?;
    println!("images={} coding_bpd={:.6}", x.shape()[0], report.coding_bpd);
    Ok(())
}

fn cmd_decompress(a: DecompressArgs) -> Result<()> {
    let format = parse_format(&a.format)?;
    let model = load_model(&a.model.checkpoint)?;
    let codec = codec_for(&model, &a.model)?;
    let bytes = std::fs::read(&a.container).with_context(|| format!("reading {}", a.container.display()))?;
    let x = codec.decompress(&Container::from_bytes(&bytes)?)?;
    let images = data::from_tensor(&x)?;
    std::fs::create_dir_all(&a.out)?;
    data::save_all(&images, &a.out, format)?;
    println!("images={}", images.len());
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let model = load_model(&a.model.checkpoint)?;
    let codec = codec_for(&model, &a.model)?;
    let x = data::to_tensor(&load_images(&a.inputs)?)?;
    let (container, report) = codec.compress(&x)?;
    let back = codec.decompress(&Container::from_bytes(&container.to_bytes())?)?;
    if back != x {
        bail!(Verification("decompressed images differ from the input".into()));
    }
    println!("analytic_bpd={:.6} coding_bpd={:.6} gap={:.6}", report.analytic_bpd, report.coding_bpd, report.gap());
    Ok(())
}

fn cmd_bench(a: BenchArgs) -> Result<()> {
    if a.batch.is_empty() || a.batch.contains(&0) || a.runs == 0 || a.threads == 0 {
        bail!(usage("--batch sizes, --runs and --threads must be positive"));
    }
    let model = load_model(&a.checkpoint)?;
    let max = *a.batch.iter().max().expect("non-empty");
    let c = &model.config;
    let pool = if a.inputs.is_empty() {
        gen_synth(a.seed, max, c.channels, c.height, c.width)
    } else {
        load_images(&a.inputs)?
    };
    let pool = data::to_tensor(&pool)?;
    let n = pool.shape()[0];
    println!("{}", bench::HEADER);
    for path in [Path::Float, Path::Integer] {
        if path == Path::Integer && default_path(&model) != Path::Integer {
            warn!("skipping the integer path: checkpoint is not fully quantized");
            continue;
        }
        for &b in &a.batch {
            let parts: Vec<Tensor> = (0..b).map(|i| pool.slice_batch(i % n, 1)).collect::<iodf::Result<_>>()?;
            let x = Tensor::concat_batch(&parts.iter().collect::<Vec<_>>());
            println!("{}", bench::measure(&model, path, &x, a.runs, a.threads)?);
        }
    }
    Ok(())
}

fn cmd_gen_synth(a: GenSynthArgs) -> Result<()> {
    let format = parse_format(&a.format)?;
    if a.channels == 0 || a.channels > 255 || a.height == 0 || a.width == 0 {
        bail!(usage("image dimensions must be positive (and at most 255 channels)"));
    }
    let images = gen_synth(a.seed, a.count, a.channels, a.height, a.width);
    std::fs::create_dir_all(&a.out)?;
    data::save_all(&images, &a.out, format)?;
    println!("images={}", images.len());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_follow_the_error_kind() {
        assert_eq!(exit_code(&usage("x")), 1);
        assert_eq!(exit_code(&Verification("x".into()).into()), 3);
        assert_eq!(exit_code(&iodf::Error::ChecksumMismatch { expected: 1, found: 2 }.into()), 3);
        assert_eq!(exit_code(&iodf::Error::Truncated.into()), 2);
        assert_eq!(exit_code(&anyhow::Error::from(iodf::Error::Truncated).context("reading")), 2);
        assert_eq!(exit_code(&anyhow::anyhow!("other")), 2);
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }

    #[test]
    fn stage_is_read_from_state() {
        let mut m = FlowModel::new(iodf::FlowConfig::desk(), 0).unwrap();
        assert_eq!(completed_stage(&m), 1);
        m.state.gates_active = true;
        assert_eq!(completed_stage(&m), 2);
        m.state.pruned = true;
        assert_eq!(completed_stage(&m), 3);
        m.state.quant_acts = true;
        assert_eq!(completed_stage(&m), 4);
        assert_eq!(default_path(&m), Path::FakeQuant);
        m.state.quant_weights = true;
        assert_eq!(completed_stage(&m), 5);
        assert_eq!(default_path(&m), Path::Integer);
    }
}
