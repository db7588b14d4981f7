//! `ammunet` command line: oracle suites, gradient check, benchmark, smoke
//! training and metrics. Every command writes its JSON/CSV reports to
//! `--out` before printing a summary; the exit status is 0 on success, 1 when
//! a check fails and 2 on bad input.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::complexity::{default_sweep, sweep, ComplexityRow, ModuleMacs};
use crate::analysis::metrics::{confusion_tensors, ClassMetrics, MetricsReport};
use crate::analysis::report::{write_csv, write_json};
use crate::error::{invalid, Error, Result};
use crate::merge::MaskGranularity;
use crate::model::{Model, ModelConfig, RunConfig};
use crate::optim::AdamW;
use crate::oracle::{
    gradcheck_config, gradcheck_model, gradcheck_problem, run_oracles, GradcheckReport, OracleOptions, OracleReport,
};
use crate::synth::rectangle_batch;
use crate::tensor::fixture::{peek_dtype, read_fixture};
use crate::tensor::{DType, Scalar, Tensor};

pub const GRADCHECK_EPS_REL: f64 = 1e-4;
pub const GRADCHECK_FLOOR: f64 = 1e-6;
pub const GRADCHECK_TOLERANCE: f64 = 1e-5;
/// Allowed relative gap between the first smoke-train loss and ln(classes).
pub const INITIAL_LOSS_TOLERANCE: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum DTypeArg {
    F32,
    F64,
}

impl From<DTypeArg> for DType {
    fn from(d: DTypeArg) -> Self {
        match d {
            DTypeArg::F32 => DType::F32,
            DTypeArg::F64 => DType::F64,
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "ammunet",
    version,
    about = "Granular attention, map merging and their verification suites"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// TOML run configuration; each command has a built-in default.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Overrides the config's dtype.
    #[arg(long, global = true, value_enum)]
    pub dtype: Option<DTypeArg>,
    /// Independent repetitions with seeds seed, seed+1, ...
    #[arg(long, global = true, default_value_t = 1)]
    pub reps: usize,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Granular attention, merge and ordering against brute-force references.
    Oracle {
        /// Random cases per (grid, heads) pair in the attention suite.
        #[arg(long, default_value_t = 20)]
        trials: usize,
        #[arg(long, value_enum)]
        mask: Option<MaskArg>,
        #[arg(long, hide = true)]
        corrupt_mask: bool,
    },
    /// Analytic gradients against central differences on every parameter.
    Gradcheck,
    /// Parameter count, analytic cost sweep, measured MACs and throughput.
    Bench {
        /// Timed forward passes per repetition.
        #[arg(long, default_value_t = 3)]
        iterations: usize,
    },
    /// Single-batch overfit on synthetic rectangles.
    Smoketrain,
    /// Confusion-matrix scores of a predicted label raster.
    Metrics {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        classes: usize,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum MaskArg {
    Element,
    Block,
}

impl From<MaskArg> for MaskGranularity {
    fn from(m: MaskArg) -> Self {
        match m {
            MaskArg::Element => MaskGranularity::Element,
            MaskArg::Block => MaskGranularity::Block,
        }
    }
}

/// Top-level JSON document of every command.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport<R> {
    pub command: String,
    pub seed: u64,
    pub dtype: DType,
    pub passed: bool,
    pub reps: Vec<R>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckRep {
    pub seed: u64,
    pub config: ModelConfig,
    pub report: GradcheckReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Throughput {
    pub rep: usize,
    pub seed: u64,
    pub batch: usize,
    pub iterations: usize,
    pub seconds: f64,
    pub images_per_second: f64,
}

/// Bench JSON. Everything except `throughput` is a function of the config
/// and seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub seed: u64,
    pub dtype: DType,
    pub config: ModelConfig,
    pub params: usize,
    pub macs_per_image: u64,
    pub modules: Vec<ModuleMacs>,
    pub sweep: Vec<ComplexityRow>,
    pub throughput: Vec<Throughput>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct BenchRow {
    rep: usize,
    seed: u64,
    dtype: DType,
    params: usize,
    macs_per_image: u64,
    batch: usize,
    seconds: f64,
    images_per_second: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SmokeRep {
    pub seed: u64,
    pub steps: usize,
    pub classes: usize,
    pub initial_loss: f64,
    pub ln_classes: f64,
    pub initial_within_tolerance: bool,
    pub first10_strictly_decreasing: bool,
    pub final_loss: f64,
    pub target_loss: f64,
    /// Number of updates after which the loss first fell below target.
    pub reached_at: Option<usize>,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct LossRow {
    rep: usize,
    seed: u64,
    step: usize,
    loss: f64,
    lr: Option<f64>,
}

/// Parses `std::env::args` and runs; returns the process exit code.
pub fn main() -> i32 {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => 0,
        Ok(false) => 1,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

pub fn run(cli: &Cli) -> Result<bool> {
    if cli.reps == 0 {
        return Err(Error::Config("--reps must be at least 1".into()));
    }
    std::fs::create_dir_all(&cli.out)?;
    match &cli.command {
        Command::Oracle {
            trials,
            mask,
            corrupt_mask,
        } => cmd_oracle(cli, *trials, *mask, *corrupt_mask),
        Command::Gradcheck => cmd_gradcheck(cli),
        Command::Bench { iterations } => cmd_bench(cli, *iterations),
        Command::Smoketrain => cmd_smoketrain(cli),
        Command::Metrics { pred, truth, classes } => cmd_metrics(cli, pred, truth, *classes),
    }
}

fn load_config(cli: &Cli, default: impl FnOnce() -> RunConfig) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => default(),
    };
    if let Some(d) = cli.dtype {
        cfg.model.dtype = d.into();
    }
    Ok(cfg)
}

fn require_f64(cfg: &RunConfig, command: &str) -> Result<()> {
    if cfg.model.dtype != DType::F64 {
        return Err(Error::Config(format!("{command} runs in f64 only")));
    }
    Ok(())
}

fn seeds(cli: &Cli) -> Vec<(usize, u64)> {
    (0..cli.reps).map(|r| (r, cli.seed.wrapping_add(r as u64))).collect()
}

fn cmd_oracle(cli: &Cli, trials: usize, mask: Option<MaskArg>, corrupt: bool) -> Result<bool> {
    let cfg = load_config(cli, RunConfig::default)?;
    require_f64(&cfg, "oracle")?;
    let mask = mask.map_or(cfg.model.mask, Into::into);
    let reps: Vec<OracleReport> = seeds(cli)
        .into_par_iter()
        .map(|(_, seed)| {
            run_oracles(&OracleOptions {
                seed,
                mask,
                trials,
                corrupt_mask: corrupt,
            })
        })
        .collect::<Result<_>>()?;
    let passed = reps.iter().all(|r| r.passed);
    write_json(
        &cli.out.join("oracle.json"),
        &report("oracle", cli, DType::F64, passed, reps.clone()),
    )?;
    for r in &reps {
        println!("seed {} mask {:?}", r.seed, r.mask);
        for s in &r.suites {
            let status = if s.passed { "pass" } else { "FAIL" };
            println!("  {status} {:<22} max error {:.3e}", s.name, s.max_error);
            for inv in s.invariants.iter().filter(|i| !i.passed) {
                println!(
                    "    failed invariant {} (tolerance {:e}): {}",
                    inv.name,
                    inv.tolerance,
                    inv.first_failure.as_deref().unwrap_or("")
                );
            }
        }
    }
    println!("oracle: {}", verdict(passed));
    Ok(passed)
}

fn cmd_gradcheck(cli: &Cli) -> Result<bool> {
    let cfg = load_config(cli, || RunConfig {
        model: gradcheck_config(),
        ..Default::default()
    })?;
    require_f64(&cfg, "gradcheck")?;
    let reps: Vec<GradcheckRep> = seeds(cli)
        .into_par_iter()
        .map(|(_, seed)| {
            let (model, images, labels) = gradcheck_problem(&cfg.model, seed)?;
            let report = gradcheck_model(
                &model,
                &images,
                &labels,
                GRADCHECK_EPS_REL,
                GRADCHECK_FLOOR,
                GRADCHECK_TOLERANCE,
            )?;
            Ok(GradcheckRep {
                seed,
                config: cfg.model.clone(),
                report,
            })
        })
        .collect::<Result<_>>()?;
    let passed = reps.iter().all(|r| r.report.passed);
    write_json(
        &cli.out.join("gradcheck.json"),
        &report("gradcheck", cli, DType::F64, passed, reps.clone()),
    )?;
    let rows: Vec<_> = reps.iter().flat_map(|r| r.report.params.iter().cloned()).collect();
    write_csv(&cli.out.join("gradcheck.csv"), &rows)?;
    for r in &reps {
        let w = &r.report.worst;
        println!(
            "seed {}: {} coordinates, worst {}[{}] analytic {:.6e} numeric {:.6e} rel error {:.3e} (tolerance {:e})",
            r.seed,
            r.report.coordinates,
            w.name,
            w.worst_index,
            w.analytic,
            w.numeric,
            w.rel_error,
            GRADCHECK_TOLERANCE
        );
    }
    println!("gradcheck: {}", verdict(passed));
    Ok(passed)
}

fn cmd_bench(cli: &Cli, iterations: usize) -> Result<bool> {
    let cfg = load_config(cli, RunConfig::default)?;
    if iterations == 0 {
        return Err(Error::Config("--iterations must be at least 1".into()));
    }
    let report = match cfg.model.dtype {
        DType::F32 => bench::<f32>(cli, &cfg, iterations)?,
        DType::F64 => bench::<f64>(cli, &cfg, iterations)?,
    };
    write_json(&cli.out.join("bench.json"), &report)?;
    write_csv(&cli.out.join("complexity.csv"), &report.sweep)?;
    write_csv(&cli.out.join("macs.csv"), &report.modules)?;
    let rows: Vec<BenchRow> = report
        .throughput
        .iter()
        .map(|t| BenchRow {
            rep: t.rep,
            seed: t.seed,
            dtype: report.dtype,
            params: report.params,
            macs_per_image: report.macs_per_image,
            batch: t.batch,
            seconds: t.seconds,
            images_per_second: t.images_per_second,
        })
        .collect();
    write_csv(&cli.out.join("bench.csv"), &rows)?;
    println!("params {}  MACs/image {}", report.params, report.macs_per_image);
    for m in &report.modules {
        println!("  {:<16} {}", m.module, m.macs);
    }
    for r in &report.sweep {
        println!(
            "  h=w={:<4} Ω(MSA) {:>14}  Ω(W-MSA) {:>12}  Ω(GMSA) {:>12}  GMSA/MSA {:.4}",
            r.h, r.omega_msa, r.omega_wmsa, r.omega_gmsa, r.gmsa_over_msa
        );
    }
    for t in &report.throughput {
        println!("  rep {} : {:.2} images/s", t.rep, t.images_per_second);
    }
    Ok(true)
}

fn bench<T: Scalar>(cli: &Cli, cfg: &RunConfig, iterations: usize) -> Result<BenchReport> {
    let m = &cfg.model;
    let model = Model::<T>::init(m.clone(), cli.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cli.seed);
    let (images, _) = rectangle_batch::<T>(&mut rng, 1, m.input_h, m.input_w, m.classes, 0.1)?;
    let modules = model.module_macs(&images.reshape(&[m.input_h, m.input_w, 3])?)?;
    let throughput = seeds(cli)
        .into_par_iter()
        .map(|(rep, seed)| {
            let model = Model::<T>::init(m.clone(), seed)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let batch = cfg.train.batch;
            let (images, _) = rectangle_batch::<T>(&mut rng, batch, m.input_h, m.input_w, m.classes, 0.1)?;
            let start = Instant::now();
            for _ in 0..iterations {
                model.forward(&images)?;
            }
            let seconds = start.elapsed().as_secs_f64();
            let images_per_second = (batch * iterations) as f64 / seconds.max(f64::MIN_POSITIVE);
            Ok(Throughput {
                rep,
                seed,
                batch,
                iterations,
                seconds,
                images_per_second,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(BenchReport {
        seed: cli.seed,
        dtype: m.dtype,
        config: m.clone(),
        params: model.param_count(),
        macs_per_image: modules.iter().map(|s| s.macs).sum(),
        modules,
        sweep: sweep(&default_sweep())?,
        throughput,
    })
}

fn cmd_smoketrain(cli: &Cli) -> Result<bool> {
    let cfg = load_config(cli, RunConfig::smoke)?;
    let runs: Vec<(SmokeRep, Vec<LossRow>)> = seeds(cli)
        .into_par_iter()
        .map(|(rep, seed)| match cfg.model.dtype {
            DType::F32 => smoketrain::<f32>(&cfg, rep, seed),
            DType::F64 => smoketrain::<f64>(&cfg, rep, seed),
        })
        .collect::<Result<_>>()?;
    let rows: Vec<LossRow> = runs.iter().flat_map(|(_, l)| l.iter().cloned()).collect();
    let reps: Vec<SmokeRep> = runs.into_iter().map(|(r, _)| r).collect();
    let passed = reps.iter().all(|r| r.passed);
    write_csv(&cli.out.join("loss.csv"), &rows)?;
    write_json(
        &cli.out.join("smoketrain.json"),
        &report("smoketrain", cli, cfg.model.dtype, passed, reps.clone()),
    )?;
    for r in &reps {
        println!(
            "seed {}: initial loss {:.6} (ln {} = {:.6}), final loss {:.6} after {} steps, target {} reached at {}",
            r.seed,
            r.initial_loss,
            r.classes,
            r.ln_classes,
            r.final_loss,
            r.steps,
            r.target_loss,
            r.reached_at.map_or("never".to_string(), |s| format!("step {s}"))
        );
    }
    println!("smoketrain: {}", verdict(passed));
    Ok(passed)
}

fn smoketrain<T: Scalar>(cfg: &RunConfig, rep: usize, seed: u64) -> Result<(SmokeRep, Vec<LossRow>)> {
    let (m, t) = (&cfg.model, &cfg.train);
    let mut model = Model::<T>::init(m.clone(), seed)?;
    if t.uniform_logit_init {
        model.zero_output_layer();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (images, labels) = rectangle_batch::<T>(&mut rng, t.batch, m.input_h, m.input_w, m.classes, 0.1)?;
    let mut opt = AdamW::new(t.optimizer());
    let mut losses = Vec::with_capacity(t.steps + 1);
    let mut rows = Vec::with_capacity(t.steps + 1);
    for step in 0..t.steps {
        let lr = opt.config().lr_at(step);
        let loss = model.train_step(&images, &labels, &mut opt)?.as_f64();
        losses.push(loss);
        rows.push(LossRow {
            rep,
            seed,
            step,
            loss,
            lr: Some(lr),
        });
    }
    let final_loss = model.loss(&images, &labels)?.as_f64();
    losses.push(final_loss);
    rows.push(LossRow {
        rep,
        seed,
        step: t.steps,
        loss: final_loss,
        lr: None,
    });
    let ln_classes = (m.classes as f64).ln();
    let initial_within_tolerance = ((losses[0] - ln_classes) / ln_classes).abs() <= INITIAL_LOSS_TOLERANCE;
    let head = &losses[..losses.len().min(11)];
    let reached_at = losses.iter().position(|&l| l < t.target_loss);
    let rep = SmokeRep {
        seed,
        steps: t.steps,
        classes: m.classes,
        initial_loss: losses[0],
        ln_classes,
        initial_within_tolerance,
        first10_strictly_decreasing: head.windows(2).all(|w| w[1] < w[0]),
        final_loss,
        target_loss: t.target_loss,
        reached_at,
        passed: reached_at.is_some() && (initial_within_tolerance || !t.uniform_logit_init),
    };
    Ok((rep, rows))
}

fn load_labels(path: &Path) -> Result<Tensor<f64>> {
    let text = std::fs::read_to_string(path)?;
    match peek_dtype(&text)? {
        DType::F64 => read_fixture::<f64>(&text),
        DType::F32 => Ok(read_fixture::<f32>(&text)?.cast::<f64>()),
    }
}

fn cmd_metrics(cli: &Cli, pred: &Path, truth: &Path, classes: usize) -> Result<bool> {
    let (p, t) = (load_labels(pred)?, load_labels(truth)?);
    if classes == 0 {
        return Err(invalid("metrics", "--classes must be positive"));
    }
    let metrics: MetricsReport = confusion_tensors(&p, &t, classes)?.report()?;
    write_json(&cli.out.join("metrics.json"), &metrics)?;
    let rows: Vec<ClassMetrics> = metrics.per_class.clone();
    write_csv(&cli.out.join("metrics.csv"), &rows)?;
    println!(
        "{} pixels, {} classes: mIoU {:.6}  mAcc {:.6}",
        metrics.pixels, metrics.classes, metrics.miou, metrics.macc
    );
    for c in &metrics.per_class {
        println!("  class {}: IoU {:.6}  Acc {:.6}", c.class, c.iou, c.acc);
    }
    Ok(true)
}

fn report<R>(command: &str, cli: &Cli, dtype: DType, passed: bool, reps: Vec<R>) -> RunReport<R> {
    RunReport {
        command: command.to_string(),
        seed: cli.seed,
        dtype,
        passed,
        reps,
    }
}

fn verdict(passed: bool) -> &'static str {
    if passed {
        "PASS"
    } else {
        "FAIL"
    }
}
