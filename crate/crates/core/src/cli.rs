//! The `ivd-lookonce` command line.
//!
//! ```text
//! ivd-lookonce [--seed N] [--out DIR] [--format csv|json] [--jobs N] <command>
//!
//!   synth           generate train/val/test JSONL splits and a manifest
//!   train           fit the look-once network, write a checkpoint and a log
//!   eval            score selectors on a split, one row per method
//!   bench           operation counts and wall times per candidate count
//!   attention-demo  run the shape-attention block on a synthetic image
//! ```
//!
//! Every output embeds the seed and the effective configuration. Errors are
//! printed as a single `error: ...` line with exit code 1.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::json;

use crate::baselines::{FilterOptions, TreeOptions};
use crate::error::{Error, Result};
use crate::lookonce::{train_lookonce_with, Architecture, EpochLog, LookOnceModel, TrainConfig};
use crate::numkit::{grad_check, Checkpoint, Graph, GraphFn, ParamStore, Var};
use crate::shape_attention::{compute_shape_feature, AttentionBlock, AttentionConfig, FeatureMap, FeaturePyramid, Grid};
use crate::synthbench::{
    bench, bench_inference, evaluate_method, generate_dataset, load_jsonl, save_jsonl, BenchConfig, DttAxis,
    EvalOptions, MatchStrategy, Method, MethodEval, SynthConfig, TemplateSource,
};

#[derive(Debug, Parser)]
#[command(name = "ivd-lookonce", version, about = "Disc candidate refinement: synthesis, training, evaluation, benchmarks")]
pub struct Cli {
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    #[arg(long, global = true, value_enum, default_value_t = Format::Csv)]
    pub format: Format,
    /// Worker threads for the search tree.
    #[arg(long, global = true, default_value_t = 1)]
    pub jobs: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Json,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset.
    Synth(SynthArgs),
    /// Train the look-once network.
    Train(TrainArgs),
    /// Evaluate selectors on a dataset split.
    Eval(EvalArgs),
    /// Benchmark inference cost against the number of candidates.
    Bench(BenchArgs),
    /// Exercise the shape-attention block and report its gates.
    AttentionDemo(DemoArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    /// 100 cases of 11 discs plus 20 false positives.
    AppendixT2,
    /// 11 discs plus 10 false positives.
    NoisyFig4b,
}

impl Preset {
    fn apply(self, cfg: &mut SynthConfig) -> usize {
        match self {
            Preset::AppendixT2 => {
                cfg.fp_count = 20;
                100
            }
            Preset::NoisyFig4b => {
                cfg.fp_count = 10;
                100
            }
        }
    }
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
    /// Number of cases over all splits [default: 100].
    #[arg(long)]
    pub cases: Option<usize>,
    #[arg(long)]
    pub fp_count: Option<usize>,
    #[arg(long)]
    pub drop_prob: Option<f64>,
    #[arg(long)]
    pub discs: Option<usize>,
    #[arg(long)]
    pub tp_sigma: Option<f64>,
    #[arg(long)]
    pub gap_jitter: Option<f64>,
    #[arg(long)]
    pub fp_min_distance: Option<f64>,
    #[arg(long)]
    pub fp_margin_x: Option<f64>,
    #[arg(long)]
    pub fp_margin_y: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Directory with train.jsonl and val.jsonl.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 100)]
    pub epochs: usize,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    /// Checkpoint path [default: OUT/model.json].
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Comma-separated subset of lookonce, search-tree, condition, ground-truth.
    #[arg(long, value_delimiter = ',', default_value = "lookonce,search-tree,condition")]
    pub methods: Vec<String>,
    /// Threshold the keep-probability instead of keeping the V best.
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long, default_value_t = 35.0)]
    pub template_gap: f64,
    /// Skeleton for the search tree and condition filter.
    #[arg(long, value_enum, default_value_t = TemplateArg::Generic)]
    pub template: TemplateArg,
    #[arg(long, default_value_t = 0.1)]
    pub lambda: f64,
    #[arg(long, default_value_t = 0.5)]
    pub alpha: f64,
    #[arg(long, default_value_t = 1.5)]
    pub beta: f64,
    #[arg(long, default_value_t = 10.0)]
    pub lateral_mm: f64,
    #[arg(long, value_enum, default_value_t = AxisArg::Euclidean)]
    pub dtt_axis: AxisArg,
    #[arg(long, value_enum, default_value_t = MatchArg::Greedy)]
    pub matching: MatchArg,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum TemplateArg {
    Generic,
    Case,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum AxisArg {
    Euclidean,
    SuperiorInferior,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum MatchArg {
    Greedy,
    Optimal,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5,6,7,8")]
    pub fp_counts: Vec<usize>,
    #[arg(long, default_value_t = 10)]
    pub cases: usize,
    #[arg(long, default_value_t = 5)]
    pub reps: usize,
    #[arg(long, value_delimiter = ',', default_value = "lookonce,search-tree")]
    pub methods: Vec<String>,
}

#[derive(Debug, Args)]
pub struct DemoArgs {
    /// Side of the square input image.
    #[arg(long, default_value_t = 32)]
    pub size: usize,
    #[arg(long, default_value_t = 3)]
    pub levels: usize,
    #[arg(long, default_value_t = 8)]
    pub channels: usize,
    /// Use a constant image (no shape information).
    #[arg(long)]
    pub constant: bool,
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.to_string().replace('\n', " "));
            1
        }
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Synth(a) => cmd_synth(cli, a),
        Command::Train(a) => cmd_train(cli, a),
        Command::Eval(a) => cmd_eval(cli, a),
        Command::Bench(a) => cmd_bench(cli, a),
        Command::AttentionDemo(a) => cmd_attention_demo(cli, a),
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        ensure_dir(dir)?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn pretty(v: &impl Serialize) -> Result<Vec<u8>> {
    let mut s = serde_json::to_vec_pretty(v)?;
    s.push(b'\n');
    Ok(s)
}

fn require_file(path: &Path, what: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::Config(format!("{what} `{}` does not exist", path.display())))
    }
}

/// `(train, val, test)` sizes, 70/15/15 by case.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let train = (n as f64 * 0.70).round() as usize;
    let val = ((n as f64 * 0.15).round() as usize).min(n - train);
    (train, val, n - train - val)
}

pub const SPLITS: [&str; 3] = ["train", "val", "test"];

fn cmd_synth(cli: &Cli, a: &SynthArgs) -> Result<()> {
    let mut cfg = SynthConfig { seed: cli.seed, ..Default::default() };
    let mut cases = a.preset.map_or(100, |p| p.apply(&mut cfg));
    if let Some(c) = a.cases {
        cases = c;
    }
    macro_rules! set {
        ($field:ident, $arg:expr) => {
            if let Some(v) = $arg {
                cfg.$field = v;
            }
        };
    }
    set!(fp_count, a.fp_count);
    set!(drop_tp_probability, a.drop_prob);
    set!(discs, a.discs);
    set!(tp_sigma, a.tp_sigma);
    set!(gap_jitter, a.gap_jitter);
    set!(fp_min_distance, a.fp_min_distance);
    set!(fp_margin_x, a.fp_margin_x);
    set!(fp_margin_y, a.fp_margin_y);
    cfg.validate()?;
    if cases == 0 {
        return Err(Error::Config("--cases must be positive".into()));
    }
    ensure_dir(&cli.out)?;

    let data = generate_dataset(&cfg, cases)?;
    let (n_train, n_val, _) = split_sizes(cases);
    let parts = [&data[..n_train], &data[n_train..n_train + n_val], &data[n_train + n_val..]];
    for (name, part) in SPLITS.iter().zip(parts) {
        save_jsonl(part, cli.out.join(format!("{name}.jsonl")))?;
    }
    let manifest = json!({
        "command": "synth",
        "seed": cli.seed,
        "preset": a.preset,
        "cases": cases,
        "splits": { "train": parts[0].len(), "val": parts[1].len(), "test": parts[2].len() },
        "config": cfg,
        "version": env!("CARGO_PKG_VERSION"),
    });
    write_file(&cli.out.join("manifest.json"), &pretty(&manifest)?)?;
    println!("wrote {cases} cases to {}", cli.out.display());
    Ok(())
}

fn load_split(dir: &Path, split: &str) -> Result<Vec<crate::lookonce::CandidateSet>> {
    let path = dir.join(format!("{split}.jsonl"));
    require_file(&path, "dataset split")?;
    load_jsonl(path)
}

fn comment_header(command: &str, seed: u64, config: &serde_json::Value) -> Result<Vec<String>> {
    Ok(vec![format!("command={command} seed={seed}"), format!("config={}", serde_json::to_string(config)?)])
}

fn cmd_train(cli: &Cli, a: &TrainArgs) -> Result<()> {
    let train = load_split(&a.data, "train")?;
    let val = if a.data.join("val.jsonl").is_file() { load_split(&a.data, "val")? } else { Vec::new() };
    let checkpoint = a.checkpoint.clone().unwrap_or_else(|| cli.out.join("model.json"));
    ensure_dir(&cli.out)?;
    let cfg = TrainConfig {
        arch: Architecture::default(),
        epochs: a.epochs,
        batch_size: a.batch_size,
        lr: a.lr,
        seed: cli.seed,
        ..Default::default()
    };
    let quiet = a.quiet;
    let outcome = train_lookonce_with(&train, &val, &cfg, |e: &EpochLog| {
        if !quiet {
            eprintln!(
                "epoch {:>3}  train_loss {:.5}  val_loss {:.5}  val_f1 {:.4}",
                e.epoch, e.train_loss, e.val_loss, e.val_f1
            );
        }
    })?;

    let mut ck = outcome.model.to_checkpoint();
    ck.architecture["training"] = json!({
        "seed": cli.seed,
        "config": cfg,
        "data": a.data,
        "best_epoch": outcome.best_epoch,
        "best_val_f1": outcome.best_val_f1,
        "class_weights": outcome.class_weights,
    });
    ck.save(&checkpoint)?;

    let header = comment_header("train", cli.seed, &serde_json::to_value(&cfg)?)?;
    let (name, bytes) = match cli.format {
        Format::Csv => {
            let mut buf = Vec::new();
            for h in &header {
                writeln!(buf, "# {h}").map_err(|e| Error::io("<log>", e))?;
            }
            let mut w = csv::Writer::from_writer(&mut buf);
            w.write_record(["epoch", "train_loss", "val_loss", "val_f1"])?;
            for e in &outcome.log {
                w.write_record([
                    e.epoch.to_string(),
                    format!("{:.8}", e.train_loss),
                    format!("{:.8}", e.val_loss),
                    format!("{:.6}", e.val_f1),
                ])?;
            }
            w.flush().map_err(|e| Error::io("<log>", e))?;
            drop(w);
            ("train_log.csv", buf)
        }
        Format::Json => ("train_log.json", pretty(&json!({ "seed": cli.seed, "config": cfg, "epochs": outcome.log }))?),
    };
    write_file(&cli.out.join(name), &bytes)?;
    println!("best_epoch={} val_f1={:.4} checkpoint={}", outcome.best_epoch, outcome.best_val_f1, checkpoint.display());
    Ok(())
}

fn parse_methods(names: &[String]) -> Result<Vec<Method>> {
    let mut out: Vec<Method> = Vec::new();
    for n in names.iter().map(|s| s.trim()).filter(|s| !s.is_empty()) {
        let m: Method = n.parse()?;
        if !out.contains(&m) {
            out.push(m);
        }
    }
    if out.is_empty() {
        return Err(Error::Config("no methods requested".into()));
    }
    Ok(out)
}

fn load_model(path: Option<&PathBuf>, needed: bool) -> Result<Option<LookOnceModel>> {
    match path {
        Some(p) => {
            require_file(p, "checkpoint")?;
            Ok(Some(LookOnceModel::from_checkpoint(&Checkpoint::load(p)?)?))
        }
        None if needed => Err(Error::Config("method lookonce requires --checkpoint".into())),
        None => Ok(None),
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x:.6}"))
}

pub const METRIC_COLUMNS: [&str; 17] = [
    "method",
    "cases",
    "dtt_mean",
    "dtt_std",
    "fnr",
    "fpr",
    "f1",
    "accuracy",
    "specificity",
    "sensitivity",
    "auc",
    "tp",
    "fp",
    "fn",
    "tn",
    "subsets_evaluated",
    "forward_passes",
];

fn metric_record(e: &MethodEval) -> Vec<String> {
    let r = &e.report;
    vec![
        e.method.to_string(),
        e.cases.to_string(),
        fmt_opt(r.dtt_mean),
        fmt_opt(r.dtt_std),
        format!("{:.6}", r.fnr),
        format!("{:.6}", r.fpr),
        format!("{:.6}", r.f1),
        format!("{:.6}", r.accuracy),
        format!("{:.6}", r.specificity),
        format!("{:.6}", r.sensitivity),
        fmt_opt(r.auc),
        r.counts.tp.to_string(),
        r.counts.fp.to_string(),
        r.counts.fn_.to_string(),
        r.counts.tn.to_string(),
        e.subsets_evaluated.to_string(),
        e.forward_passes.to_string(),
    ]
}

fn cmd_eval(cli: &Cli, a: &EvalArgs) -> Result<()> {
    let methods = parse_methods(&a.methods)?;
    let model = load_model(a.checkpoint.as_ref(), methods.contains(&Method::LookOnce))?;
    let sets = load_split(&a.data, &a.split)?;
    ensure_dir(&cli.out)?;
    let opts = EvalOptions {
        template_gap: a.template_gap,
        template: match a.template {
            TemplateArg::Generic => TemplateSource::Generic,
            TemplateArg::Case => TemplateSource::Case,
        },
        top_n: a.threshold.is_none(),
        threshold: a.threshold.unwrap_or(0.5),
        tree: TreeOptions { lambda: a.lambda, jobs: cli.jobs.max(1) },
        filter: FilterOptions { alpha: a.alpha, beta: a.beta, lateral_mm: a.lateral_mm },
        axis: match a.dtt_axis {
            AxisArg::Euclidean => DttAxis::Euclidean,
            AxisArg::SuperiorInferior => DttAxis::SuperiorInferior,
        },
        strategy: match a.matching {
            MatchArg::Greedy => MatchStrategy::Greedy,
            MatchArg::Optimal => MatchStrategy::Optimal,
        },
    };
    let evals = methods
        .iter()
        .map(|&m| evaluate_method(m, &sets, model.as_ref(), &opts))
        .collect::<Result<Vec<_>>>()?;

    let config = json!({
        "data": a.data,
        "split": a.split,
        "checkpoint": a.checkpoint,
        "methods": methods,
        "options": opts,
    });
    let (name, bytes) = match cli.format {
        Format::Csv => {
            let mut buf = Vec::new();
            for h in comment_header("eval", cli.seed, &config)? {
                writeln!(buf, "# {h}").map_err(|e| Error::io("<metrics>", e))?;
            }
            let mut w = csv::Writer::from_writer(&mut buf);
            w.write_record(METRIC_COLUMNS)?;
            for e in &evals {
                w.write_record(metric_record(e))?;
            }
            w.flush().map_err(|e| Error::io("<metrics>", e))?;
            drop(w);
            ("metrics.csv", buf)
        }
        Format::Json => ("metrics.json", pretty(&json!({ "seed": cli.seed, "config": config, "results": evals }))?),
    };
    write_file(&cli.out.join(name), &bytes)?;
    print_table(&evals);
    Ok(())
}

fn print_table(evals: &[MethodEval]) {
    println!(
        "{:<13} {:>16} {:>7} {:>7} {:>7} {:>7} {:>7} {:>7} {:>7}",
        "method", "dtt_mm", "fnr%", "fpr%", "f1", "acc", "spec", "sens", "auc"
    );
    for e in evals {
        let r = &e.report;
        let dtt = match (r.dtt_mean, r.dtt_std) {
            (Some(m), Some(s)) => format!("{m:.2}(±{s:.2})"),
            _ => "-".to_string(),
        };
        println!(
            "{:<13} {:>16} {:>7.2} {:>7.2} {:>7.3} {:>7.3} {:>7.3} {:>7.3} {:>7}",
            e.method.name(),
            dtt,
            r.fnr,
            r.fpr,
            r.f1,
            r.accuracy,
            r.specificity,
            r.sensitivity,
            r.auc.map_or_else(|| "-".to_string(), |v| format!("{v:.3}"))
        );
    }
}

fn cmd_bench(cli: &Cli, a: &BenchArgs) -> Result<()> {
    let methods = parse_methods(&a.methods)?;
    let model = load_model(a.checkpoint.as_ref(), methods.contains(&Method::LookOnce))?;
    ensure_dir(&cli.out)?;
    let cfg = BenchConfig {
        synth: SynthConfig { seed: cli.seed, ..Default::default() },
        fp_counts: a.fp_counts.clone(),
        cases: a.cases,
        repetitions: a.reps,
        methods,
        eval: EvalOptions { tree: TreeOptions { jobs: cli.jobs.max(1), ..Default::default() }, ..Default::default() },
    };
    let rows = bench_inference(model.as_ref(), &cfg)?;
    let config = json!({ "checkpoint": a.checkpoint, "bench": cfg });
    let header = comment_header("bench", cli.seed, &config)?;
    let mut timing_header = header.clone();
    timing_header.push(format!(
        "machine os={} arch={} threads={}",
        std::env::consts::OS,
        std::env::consts::ARCH,
        std::thread::available_parallelism().map_or(1, |n| n.get())
    ));
    match cli.format {
        Format::Csv => {
            let mut counts = Vec::new();
            bench::write_counts_csv(&rows, &header, &mut counts)?;
            write_file(&cli.out.join("bench_counts.csv"), &counts)?;
            let mut timing = Vec::new();
            bench::write_timing_csv(&rows, &timing_header, &mut timing)?;
            write_file(&cli.out.join("bench_timing.csv"), &timing)?;
        }
        Format::Json => {
            #[derive(Serialize)]
            struct Counts<'a> {
                method: Method,
                extra_fp: usize,
                m: usize,
                n: usize,
                forward_passes: u64,
                subsets_evaluated: u64,
                #[serde(skip)]
                _row: &'a bench::BenchRow,
            }
            let counts: Vec<Counts> = rows
                .iter()
                .map(|r| Counts {
                    method: r.method,
                    extra_fp: r.extra_fp,
                    m: r.m,
                    n: r.n,
                    forward_passes: r.forward_passes,
                    subsets_evaluated: r.subsets_evaluated,
                    _row: r,
                })
                .collect();
            write_file(
                &cli.out.join("bench_counts.json"),
                &pretty(&json!({ "seed": cli.seed, "config": config, "rows": counts }))?,
            )?;
            write_file(
                &cli.out.join("bench_timing.json"),
                &pretty(&json!({ "seed": cli.seed, "config": config, "machine": timing_header.last(), "rows": rows }))?,
            )?;
        }
    }
    for r in &rows {
        println!(
            "{:<12} M={:<3} passes={} subsets={:<8} median={:.6}s",
            r.method.name(),
            r.m,
            r.forward_passes,
            r.subsets_evaluated,
            r.median_wall_s
        );
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct LevelReport {
    level: usize,
    input_shape: [usize; 3],
    output_shape: [usize; 3],
    shape_preserved: bool,
    channel_gate_min: f64,
    channel_gate_mean: f64,
    channel_gate_max: f64,
    shape_gate: f64,
}

/// A bright vertical band with periodic bumps, like a sagittal spine.
fn demo_image(size: usize, constant: bool) -> Grid {
    if constant {
        return Grid::from_fn(size, size, |_, _| 0.5);
    }
    let mid = size as f64 / 2.0;
    let width = (size as f64 / 8.0).max(1.0);
    Grid::from_fn(size, size, |r, c| {
        let band = (-((c as f64 - mid) / width).powi(2)).exp();
        band * (0.6 + 0.4 * (r as f64 * std::f64::consts::PI / 4.0).cos())
    })
}

fn cmd_attention_demo(cli: &Cli, a: &DemoArgs) -> Result<()> {
    if a.levels == 0 || a.channels == 0 || a.size < 2 {
        return Err(Error::Config("attention-demo needs size >= 2, levels >= 1 and channels >= 1".into()));
    }
    if a.size >> (a.levels - 1) == 0 {
        return Err(Error::Config(format!("size {} is too small for {} levels", a.size, a.levels)));
    }
    ensure_dir(&cli.out)?;
    let image = demo_image(a.size, a.constant);
    let sf = compute_shape_feature(&image)?;
    let channels = if a.channels % 2 == 0 { a.channels } else { a.channels * 2 };
    let config = AttentionConfig::new(vec![channels; a.levels], channels);
    let block = AttentionBlock::new(config.clone(), cli.seed)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cli.seed.wrapping_add(1));
    let levels: Vec<FeatureMap> = (0..a.levels)
        .map(|j| {
            let s = (a.size >> j).max(1);
            let data = (0..channels * s * s).map(|_| rng.random_range(-1.0..1.0)).collect();
            FeatureMap::new(channels, s, s, data)
        })
        .collect::<Result<_>>()?;
    let pyramid = FeaturePyramid::new(levels)?;
    let out = block.forward(&pyramid, &sf)?;

    let level_reports: Vec<LevelReport> = out
        .levels
        .iter()
        .zip(pyramid.levels())
        .enumerate()
        .map(|(j, (r, p))| {
            let g = &r.channel_gates;
            LevelReport {
                level: j,
                input_shape: p.shape(),
                output_shape: r.map.shape(),
                shape_preserved: p.shape() == r.map.shape(),
                channel_gate_min: g.iter().copied().fold(f64::INFINITY, f64::min),
                channel_gate_mean: g.iter().sum::<f64>() / g.len() as f64,
                channel_gate_max: g.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                shape_gate: r.shape_gate,
            }
        })
        .collect();
    let finest = pyramid.levels()[0].shape();
    let fused_shape = out.fused.shape();
    let fmin = out.fused.data.iter().copied().fold(f64::INFINITY, f64::min);
    let fmax = out.fused.data.iter().copied().fold(f64::NEG_INFINITY, f64::max);

    // Gradient check of every block parameter on a weighted sum of the output.
    let mut params: ParamStore = block.params.clone();
    let inputs: Vec<(crate::numkit::Tensor, (usize, usize))> =
        pyramid.levels().iter().map(|l| (l.to_pixel_major(), (l.height, l.width))).collect();
    let sf_tensor = sf.to_tensor();
    let sf_dims = (sf.height(), sf.width());
    let mut f = GraphFn(|g: &mut Graph, p: &ParamStore| -> Result<Var> {
        let vars: Vec<(Var, (usize, usize))> = inputs.iter().map(|(t, d)| (g.input(t.clone()), *d)).collect();
        let s = g.input(sf_tensor.clone());
        let out = AttentionBlock::forward_graph(g, p, &vars, s, sf_dims)?;
        let n = g.value(out.fused).len();
        let shape = g.value(out.fused).shape().to_vec();
        let w = crate::numkit::Tensor::new(shape, (0..n).map(|i| 0.5 + (i * 37 % 11) as f64 / 10.0).collect())?;
        let w = g.input(w);
        let m = g.mul(out.fused, w)?;
        Ok(g.sum(m))
    });
    let tol = 1e-4;
    let report = grad_check(&mut f, &mut params, tol)?;

    let doc = json!({
        "command": "attention-demo",
        "seed": cli.seed,
        "config": { "size": a.size, "levels": a.levels, "channels": channels, "constant": a.constant, "block": config },
        "shape_feature": {
            "height": sf.height(),
            "width": sf.width(),
            "gx_max_abs": sf.gx.data.iter().fold(0.0f64, |m, v| m.max(v.abs())),
            "gy_max_abs": sf.gy.data.iter().fold(0.0f64, |m, v| m.max(v.abs())),
            "magnitude_mean": sf.magnitude.data.iter().sum::<f64>() / sf.magnitude.data.len() as f64,
            "all_zero": sf.magnitude.data.iter().all(|&v| v == 0.0),
        },
        "levels": level_reports,
        "fused": {
            "shape": fused_shape,
            "expected_shape": [channels, finest[1], finest[2]],
            "matches_finest_level": fused_shape[1..] == finest[1..],
            "min": fmin,
            "max": fmax,
            "in_unit_interval": fmin > 0.0 && fmax < 1.0,
        },
        "grad_check": {
            "tol": tol,
            "max_rel_error": report.max_rel_error(),
            "passed": report.passed(),
            "parameters": report.params.len(),
        },
    });
    write_file(&cli.out.join("attention_report.json"), &pretty(&doc)?)?;
    println!(
        "levels={} fused={:?} grad_check max_rel_error={:.2e} passed={}",
        a.levels,
        fused_shape,
        report.max_rel_error(),
        report.passed()
    );
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splits_are_seventy_fifteen_fifteen() {
        assert_eq!(split_sizes(100), (70, 15, 15));
        assert_eq!(split_sizes(2000), (1400, 300, 300));
        let (a, b, c) = split_sizes(7);
        assert_eq!(a + b + c, 7);
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }

    #[test]
    fn unknown_method_is_a_config_error() {
        assert!(matches!(parse_methods(&["tree".into()]), Err(Error::Config(_))));
        assert_eq!(parse_methods(&["condition".into(), "condition".into()]).unwrap(), vec![Method::Condition]);
    }
}
