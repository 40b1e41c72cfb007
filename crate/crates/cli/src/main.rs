//! `repiece` command-line front end.
//!
//! Exit status: 0 ok, 2 configuration, 3 I/O or file format, 4 numeric.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use repiece::diag::{self, LayerSel};
use repiece::reduce::{ReductionConfig, StrategyKind};
use repiece::runspec::{self, RunReport, RunSpec};
use repiece::vit::{self, ModelConfig, ModelWeights, StemKind};
use repiece::{embed, par, Error, ErrorClass, Result};

#[derive(Parser)]
#[command(name = "repiece", version, about = "Vision transformer inference with token merging and pruning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Classify inputs and write one JSON report per input.
    Run(SpecArgs),
    /// Print per-layer token counts and cumulative FLOPs as CSV.
    Schedule(SpecArgs),
    /// Time forward passes on synthetic images.
    Bench(BenchArgs),
    /// Emit a diagnostic metric per input as CSV.
    Diag(DiagArgs),
    /// Top-1 accuracy under random patch masking, as CSV.
    MaskEval(MaskArgs),
    /// Write randomly initialized weights.
    Init(SpecArgs),
    /// Write smooth synthetic PPM images.
    Synth(SynthArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    DeitTiny,
    DeitSmall,
}

#[derive(Clone, Copy, ValueEnum)]
enum StemArg {
    Grid,
    Coherence,
}

#[derive(Args)]
struct SpecArgs {
    /// Run spec JSON. `init` also accepts a bare model config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Model shape when no config is given.
    #[arg(long, value_enum, conflicts_with = "config")]
    model: Option<Preset>,
    #[arg(long, value_enum, conflicts_with = "config")]
    stem: Option<StemArg>,
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Input images (.ppm or tensor container); directories are expanded.
    #[arg(long = "input", visible_alias = "inputs", value_delimiter = ',', num_args = 1..)]
    inputs: Vec<PathBuf>,
    /// JSON map from input file name to class index.
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    strategy: Option<StrategyKind>,
    /// Comma-separated values sweep in `schedule`.
    #[arg(long, value_delimiter = ',')]
    keep_rate: Vec<f64>,
    #[arg(long, value_delimiter = ',')]
    merge_ratio: Vec<f64>,
    #[arg(long, value_delimiter = ',')]
    tome_r: Vec<usize>,
    /// Non-semantic proportion p.
    #[arg(long)]
    proportion: Option<f64>,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    spec: SpecArgs,
    #[arg(long, default_value_t = 8)]
    batch: usize,
    #[arg(long, default_value_t = 20)]
    iters: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum Metric {
    /// Percent of merged tokens inside the top-q attentive set.
    Overlap,
    /// Share of the previous layer's merged tokens that left the bottom-p set.
    Inattn,
    /// Mean cosine similarity of merged pairs at the first and last merging layer.
    Similarity,
    /// Mean cosine similarity of grid-adjacent tokens straight from the stem.
    Adjacency,
}

#[derive(Args)]
struct DiagArgs {
    #[command(flatten)]
    spec: SpecArgs,
    #[arg(long, value_enum)]
    metric: Metric,
    /// Top-q percent used by the overlap metric.
    #[arg(long, default_value_t = 70.0)]
    q: f64,
}

#[derive(Args)]
struct MaskArgs {
    #[command(flatten)]
    spec: SpecArgs,
    /// Mask counts to evaluate.
    #[arg(long, value_delimiter = ',', default_values_t = [0usize, 7, 10, 15, 20, 25, 50])]
    masks: Vec<usize>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    seed: u64,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 4)]
    count: usize,
    #[arg(long, default_value_t = 224)]
    size: usize,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match configure_threads().and_then(|()| dispatch(cli.command)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.class() {
                ErrorClass::Config => 2,
                ErrorClass::Io => 3,
                ErrorClass::Numeric => 4,
            })
        }
    }
}

fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var("REPIECE_THREADS") else {
        return Ok(());
    };
    match raw.trim().parse::<usize>() {
        Ok(n) if n > 0 => {
            par::configure_threads(n);
            Ok(())
        }
        _ => Err(Error::Config(format!("REPIECE_THREADS must be a positive integer, got '{raw}'"))),
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Run(args) => cmd_run(&args),
        Command::Schedule(args) => cmd_schedule(&args),
        Command::Bench(args) => cmd_bench(&args),
        Command::Diag(args) => cmd_diag(&args),
        Command::MaskEval(args) => cmd_mask_eval(&args),
        Command::Init(args) => cmd_init(&args),
        Command::Synth(args) => cmd_synth(&args),
    }
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn single<T: Copy>(values: &[T], flag: &str) -> Result<Option<T>> {
    match values {
        [] => Ok(None),
        [v] => Ok(Some(*v)),
        _ => Err(Error::Config(format!("--{flag} takes a single value for this command"))),
    }
}

fn preset_model(args: &SpecArgs) -> ModelConfig {
    let mut cfg = match args.model.unwrap_or(Preset::DeitSmall) {
        Preset::DeitTiny => ModelConfig::deit_tiny(),
        Preset::DeitSmall => ModelConfig::deit_small(),
    };
    if let Some(StemArg::Coherence) = args.stem {
        cfg.stem = StemKind::Coherence;
    }
    cfg
}

fn expand_inputs(paths: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in paths {
        if p.is_dir() {
            let entries = std::fs::read_dir(p).map_err(|e| io_err(p, e))?;
            for entry in entries {
                let path = entry.map_err(|e| io_err(p, e))?.path();
                let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
                if path.is_file() && (ext.eq_ignore_ascii_case("ppm") || ext == "bin") {
                    out.push(path);
                }
            }
        } else {
            out.push(p.clone());
        }
    }
    Ok(out)
}

/// A run spec assembled from `--config` plus flag overrides, and the weights
/// already loaded while resolving it, if any.
struct Resolved {
    spec: RunSpec,
    weights: Option<ModelWeights>,
}

impl Resolved {
    fn weights(self) -> Result<(RunSpec, ModelWeights)> {
        let weights = match self.weights {
            Some(w) => w,
            None => self.spec.weights()?,
        };
        Ok((self.spec, weights))
    }
}

/// `resolve_base` plus the single-valued reduction overrides, validated.
fn resolve(args: &SpecArgs, needs_seed: bool) -> Result<Resolved> {
    let mut resolved = resolve_base(args, needs_seed)?;
    let r = &mut resolved.spec.reduction;
    if let Some(v) = single(&args.keep_rate, "keep-rate")? {
        r.keep_rate = v;
    }
    if let Some(v) = single(&args.merge_ratio, "merge-ratio")? {
        r.merge_ratio = v;
    }
    if let Some(v) = single(&args.tome_r, "tome-r")? {
        r.tome_reduction = v;
    }
    resolved.spec.validate()?;
    Ok(resolved)
}

/// Config file (or preset) with path, seed, strategy and proportion
/// overrides applied. Sweepable values are left alone.
fn resolve_base(args: &SpecArgs, needs_seed: bool) -> Result<Resolved> {
    let mut weights = None;
    let mut spec = match &args.config {
        Some(path) => RunSpec::load(path)?,
        None => {
            let mut model = preset_model(args);
            if let (Some(path), None, None) = (&args.weights, args.model, args.stem) {
                let w = vit::load_weights(path)?;
                model = w.config.clone();
                weights = Some(w);
            }
            if needs_seed && args.seed.is_none() {
                return Err(Error::Config("--seed is required without --config".into()));
            }
            RunSpec {
                model,
                reduction: ReductionConfig::new(args.strategy.unwrap_or(StrategyKind::Imagepiece)),
                weights: None,
                inputs: Vec::new(),
                out: None,
                seed: args.seed.unwrap_or(0),
                labels: BTreeMap::new(),
            }
        }
    };
    if let Some(w) = &args.weights {
        spec.weights = Some(w.clone());
    }
    if !args.inputs.is_empty() {
        spec.inputs = args.inputs.clone();
    }
    spec.inputs = expand_inputs(&spec.inputs)?;
    if let Some(path) = &args.labels {
        let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        spec.labels = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("labels {}: {e}", path.display())))?;
    }
    if let Some(o) = &args.out {
        spec.out = Some(o.clone());
    }
    if let Some(s) = args.seed {
        spec.seed = s;
    }
    let r = &mut spec.reduction;
    if let Some(s) = args.strategy {
        r.strategy = s;
    }
    if let Some(p) = args.proportion {
        r.nonsemantic_proportion = p;
    }
    Ok(Resolved { spec, weights })
}

fn require_inputs(spec: &RunSpec) -> Result<Vec<PathBuf>> {
    let inputs = spec.sorted_inputs();
    if inputs.is_empty() {
        return Err(Error::Config("no inputs: pass --input or list them in the config".into()));
    }
    Ok(inputs)
}

#[derive(Serialize)]
struct RunSummaryRow {
    input: String,
    prediction: usize,
    label: Option<usize>,
    final_output_tokens: usize,
}

#[derive(Serialize)]
struct RunSummary {
    strategy: StrategyKind,
    results: Vec<RunSummaryRow>,
    correct: usize,
    labeled: usize,
    accuracy: Option<f64>,
}

fn cmd_run(args: &SpecArgs) -> Result<()> {
    let (spec, weights) = resolve(args, true)?.weights()?;
    let inputs = require_inputs(&spec)?;
    let mut names = BTreeMap::new();
    for p in &inputs {
        let stem = p.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
        if let Some(prev) = names.insert(stem.clone(), p) {
            return Err(Error::Config(format!(
                "{} and {} would both write {stem}.json",
                prev.display(),
                p.display()
            )));
        }
    }
    let reports: Vec<RunReport> = par::map_slice(&inputs, |p| runspec::run_input(&spec, &weights, p))
        .into_iter()
        .collect::<Result<_>>()?;
    if let Some(dir) = &spec.out {
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        for (path, report) in inputs.iter().zip(&reports) {
            let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
            let target = dir.join(format!("{stem}.json"));
            std::fs::write(&target, report.to_json() + "\n").map_err(|e| io_err(&target, e))?;
        }
    }
    let labeled: Vec<&RunReport> = reports.iter().filter(|r| r.label.is_some()).collect();
    let correct = labeled.iter().filter(|r| r.label == Some(r.prediction)).count();
    let summary = RunSummary {
        strategy: spec.reduction.strategy,
        results: reports
            .iter()
            .map(|r| RunSummaryRow {
                input: r.input.clone(),
                prediction: r.prediction,
                label: r.label,
                final_output_tokens: r.diag.final_output_tokens,
            })
            .collect(),
        correct,
        labeled: labeled.len(),
        accuracy: (!labeled.is_empty()).then(|| 100.0 * correct as f64 / labeled.len() as f64),
    };
    println!("{}", serde_json::to_string_pretty(&summary).expect("summary serializes"));
    Ok(())
}

fn cmd_schedule(args: &SpecArgs) -> Result<()> {
    let base = resolve_base(args, false)?.spec;
    base.validate()?;
    let cfg = &base.model;
    let pick = |given: &[f64], fallback: f64| if given.is_empty() { vec![fallback] } else { given.to_vec() };
    let keep_rates = pick(&args.keep_rate, base.reduction.keep_rate);
    let merge_ratios = pick(&args.merge_ratio, base.reduction.merge_ratio);
    let tome_rs = if args.tome_r.is_empty() {
        vec![base.reduction.tome_reduction]
    } else {
        args.tome_r.clone()
    };
    println!("strategy,keep_rate,merge_ratio,tome_r,layer,tokens,flops_cum");
    for &keep_rate in &keep_rates {
        for &merge_ratio in &merge_ratios {
            for &tome_reduction in &tome_rs {
                let rcfg = ReductionConfig {
                    keep_rate,
                    merge_ratio,
                    tome_reduction,
                    ..base.reduction.clone()
                };
                rcfg.validate(cfg.depth)?;
                let schedule = diag::token_schedule(cfg, &rcfg);
                for (layer, tokens, flops) in diag::schedule_rows(cfg, &schedule) {
                    println!(
                        "{},{keep_rate},{merge_ratio},{tome_reduction},{layer},{tokens},{flops}",
                        rcfg.strategy
                    );
                }
            }
        }
    }
    Ok(())
}

fn cmd_bench(args: &BenchArgs) -> Result<()> {
    let (spec, weights) = resolve(&args.spec, true)?.weights()?;
    let report = diag::bench(&weights, &spec.reduction, args.batch, args.iters, spec.seed)?;
    println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
    Ok(())
}

fn cmd_diag(args: &DiagArgs) -> Result<()> {
    if !(0.0..=100.0).contains(&args.q) {
        return Err(Error::Config(format!("q must lie in [0, 100], got {}", args.q)));
    }
    let (spec, weights) = resolve(&args.spec, true)?.weights()?;
    let inputs = require_inputs(&spec)?;
    let rows = par::map_slice(&inputs, |path| -> Result<Vec<(String, String)>> {
        let image = vit::load_image(path)?;
        if let Metric::Adjacency = args.metric {
            let batch = vit::embed_patches(&weights, &image)?;
            return Ok(vec![("embed".into(), diag::adjacency_similarity(&batch)?.to_string())]);
        }
        let (_, run) = vit::classify(&weights, &image, &spec.reduction)?;
        Ok(match args.metric {
            Metric::Overlap => vec![(String::new(), diag::merged_topk_overlap(&run, args.q).to_string())],
            Metric::Inattn => run
                .per_layer
                .iter()
                .filter_map(|l| l.inattn_to_attn.map(|r| (l.layer.to_string(), r.to_string())))
                .collect(),
            Metric::Similarity => [("first", LayerSel::First), ("last", LayerSel::Last)]
                .into_iter()
                .filter_map(|(name, sel)| diag::merged_pair_similarity(&run, sel).map(|v| (name.into(), v.to_string())))
                .collect(),
            Metric::Adjacency => unreachable!(),
        })
    });
    let metric = args.metric.to_possible_value().expect("named metric");
    println!("input,metric,layer,value");
    for (path, rows) in inputs.iter().zip(rows) {
        for (layer, value) in rows? {
            println!("{},{},{layer},{value}", path.display(), metric.get_name());
        }
    }
    Ok(())
}

fn cmd_mask_eval(args: &MaskArgs) -> Result<()> {
    let (spec, weights) = resolve(&args.spec, true)?.weights()?;
    let inputs = require_inputs(&spec)?;
    let mut images = Vec::with_capacity(inputs.len());
    for path in &inputs {
        let label = spec
            .label_for(path)
            .ok_or_else(|| Error::Config(format!("no label for {}", path.display())))?;
        images.push((vit::load_image(path)?, label));
    }
    println!("masks,correct,total,accuracy");
    for row in diag::mask_eval(&weights, &spec.reduction, &images, &args.masks, spec.seed)? {
        println!("{},{},{},{}", row.masks, row.correct, row.total, row.accuracy);
    }
    Ok(())
}

fn cmd_init(args: &SpecArgs) -> Result<()> {
    let seed = args
        .seed
        .ok_or_else(|| Error::Config("--seed is required for init".into()))?;
    let out = args
        .out
        .as_ref()
        .ok_or_else(|| Error::Config("--out is required for init".into()))?;
    let model = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
            let value: serde_json::Value = serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            if value.get("model").is_some() {
                RunSpec::parse(&text)?.model
            } else {
                serde_json::from_value(value).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
            }
        }
        None => preset_model(args),
    };
    let weights = vit::init_random(&model, seed)?;
    vit::save_weights(&weights, out)?;
    println!("{}", out.display());
    Ok(())
}

fn cmd_synth(args: &SynthArgs) -> Result<()> {
    if args.size == 0 {
        return Err(Error::Config("--size must be positive".into()));
    }
    std::fs::create_dir_all(&args.out).map_err(|e| io_err(&args.out, e))?;
    for i in 0..args.count {
        let path = args.out.join(format!("synth_{i:03}.ppm"));
        let image = embed::synthetic_smooth_image(args.size, args.size, args.seed.wrapping_add(i as u64));
        embed::write_ppm(&path, &image)?;
        println!("{}", path.display());
    }
    Ok(())
}
