//! Command-line front end: fixed merging, adaptive inference, synthetic
//! evaluation, routing-layer sweeps, and artifact inspection.
//!
//! Logs go to stderr, data to stdout or `--out`. Every command is
//! deterministic given its flags and seeds. Flag precedence:
//! flags > config file (JSON) > defaults.

use clap::{Args, Parser, Subcommand};
use mass::checkpoint::{read_checkpoint, read_container, write_checkpoint, Checkpoint, Head};
use mass::engine::{EngineConfig, MassEngine, MergeMode};
use mass::error::{Error, Result};
use mass::harness::{
    evaluate, gen_synthetic_suite, layer_sweep, EvalConfig, SuiteConfig, METHODS,
};
use mass::merge::{tsv_merge, RankPolicy};
use mass::router::RouterConfig;
use mass::subspace::{
    decompose_task, default_rank, filter_redundant, read_bundles, write_bundles, BundleStore,
    FilterScope, TaskSubspaceBundle,
};
use serde::Deserialize;
use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "mass", version, about = "Merge fine-tuned checkpoints and route inference through adaptive subspace selection")]
struct Cli {
    /// JSON config file; flags override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads (default: available parallelism).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fixed merge: filter redundant tasks, decompose, merge, serialize.
    Merge(MergeArgs),
    /// Two-pass adaptive inference over a JSON-lines input stream.
    Infer(InferArgs),
    /// Evaluate merge methods on a generated synthetic suite.
    Eval(EvalArgs),
    /// Routing accuracy per candidate layer, as CSV.
    Sweep(SweepArgs),
    /// Shapes, delta spectra, and storage totals of an artifact.
    Inspect(InspectArgs),
}

#[derive(Args)]
struct MergeArgs {
    /// Pretrained checkpoint (.mtsv).
    #[arg(long)]
    pre: PathBuf,
    /// Fine-tuned task checkpoints (.mtsv).
    #[arg(long, num_args = 1.., required = true)]
    tasks: Vec<PathBuf>,
    /// Merged checkpoint output path; the bundle store and provenance are
    /// written next to it as <out>.bundles.mtsv and <out>.provenance.json.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    alpha: Option<f64>,
    /// Redundancy filter threshold.
    #[arg(long)]
    epsilon: Option<f64>,
    /// Truncation rank (default: min(m, n) / T per layer).
    #[arg(long)]
    rank: Option<usize>,
    #[arg(long, value_parser = ["global", "per-layer"])]
    filter_scope: Option<String>,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    pre: PathBuf,
    /// Fixed merged checkpoint.
    #[arg(long)]
    merged: PathBuf,
    /// Bundle store with per-task factors and heads.
    #[arg(long)]
    bundles: PathBuf,
    /// JSON-lines input: {"id": ..., "values": [...]} per line.
    #[arg(long)]
    inputs: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Route and merge once for the whole input file.
    #[arg(long)]
    batched: bool,
    #[arg(long)]
    alpha: Option<f64>,
    /// Gate threshold.
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    topk: Option<usize>,
    #[arg(long)]
    temperature: Option<f64>,
    /// Routing layer (default: the last layer).
    #[arg(long)]
    layer: Option<String>,
    #[arg(long, value_parser = ["tsv", "plain-sum"])]
    merge_mode: Option<String>,
    /// Restrict the router to the admitted set from a provenance file.
    #[arg(long, value_parser = ["all", "admitted-only"])]
    candidates: Option<String>,
    /// Provenance JSON (needed for --candidates admitted-only; default
    /// <merged>.provenance.json).
    #[arg(long)]
    provenance: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Suite kind; only "synthetic" is available.
    #[arg(long, default_value = "synthetic")]
    suite: String,
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated method tags.
    #[arg(long, default_value = "mass")]
    methods: String,
    #[arg(long)]
    out: Option<PathBuf>,
    /// "json" (machine) or "text" (aligned columns).
    #[arg(long, default_value = "json", value_parser = ["json", "text"])]
    format: String,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    rank: Option<usize>,
    #[arg(long)]
    topk: Option<usize>,
    #[arg(long)]
    temperature: Option<f64>,
    #[command(flatten)]
    suite_knobs: SuiteKnobs,
}

#[derive(Args)]
struct SuiteKnobs {
    /// Number of planted tasks.
    #[arg(long)]
    tasks_count: Option<usize>,
    /// Comma-separated layer widths.
    #[arg(long)]
    widths: Option<String>,
    /// Input noise level.
    #[arg(long)]
    sigma: Option<f64>,
    /// Pairwise subspace overlap.
    #[arg(long)]
    rho: Option<f64>,
    /// Cross-task delta leakage.
    #[arg(long)]
    nu: Option<f64>,
    #[arg(long)]
    samples_per_task: Option<usize>,
    /// Planted routing layer index.
    #[arg(long)]
    plant_layer: Option<usize>,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long, default_value = "synthetic")]
    suite: String,
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated layer indices (default: all layers).
    #[arg(long)]
    layers: Option<String>,
    #[arg(long)]
    rank: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    suite_knobs: SuiteKnobs,
}

#[derive(Args)]
struct InspectArgs {
    /// Checkpoint or bundle store (.mtsv).
    file: PathBuf,
    /// Pretrained checkpoint to compute the storage ratio against.
    #[arg(long)]
    pre: Option<PathBuf>,
}

/// Defaults loadable from `--config`; any present field becomes the new
/// default for the matching flag.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    alpha: Option<f64>,
    epsilon: Option<f64>,
    eta: Option<f64>,
    rank: Option<usize>,
    topk: Option<usize>,
    temperature: Option<f64>,
    layer: Option<String>,
    seed: Option<u64>,
    merge_mode: Option<MergeMode>,
    threads: Option<usize>,
}

fn load_file_config(path: Option<&Path>) -> Result<FileConfig> {
    let Some(path) = path else {
        return Ok(FileConfig::default());
    };
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    serde_json::from_str(&text)
        .map_err(|e| Error::BadHeader(format!("config {}: {e}", path.display())))
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    let file_cfg = load_file_config(cli.config.as_deref())?;
    let threads = cli.threads.or(file_cfg.threads);
    if let Some(n) = threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
    }
    match cli.command {
        Command::Merge(args) => cmd_merge(args, &file_cfg),
        Command::Infer(args) => cmd_infer(args, &file_cfg),
        Command::Eval(args) => cmd_eval(args, &file_cfg),
        Command::Sweep(args) => cmd_sweep(args, &file_cfg),
        Command::Inspect(args) => cmd_inspect(args),
    }
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

/// The task's classification head: a head named after the task if there is
/// one, otherwise the checkpoint's single head.
fn pick_head(c: &Checkpoint, task_id: &str) -> Result<Head> {
    if let Some(h) = c.heads.iter().find(|h| h.name == task_id) {
        return Ok(h.clone());
    }
    match c.heads.len() {
        1 => Ok(c.heads[0].clone()),
        0 => Err(Error::Topology(format!(
            "task checkpoint {task_id:?} carries no classification head"
        ))),
        n => Err(Error::Topology(format!(
            "task checkpoint {task_id:?} carries {n} heads and none is named {task_id:?}"
        ))),
    }
}

fn cmd_merge(args: MergeArgs, file_cfg: &FileConfig) -> Result<()> {
    let alpha = args.alpha.or(file_cfg.alpha).unwrap_or(1.0);
    let epsilon = args.epsilon.or(file_cfg.epsilon).unwrap_or(0.3);
    let rank = args.rank.or(file_cfg.rank);
    let scope = match args.filter_scope.as_deref() {
        Some("per-layer") => FilterScope::PerLayer,
        _ => FilterScope::Global,
    };

    let pre = read_checkpoint(&args.pre)?;
    let mut deltas = Vec::new();
    let mut heads = Vec::new();
    for path in &args.tasks {
        let ft = read_checkpoint(path)?;
        let task_id = stem(path);
        heads.push(pick_head(&ft, &task_id)?);
        deltas.push(mass::checkpoint::delta(&task_id, &ft, &pre)?);
    }

    let admitted = filter_redundant(&deltas, epsilon, scope)?;
    eprintln!(
        "admitted {} of {} tasks (epsilon {epsilon})",
        admitted.len(),
        deltas.len()
    );
    let tasks = deltas.len();
    let bundles: Vec<TaskSubspaceBundle> = deltas
        .iter()
        .map(|d| {
            decompose_task(d, |_, w| {
                rank.map(|k| k.min(w.rows().min(w.cols())))
                    .unwrap_or_else(|| default_rank(w.rows(), w.cols(), tasks))
            })
        })
        .collect::<Result<_>>()?;
    let admitted_bundles: Vec<TaskSubspaceBundle> =
        admitted.iter().map(|&i| bundles[i].clone()).collect();

    let mut merged = tsv_merge(&pre, &admitted_bundles, alpha, RankPolicy::UniformReduce)?;
    merged.provenance.epsilon = Some(epsilon);
    merged.provenance.admitted = admitted.clone();

    write_checkpoint(&merged.weights, &args.out)?;
    let bundle_path = args.out.with_extension("bundles.mtsv");
    let prov_path = args.out.with_extension("provenance.json");
    let mut meta = BTreeMap::new();
    meta.insert("alpha".to_string(), alpha.to_string());
    meta.insert("epsilon".to_string(), epsilon.to_string());
    write_bundles(
        &BundleStore {
            bundles,
            heads,
            meta,
        },
        &bundle_path,
    )?;
    let prov = serde_json::to_string_pretty(&merged.provenance)
        .map_err(|e| Error::BadHeader(format!("provenance: {e}")))?;
    std::fs::write(&prov_path, prov).map_err(|e| Error::Io {
        path: prov_path.display().to_string(),
        source: e,
    })?;

    let mut out = std::io::stdout().lock();
    writeln!(out, "admitted set M: {admitted:?}").ok();
    if let Some(first) = admitted_bundles.first() {
        for layer in &first.layers {
            writeln!(out, "layer {} rank {}", layer.name, layer.rank()).ok();
        }
    }
    writeln!(out, "wrote {}", args.out.display()).ok();
    writeln!(out, "wrote {}", bundle_path.display()).ok();
    writeln!(out, "wrote {}", prov_path.display()).ok();
    Ok(())
}

#[derive(Deserialize)]
struct InputLine {
    id: serde_json::Value,
    values: Vec<f64>,
}

fn cmd_infer(args: InferArgs, file_cfg: &FileConfig) -> Result<()> {
    let pre = read_checkpoint(&args.pre)?;
    let merged = read_checkpoint(&args.merged)?;
    let store = read_bundles(&args.bundles)?;

    let layer = args
        .layer
        .clone()
        .or(file_cfg.layer.clone())
        .unwrap_or_else(|| merged.layers.last().map(|l| l.name.clone()).unwrap_or_default());
    let mut router = RouterConfig::new(&layer);
    router.eta = args.eta.or(file_cfg.eta).unwrap_or(router.eta);
    router.route_top_k = args.topk.or(file_cfg.topk).unwrap_or(router.route_top_k);
    router.temperature = args
        .temperature
        .or(file_cfg.temperature)
        .unwrap_or(router.temperature);
    let mut cfg = EngineConfig::new(router);
    cfg.alpha = args.alpha.or(file_cfg.alpha).unwrap_or(cfg.alpha);
    cfg.merge_mode = match args.merge_mode.as_deref() {
        Some("plain-sum") => MergeMode::PlainSum,
        Some(_) => MergeMode::Tsv,
        None => file_cfg.merge_mode.unwrap_or(cfg.merge_mode),
    };
    if args.candidates.as_deref() == Some("admitted-only") {
        let prov_path = args
            .provenance
            .clone()
            .unwrap_or_else(|| args.merged.with_extension("provenance.json"));
        let text = std::fs::read_to_string(&prov_path).map_err(|e| Error::Io {
            path: prov_path.display().to_string(),
            source: e,
        })?;
        let prov: mass::merge::Provenance = serde_json::from_str(&text)
            .map_err(|e| Error::BadHeader(format!("provenance {}: {e}", prov_path.display())))?;
        cfg.candidates = Some(prov.admitted);
    }
    let engine = MassEngine::new(pre, merged, store.bundles, store.heads, cfg)?;

    let input = std::fs::File::open(&args.inputs).map_err(|e| Error::Io {
        path: args.inputs.display().to_string(),
        source: e,
    })?;
    let mut lines = Vec::new();
    for (no, line) in std::io::BufReader::new(input).lines().enumerate() {
        let line = line.map_err(|e| Error::Io {
            path: args.inputs.display().to_string(),
            source: e,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: InputLine = serde_json::from_str(&line)
            .map_err(|e| Error::BadHeader(format!("input line {}: {e}", no + 1)))?;
        lines.push(parsed);
    }

    let mut sink: Box<dyn Write> = match &args.out {
        Some(path) => Box::new(std::fs::File::create(path).map_err(|e| Error::Io {
            path: path.display().to_string(),
            source: e,
        })?),
        None => Box::new(std::io::stdout().lock()),
    };
    let mut merges_logged = 0;
    let mut emit = |line: &InputLine, p: &mass::engine::Prediction| -> Result<()> {
        let record = serde_json::json!({
            "input_id": line.id,
            "selected_tasks": p.decision.selected,
            "task_weights": p.decision.weights,
            "predicted_task": p.task,
            "predicted_class": p.class,
            "logit": p.logit,
        });
        writeln!(sink, "{record}").map_err(|e| Error::Io {
            path: args.out.as_ref().map(|p| p.display().to_string()).unwrap_or_else(|| "stdout".into()),
            source: e,
        })
    };

    if args.batched {
        let batch: Vec<Vec<f64>> = lines.iter().map(|l| l.values.clone()).collect();
        let preds = engine.classify_batched(&batch).map_err(|e| {
            Error::InvalidConfig(format!("batched inference over {}: {e}", args.inputs.display()))
        })?;
        log_new_merges(&engine, &mut merges_logged, &preds[0].decision.selected);
        for (line, p) in lines.iter().zip(&preds) {
            emit(line, p)?;
        }
    } else {
        for line in &lines {
            let p = engine.classify(&line.values).map_err(|e| {
                Error::InvalidConfig(format!("sample {}: {e}", line.id))
            })?;
            log_new_merges(&engine, &mut merges_logged, &p.decision.selected);
            emit(line, &p)?;
        }
    }
    eprintln!(
        "classified {} samples, {} distinct adaptive merges",
        lines.len(),
        engine.stats().adaptive_merges
    );
    Ok(())
}

fn log_new_merges(engine: &MassEngine, logged: &mut u64, selected: &[usize]) {
    let total = engine.stats().adaptive_merges;
    if total > *logged {
        *logged = total;
        eprintln!("adaptive_merge selected={selected:?}");
    }
}

fn suite_config(
    seed: Option<u64>,
    file_cfg: &FileConfig,
    knobs: &SuiteKnobs,
) -> Result<SuiteConfig> {
    let mut cfg = SuiteConfig {
        seed: seed.or(file_cfg.seed).unwrap_or(0),
        ..SuiteConfig::default()
    };
    if let Some(t) = knobs.tasks_count {
        cfg.tasks = t;
    }
    if let Some(w) = &knobs.widths {
        cfg.widths = w
            .split(',')
            .map(|p| {
                p.trim()
                    .parse()
                    .map_err(|_| Error::InvalidConfig(format!("bad width {p:?}")))
            })
            .collect::<Result<_>>()?;
        cfg.routing_layer = cfg.widths.len() - 1;
    }
    if let Some(s) = knobs.sigma {
        cfg.noise = s;
    }
    if let Some(r) = knobs.rho {
        cfg.overlap = r;
    }
    if let Some(n) = knobs.nu {
        cfg.delta_noise = n;
    }
    if let Some(s) = knobs.samples_per_task {
        cfg.samples_per_task = s;
    }
    if let Some(l) = knobs.plant_layer {
        cfg.routing_layer = l;
    }
    Ok(cfg)
}

fn require_synthetic(kind: &str) -> Result<()> {
    if kind != "synthetic" {
        return Err(Error::InvalidConfig(format!(
            "unsupported suite {kind:?}; only \"synthetic\" is available"
        )));
    }
    Ok(())
}

fn write_or_stdout(out: Option<&Path>, data: &str) -> Result<()> {
    match out {
        Some(path) => std::fs::write(path, data).map_err(|e| Error::Io {
            path: path.display().to_string(),
            source: e,
        }),
        None => {
            print!("{data}");
            Ok(())
        }
    }
}

fn cmd_eval(args: EvalArgs, file_cfg: &FileConfig) -> Result<()> {
    require_synthetic(&args.suite)?;
    let methods: Vec<&str> = args.methods.split(',').map(str::trim).collect();
    for m in &methods {
        if !METHODS.contains(m) {
            return Err(Error::UnknownMethod(format!(
                "{m} (known: {})",
                METHODS.join(", ")
            )));
        }
    }
    let suite = gen_synthetic_suite(&suite_config(args.seed, file_cfg, &args.suite_knobs)?)?;
    let mut cfg = EvalConfig::default();
    cfg.alpha = args.alpha.or(file_cfg.alpha).unwrap_or(cfg.alpha);
    cfg.epsilon = args.epsilon.or(file_cfg.epsilon).unwrap_or(cfg.epsilon);
    cfg.eta = args.eta.or(file_cfg.eta).unwrap_or(cfg.eta);
    cfg.route_top_k = args.topk.or(file_cfg.topk).unwrap_or(cfg.route_top_k);
    cfg.temperature = args
        .temperature
        .or(file_cfg.temperature)
        .unwrap_or(cfg.temperature);
    cfg.rank = args.rank.or(file_cfg.rank);

    let reports = methods
        .iter()
        .map(|m| evaluate(&suite, m, &cfg))
        .collect::<Result<Vec<_>>>()?;
    let rendered = match args.format.as_str() {
        "text" => reports.iter().map(|r| r.to_text()).collect::<Vec<_>>().join("\n"),
        _ => {
            let mut s = serde_json::to_string_pretty(&reports)
                .map_err(|e| Error::BadHeader(format!("report: {e}")))?;
            s.push('\n');
            s
        }
    };
    write_or_stdout(args.out.as_deref(), &rendered)
}

fn cmd_sweep(args: SweepArgs, file_cfg: &FileConfig) -> Result<()> {
    require_synthetic(&args.suite)?;
    let suite = gen_synthetic_suite(&suite_config(args.seed, file_cfg, &args.suite_knobs)?)?;
    let rank = args.rank.or(file_cfg.rank).unwrap_or(suite.config.rank);
    let bundles = suite.bundles(rank)?;
    let layers: Vec<usize> = match &args.layers {
        Some(list) => list
            .split(',')
            .map(|p| {
                p.trim()
                    .parse()
                    .map_err(|_| Error::InvalidConfig(format!("bad layer index {p:?}")))
            })
            .collect::<Result<_>>()?,
        None => (0..suite.pre.layers.len()).collect(),
    };
    let table = layer_sweep(&suite, &bundles, &layers)?;
    write_or_stdout(args.out.as_deref(), &table.to_csv())
}

fn file_size(path: &Path) -> Result<u64> {
    std::fs::metadata(path)
        .map(|m| m.len())
        .map_err(|e| Error::Io {
            path: path.display().to_string(),
            source: e,
        })
}

fn cmd_inspect(args: InspectArgs) -> Result<()> {
    let container = read_container(&args.file)?;
    let bytes = file_size(&args.file)?;
    let mut out = std::io::stdout().lock();
    let is_bundle = container.tensors.iter().any(|t| t.role == "tsv_s");
    let kind = if is_bundle { "bundle store" } else { "checkpoint" };
    writeln!(out, "{}: {kind}, {bytes} bytes", args.file.display()).ok();
    if is_bundle {
        for t in &container.tensors {
            if t.role != "tsv_s" {
                continue;
            }
            let sigma: Vec<String> = t
                .to_matrix()?
                .data()
                .iter()
                .map(|s| format!("{s:.4}"))
                .collect();
            writeln!(out, "{}  k={}  sigma=[{}]", t.name, sigma.len(), sigma.join(", ")).ok();
        }
    } else {
        for t in &container.tensors {
            writeln!(
                out,
                "{}  role={}  shape=({}, {})  {} bytes",
                t.name,
                t.role,
                t.rows,
                t.cols,
                t.data.len() * 4
            )
            .ok();
        }
    }
    if let Some(pre) = &args.pre {
        let pre_bytes = file_size(pre)?;
        let ratio = (bytes + pre_bytes) as f64 / pre_bytes as f64;
        writeln!(out, "pretrained bytes: {pre_bytes}").ok();
        writeln!(out, "storage ratio (pre + this)/pre: {ratio:.3}").ok();
    }
    Ok(())
}
