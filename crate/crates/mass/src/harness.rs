//! Synthetic multi-task benchmark with planted subspaces.
//!
//! Real fine-tuning is replaced by construction: each task's delta is
//! planted at a designated routing layer as `G_i B_i^T`, where `B_i` spans
//! a known right subspace and `G_i` is chosen so that in-subspace inputs
//! land exactly on that task's head codes. Ground truth is therefore known,
//! routing correctness is decidable, and every quantity the metrics need
//! (per-task accuracy, normalized accuracy against the fine-tuned
//! reference, routing accuracy, per-layer sweeps) can be measured without
//! any datasets.

use crate::checkpoint::{Activation, Checkpoint, Head, Layer, TaskDelta, DeltaLayer};
use crate::engine::{forward, EngineConfig, MassEngine, MergeMode};
use crate::error::{Error, Result};
use crate::linalg::{orthogonalize, Matrix};
use crate::merge::{task_arithmetic_merge, tsv_merge, weight_average, RankPolicy};
use crate::router::RouterConfig;
use crate::subspace::{decompose_task, filter_redundant, FilterScope, TaskSubspaceBundle};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

// ── Suite generation ────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteConfig {
    pub seed: u64,
    /// Number of planted tasks.
    pub tasks: usize,
    /// Output width of each dense layer; the input width equals `widths[0]`.
    pub widths: Vec<usize>,
    /// Planted subspace rank per task; also the number of classes per task.
    pub rank: usize,
    pub samples_per_task: usize,
    /// Relative input noise level (sigma).
    pub noise: f64,
    /// Pairwise cosine between planted subspaces across tasks (rho).
    pub overlap: f64,
    /// Cross-task low-rank leakage injected into every delta (nu). Real
    /// fine-tuning runs share gradients across related tasks; without some
    /// leakage every baseline that sums untruncated deltas would be exact
    /// on this benchmark and the merge comparisons would be vacuous.
    pub delta_noise: f64,
    /// Layer index the deltas are planted at.
    pub routing_layer: usize,
    /// Additionally plant the given task's subspace structure at another
    /// layer: `(layer index, task index)`. Routing-study knob; it perturbs
    /// that task's forward map, so classification is no longer exact.
    pub extra_plant: Option<(usize, usize)>,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            tasks: 4,
            widths: vec![32, 32, 32],
            rank: 4,
            samples_per_task: 100,
            noise: 0.1,
            overlap: 0.0,
            delta_noise: 0.02,
            routing_layer: 2,
            extra_plant: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub input: Vec<f64>,
    pub task: usize,
    pub class: usize,
}

/// A generated benchmark: pretrained stack, per-task deltas and heads,
/// labeled samples, and the planted ground-truth bases.
#[derive(Debug, Clone)]
pub struct SyntheticSuite {
    pub pre: Checkpoint,
    pub deltas: Vec<TaskDelta>,
    pub fine_tuned: Vec<Checkpoint>,
    pub heads: Vec<Head>,
    /// Task-major: samples of task `i` occupy `i*spt .. (i+1)*spt`.
    pub samples: Vec<Sample>,
    /// Planted right-subspace basis per task at the routing layer.
    pub planted_bases: Vec<Matrix>,
    pub config: SuiteConfig,
}

impl SyntheticSuite {
    pub fn routing_layer_name(&self) -> String {
        layer_name(self.config.routing_layer)
    }

    /// Truncated factor bundles for every task at the given rank.
    pub fn bundles(&self, rank: usize) -> Result<Vec<TaskSubspaceBundle>> {
        self.deltas
            .iter()
            .map(|d| decompose_task(d, |_, w| rank.min(w.rows().min(w.cols()))))
            .collect()
    }

    /// FNV-1a over the config and all generated tensors; two invocations
    /// with the same seed hash identically.
    pub fn fingerprint(&self) -> String {
        let mut h: u64 = 0xcbf29ce484222325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        };
        eat(format!("{:?}", self.config).as_bytes());
        for l in &self.pre.layers {
            for &x in l.weights.data() {
                eat(&x.to_le_bytes());
            }
        }
        for d in &self.deltas {
            for dl in &d.layers {
                for &x in dl.weights.data() {
                    eat(&x.to_le_bytes());
                }
            }
        }
        for s in &self.samples {
            eat(&s.task.to_le_bytes());
            eat(&s.class.to_le_bytes());
            for &x in &s.input {
                eat(&x.to_le_bytes());
            }
        }
        format!("{h:016x}")
    }
}

fn layer_name(idx: usize) -> String {
    format!("layer{idx}")
}

/// One standard normal draw (Box-Muller).
fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Nearest matrix with orthonormal columns (rows when `rows < cols`) to a
/// Gaussian draw.
fn random_orthonormal(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Result<Matrix> {
    let g = Matrix::from_fn(rows.max(cols), rows.min(cols), |_, _| gauss(rng) as f32);
    let q = orthogonalize(&g)?;
    Ok(if rows >= cols { q } else { q.transpose() })
}

fn validate_suite_config(cfg: &SuiteConfig) -> Result<()> {
    if cfg.tasks == 0 || cfg.rank == 0 || cfg.samples_per_task == 0 || cfg.widths.is_empty() {
        return Err(Error::InvalidConfig(
            "tasks, rank, samples_per_task, and widths must all be non-empty/positive".into(),
        ));
    }
    if !(0.0..1.0).contains(&cfg.overlap) {
        return Err(Error::InvalidConfig(format!(
            "overlap must be in [0, 1), got {}",
            cfg.overlap
        )));
    }
    if cfg.noise < 0.0 || cfg.delta_noise < 0.0 {
        return Err(Error::InvalidConfig(
            "noise levels must be non-negative".into(),
        ));
    }
    let l = cfg.widths.len();
    if cfg.routing_layer >= l {
        return Err(Error::InvalidConfig(format!(
            "routing_layer {} out of range for {} layers",
            cfg.routing_layer, l
        )));
    }
    let n0 = cfg.widths[0];
    let needed = if cfg.overlap > 0.0 {
        (cfg.tasks + 1) * cfg.rank
    } else {
        cfg.tasks * cfg.rank
    };
    if needed > n0 {
        return Err(Error::InvalidRank {
            k: needed,
            max: n0,
        });
    }
    if cfg.tasks * cfg.rank > cfg.widths[cfg.routing_layer] {
        return Err(Error::InvalidRank {
            k: cfg.tasks * cfg.rank,
            max: cfg.widths[cfg.routing_layer],
        });
    }
    // The planted-subspace algebra pushes input-space bases through the
    // stack; every factor on either side of the routing layer must have
    // orthonormal columns, which needs non-contracting widths.
    for i in 1..l {
        if i != cfg.routing_layer && cfg.widths[i] < cfg.widths[i - 1] {
            return Err(Error::InvalidConfig(format!(
                "widths must be non-contracting away from the routing layer; \
                 layer {i} maps {} -> {}",
                cfg.widths[i - 1],
                cfg.widths[i]
            )));
        }
    }
    if let Some((layer, task)) = cfg.extra_plant {
        if layer >= l || layer == cfg.routing_layer || task >= cfg.tasks {
            return Err(Error::InvalidConfig(format!(
                "extra_plant ({layer}, {task}) must name a non-routing layer and a valid task"
            )));
        }
    }
    Ok(())
}

/// Generate a suite. Bit-identical for equal configs.
pub fn gen_synthetic_suite(cfg: &SuiteConfig) -> Result<SyntheticSuite> {
    validate_suite_config(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let t = cfg.tasks;
    let r = cfg.rank;
    let n0 = cfg.widths[0];
    let l_star = cfg.routing_layer;

    let mut layers = Vec::with_capacity(cfg.widths.len());
    for (i, &w) in cfg.widths.iter().enumerate() {
        let cols = if i == 0 { n0 } else { cfg.widths[i - 1] };
        layers.push(Layer {
            name: layer_name(i),
            weights: random_orthonormal(&mut rng, w, cols)?,
            bias: None,
            activation: Activation::Identity,
        });
    }

    // Input-space bases with the requested pairwise overlap: mix each
    // task's private orthonormal block with one shared block.
    let basis = random_orthonormal(&mut rng, n0, n0)?;
    let shared_start = t * r;
    let input_bases: Vec<Matrix> = (0..t)
        .map(|i| {
            Matrix::from_fn(n0, r, |row, j| {
                let private = basis.get(row, i * r + j) as f64;
                if cfg.overlap > 0.0 {
                    let shared = basis.get(row, shared_start + j) as f64;
                    ((1.0 - cfg.overlap).sqrt() * private + cfg.overlap.sqrt() * shared) as f32
                } else {
                    private as f32
                }
            })
        })
        .collect();

    // Push the bases through the prefix to the routing layer's input.
    let mut prefix = Matrix::identity(n0);
    for layer in layers.iter().take(l_star) {
        prefix = layer.weights.matmul(&prefix)?;
    }
    let planted_bases: Vec<Matrix> = input_bases
        .iter()
        .map(|c| prefix.matmul(c))
        .collect::<Result<_>>()?;

    // Per-task head codes in the routing layer's output space, mapped to
    // the final representation through the suffix product.
    let d_out = cfg.widths[l_star];
    let code_basis = random_orthonormal(&mut rng, d_out, d_out)?;
    let codes: Vec<Matrix> = (0..t)
        .map(|i| code_basis.column_block(i * r, r))
        .collect();
    let mut suffix = Matrix::identity(d_out);
    for layer in layers.iter().skip(l_star + 1) {
        suffix = layer.weights.matmul(&suffix)?;
    }

    const HEAD_GAIN: f32 = 4.0;
    let heads: Vec<Head> = codes
        .iter()
        .enumerate()
        .map(|(i, n_i)| {
            let m_i = suffix.matmul(n_i)?;
            Ok(Head {
                name: format!("task{i}"),
                weights: m_i.transpose().scale(HEAD_GAIN as f64),
                bias: vec![0.0; r],
            })
        })
        .collect::<Result<_>>()?;

    let mut pre = Checkpoint {
        layers,
        heads: heads.clone(),
        meta: std::collections::BTreeMap::new(),
    };
    pre.meta.insert("suite_seed".into(), cfg.seed.to_string());
    pre.validate()?;

    // Planted deltas: (N_i - W B_i) B_i^T sends B_i a to the head codes
    // exactly, plus the cross-task leakage term.
    let w_star = &pre.layers[l_star].weights;
    let mut deltas = Vec::with_capacity(t);
    for i in 0..t {
        let wb = w_star.matmul(&planted_bases[i])?;
        let g_i = codes[i].add_scaled(&wb, -1.0)?;
        let mut planted = g_i.matmul(&planted_bases[i].transpose())?;
        if cfg.delta_noise > 0.0 {
            let scale = cfg.delta_noise / (d_out as f64).sqrt();
            for j in 0..t {
                if j == i {
                    continue;
                }
                let leak = Matrix::from_fn(d_out, r, |_, _| gauss(&mut rng) as f32);
                planted =
                    planted.add_scaled(&leak.matmul(&planted_bases[j].transpose())?, scale)?;
            }
        }
        let layers = pre
            .layers
            .iter()
            .enumerate()
            .map(|(idx, layer)| DeltaLayer {
                name: layer.name.clone(),
                weights: if idx == l_star {
                    planted.clone()
                } else {
                    Matrix::zeros(layer.weights.rows(), layer.weights.cols())
                },
                bias: None,
            })
            .collect();
        deltas.push(TaskDelta {
            task_id: format!("task{i}"),
            layers,
        });
    }

    if let Some((extra_layer, extra_task)) = cfg.extra_plant {
        let mut p = Matrix::identity(n0);
        for layer in pre.layers.iter().take(extra_layer) {
            p = layer.weights.matmul(&p)?;
        }
        let base = p.matmul(&input_bases[extra_task])?;
        let rows = pre.layers[extra_layer].weights.rows();
        let bump = Matrix::from_fn(rows, r, |_, _| (0.3 * gauss(&mut rng)) as f32);
        deltas[extra_task].layers[extra_layer].weights = bump.matmul(&base.transpose())?;
    }

    let fine_tuned: Vec<Checkpoint> = deltas
        .iter()
        .map(|d| crate::checkpoint::apply_deltas(&pre, &[d], 1.0))
        .collect::<Result<_>>()?;

    let mut samples = Vec::with_capacity(t * cfg.samples_per_task);
    for (i, c_i) in input_bases.iter().enumerate() {
        for s in 0..cfg.samples_per_task {
            let class = s % r;
            let mut a = vec![0.0f64; r];
            for (j, coeff) in a.iter_mut().enumerate() {
                *coeff = if j == class { 1.0 } else { rng.gen_range(0.0..0.4) };
            }
            let mut input = c_i.matvec(&a)?;
            if cfg.noise > 0.0 {
                let sd = cfg.noise * crate::linalg::norm2(&a) / (n0 as f64).sqrt();
                for x in input.iter_mut() {
                    *x += sd * gauss(&mut rng);
                }
            }
            samples.push(Sample {
                input,
                task: i,
                class,
            });
        }
    }

    Ok(SyntheticSuite {
        pre,
        deltas,
        fine_tuned,
        heads,
        samples,
        planted_bases,
        config: cfg.clone(),
    })
}

// ── Metrics ─────────────────────────────────────────────────────────

/// Mean of per-task accuracy ratios against the fine-tuned reference.
pub fn normalized_accuracy(pairs: &[(f64, f64)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::EmptyInput {
            context: "normalized_accuracy pairs".into(),
        });
    }
    let mut sum = 0.0;
    for &(merged, ft) in pairs {
        if ft <= 0.0 {
            return Err(Error::InvalidConfig(format!(
                "fine-tuned reference accuracy must be positive, got {ft}"
            )));
        }
        sum += merged / ft;
    }
    Ok(sum / pairs.len() as f64)
}

// ── Evaluation ──────────────────────────────────────────────────────

pub const METHODS: &[&str] = &[
    "mass",
    "mass-batched",
    "tsv-m",
    "task-arithmetic",
    "weight-average",
    "fine-tuned",
    "zero-shot",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub alpha: f64,
    /// Redundancy filter threshold for the fixed merge.
    pub epsilon: f64,
    pub eta: f64,
    pub route_top_k: usize,
    pub temperature: f64,
    /// Truncation rank; defaults to the suite's planted rank.
    pub rank: Option<usize>,
    pub merge_mode: MergeMode,
    /// Homogeneous batch size for mass-batched.
    pub batch_size: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            epsilon: 0.3,
            eta: 0.2,
            route_top_k: 2,
            temperature: 1.0,
            rank: None,
            merge_mode: MergeMode::Tsv,
            batch_size: 25,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub report_version: u32,
    pub method: String,
    pub suite_seed: u64,
    pub suite_hash: String,
    pub per_task_accuracy: Vec<f64>,
    pub fine_tuned_accuracy: Vec<f64>,
    pub mean_accuracy: f64,
    pub normalized_accuracy: f64,
    /// Fraction of samples whose selected set contains the true task.
    /// Only the routed methods produce one.
    pub routing_accuracy: Option<f64>,
    pub config: EvalConfig,
}

impl EvalReport {
    /// Aligned-column rendering for terminals.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("method               {}\n", self.method));
        out.push_str(&format!("suite seed           {}\n", self.suite_seed));
        out.push_str(&format!("suite hash           {}\n", self.suite_hash));
        out.push_str("task   accuracy   fine-tuned\n");
        for (i, (&acc, &ft)) in self
            .per_task_accuracy
            .iter()
            .zip(&self.fine_tuned_accuracy)
            .enumerate()
        {
            out.push_str(&format!("{i:<6} {acc:<10.4} {ft:<10.4}\n"));
        }
        out.push_str(&format!("mean accuracy        {:.4}\n", self.mean_accuracy));
        out.push_str(&format!(
            "normalized accuracy  {:.4}\n",
            self.normalized_accuracy
        ));
        if let Some(r) = self.routing_accuracy {
            out.push_str(&format!("routing accuracy     {r:.4}\n"));
        }
        out
    }
}

/// Highest logit across every head; correct only when both the winning
/// head and the winning class match the label.
fn global_argmax(final_repr: &[f64], heads: &[Head]) -> Result<(usize, usize)> {
    let mut best: Option<(f64, usize, usize)> = None;
    for (task, head) in heads.iter().enumerate() {
        let mut logits = head.weights.matvec(final_repr)?;
        for (l, b) in logits.iter_mut().zip(&head.bias) {
            *l += *b as f64;
        }
        for (class, &logit) in logits.iter().enumerate() {
            if best.map_or(true, |(b, _, _)| logit > b) {
                best = Some((logit, task, class));
            }
        }
    }
    let (_, task, class) = best.expect("at least one head");
    Ok((task, class))
}

fn per_task_counts(
    suite: &SyntheticSuite,
    hits: impl Fn(&Sample) -> Result<bool> + Sync,
) -> Result<Vec<f64>> {
    let t = suite.config.tasks;
    let spt = suite.config.samples_per_task;
    let flags: Vec<bool> = suite
        .samples
        .par_iter()
        .map(|s| hits(s))
        .collect::<Result<_>>()?;
    Ok((0..t)
        .map(|i| {
            let correct = flags[i * spt..(i + 1) * spt].iter().filter(|&&h| h).count();
            correct as f64 / spt as f64
        })
        .collect())
}

/// Per-task accuracy of a single fixed model under global argmax.
fn fixed_model_accuracy(suite: &SyntheticSuite, model: &Checkpoint) -> Result<Vec<f64>> {
    per_task_counts(suite, |s| {
        let trace = forward(model, &s.input, &[])?;
        let (task, class) = global_argmax(&trace.final_repr, &suite.heads)?;
        Ok(task == s.task && class == s.class)
    })
}

/// Each task's own checkpoint with its own head (class-only correctness).
fn fine_tuned_accuracy(suite: &SyntheticSuite) -> Result<Vec<f64>> {
    per_task_counts(suite, |s| {
        let trace = forward(&suite.fine_tuned[s.task], &s.input, &[])?;
        let (_, class) = global_argmax(&trace.final_repr, &suite.heads[s.task..=s.task])?;
        Ok(class == s.class)
    })
}

fn build_engine(suite: &SyntheticSuite, cfg: &EvalConfig) -> Result<MassEngine> {
    let rank = cfg.rank.unwrap_or(suite.config.rank);
    let bundles = suite.bundles(rank)?;
    let admitted = filter_redundant(&suite.deltas, cfg.epsilon, FilterScope::Global)?;
    let admitted_bundles: Vec<TaskSubspaceBundle> =
        admitted.iter().map(|&i| bundles[i].clone()).collect();
    let merged = tsv_merge(
        &suite.pre,
        &admitted_bundles,
        cfg.alpha,
        RankPolicy::UniformReduce,
    )?;
    let mut router = RouterConfig::new(&suite.routing_layer_name());
    router.eta = cfg.eta;
    router.route_top_k = cfg.route_top_k;
    router.temperature = cfg.temperature;
    let mut engine_cfg = EngineConfig::new(router);
    engine_cfg.alpha = cfg.alpha;
    engine_cfg.merge_mode = cfg.merge_mode;
    MassEngine::new(
        suite.pre.clone(),
        merged.weights,
        bundles,
        suite.heads.clone(),
        engine_cfg,
    )
}

/// Fixed merged model used by the non-adaptive baseline.
fn fixed_merge_model(suite: &SyntheticSuite, cfg: &EvalConfig) -> Result<Checkpoint> {
    let rank = cfg.rank.unwrap_or(suite.config.rank);
    let bundles = suite.bundles(rank)?;
    let admitted = filter_redundant(&suite.deltas, cfg.epsilon, FilterScope::Global)?;
    let admitted_bundles: Vec<TaskSubspaceBundle> =
        admitted.iter().map(|&i| bundles[i].clone()).collect();
    Ok(tsv_merge(
        &suite.pre,
        &admitted_bundles,
        cfg.alpha,
        RankPolicy::UniformReduce,
    )?
    .weights)
}

/// Run one method end to end and assemble its report. Deterministic given
/// the suite seed and config.
pub fn evaluate(suite: &SyntheticSuite, method: &str, cfg: &EvalConfig) -> Result<EvalReport> {
    let ft_acc = fine_tuned_accuracy(suite)?;
    let mut routing_accuracy = None;

    let per_task = match method {
        "fine-tuned" => ft_acc.clone(),
        "zero-shot" => fixed_model_accuracy(suite, &suite.pre)?,
        "weight-average" => {
            let wa = weight_average(&suite.fine_tuned)?;
            fixed_model_accuracy(suite, &wa.weights)?
        }
        "task-arithmetic" => {
            let ta = task_arithmetic_merge(&suite.pre, &suite.deltas, cfg.alpha)?;
            fixed_model_accuracy(suite, &ta.weights)?
        }
        "tsv-m" => {
            let merged = fixed_merge_model(suite, cfg)?;
            fixed_model_accuracy(suite, &merged)?
        }
        "mass" => {
            let engine = build_engine(suite, cfg)?;
            let routed = std::sync::atomic::AtomicU64::new(0);
            let acc = per_task_counts(suite, |s| {
                let p = engine.classify(&s.input)?;
                if p.decision.selected.contains(&s.task) {
                    routed.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                }
                Ok(p.task == s.task && p.class == s.class)
            })?;
            routing_accuracy = Some(
                routed.load(std::sync::atomic::Ordering::Relaxed) as f64
                    / suite.samples.len() as f64,
            );
            acc
        }
        "mass-batched" => {
            let engine = build_engine(suite, cfg)?;
            let t = suite.config.tasks;
            let spt = suite.config.samples_per_task;
            let mut hits = vec![false; suite.samples.len()];
            let mut routed = 0u64;
            for i in 0..t {
                let group = &suite.samples[i * spt..(i + 1) * spt];
                for (chunk_idx, chunk) in group.chunks(cfg.batch_size.max(1)).enumerate() {
                    let inputs: Vec<Vec<f64>> =
                        chunk.iter().map(|s| s.input.clone()).collect();
                    let preds = engine.classify_batched(&inputs)?;
                    for (j, (s, p)) in chunk.iter().zip(&preds).enumerate() {
                        if p.decision.selected.contains(&s.task) {
                            routed += 1;
                        }
                        hits[i * spt + chunk_idx * cfg.batch_size.max(1) + j] =
                            p.task == s.task && p.class == s.class;
                    }
                }
            }
            routing_accuracy = Some(routed as f64 / suite.samples.len() as f64);
            (0..t)
                .map(|i| {
                    let c = hits[i * spt..(i + 1) * spt].iter().filter(|&&h| h).count();
                    c as f64 / spt as f64
                })
                .collect()
        }
        other => return Err(Error::UnknownMethod(other.into())),
    };

    let pairs: Vec<(f64, f64)> = per_task.iter().copied().zip(ft_acc.iter().copied()).collect();
    let normalized = normalized_accuracy(&pairs)?;
    let mean = per_task.iter().sum::<f64>() / per_task.len() as f64;
    Ok(EvalReport {
        report_version: 1,
        method: method.into(),
        suite_seed: suite.config.seed,
        suite_hash: suite.fingerprint(),
        per_task_accuracy: per_task,
        fine_tuned_accuracy: ft_acc,
        mean_accuracy: mean,
        normalized_accuracy: normalized,
        routing_accuracy,
        config: cfg.clone(),
    })
}

// ── Routing-layer sweep ─────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub layer: String,
    pub mean_acc: f64,
    pub std_acc: f64,
    pub per_task: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    pub fn to_csv(&self) -> String {
        let t = self.rows.first().map_or(0, |r| r.per_task.len());
        let mut out = String::from("layer,mean_acc,std_acc");
        for i in 1..=t {
            out.push_str(&format!(",task_{i}"));
        }
        out.push('\n');
        for row in &self.rows {
            out.push_str(&format!("{},{:.6},{:.6}", row.layer, row.mean_acc, row.std_acc));
            for acc in &row.per_task {
                out.push_str(&format!(",{acc:.6}"));
            }
            out.push('\n');
        }
        out
    }
}

/// Score every candidate layer by routing accuracy: a sample counts when
/// the lowest projection residual (ties to the lower task index) belongs
/// to its true task. Activations come from the pretrained stack so the
/// comparison between layers is independent of any particular merge.
pub fn layer_sweep(
    suite: &SyntheticSuite,
    bundles: &[TaskSubspaceBundle],
    layers: &[usize],
) -> Result<SweepTable> {
    if layers.is_empty() {
        return Err(Error::EmptyInput {
            context: "layer_sweep layers".into(),
        });
    }
    let t = suite.config.tasks;
    let spt = suite.config.samples_per_task;
    let mut rows = Vec::with_capacity(layers.len());
    for &idx in layers {
        if idx >= suite.pre.layers.len() {
            return Err(Error::UnknownLayer(layer_name(idx)));
        }
        let name = layer_name(idx);
        let hits: Vec<bool> = suite
            .samples
            .par_iter()
            .map(|s| {
                let trace = forward(&suite.pre, &s.input, &[name.as_str()])?;
                let r = crate::router::residuals(&trace.captured[&name], bundles, &name)?;
                let mut best = 0usize;
                for (i, &ri) in r.iter().enumerate() {
                    if ri < r[best] {
                        best = i;
                    }
                }
                Ok(best == s.task)
            })
            .collect::<Result<_>>()?;
        let per_task: Vec<f64> = (0..t)
            .map(|i| {
                let c = hits[i * spt..(i + 1) * spt].iter().filter(|&&h| h).count();
                c as f64 / spt as f64
            })
            .collect();
        let mean = per_task.iter().sum::<f64>() / t as f64;
        let var = per_task.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / t as f64;
        rows.push(SweepRow {
            layer: name,
            mean_acc: mean,
            std_acc: var.sqrt(),
            per_task,
        });
    }
    Ok(SweepTable { rows })
}
