//! Layered-model executor and the full two-pass adaptive inference:
//! first pass through the fixed merged model to capture the routing
//! activation, projection routing, per-selection adaptive merge (memoized),
//! second pass through the adaptive model, then head selection by the
//! highest logit across selected tasks.

use crate::checkpoint::{Checkpoint, Head};
use crate::error::{Error, Result};
use crate::merge::{tsv_merge, MergedModel, Provenance, RankPolicy};
use crate::router::{
    batched_route_precomputed, route_precomputed, RouterConfig, RouterSubspaces, RoutingDecision,
};
use crate::subspace::TaskSubspaceBundle;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, VecDeque};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

/// Activations captured during a forward pass. Captured vectors are the
/// INPUT entering the named layer's weights.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub captured: BTreeMap<String, Vec<f64>>,
    pub final_repr: Vec<f64>,
}

/// Sequential dense forward pass: `z <- act(W z + b)` per layer, capturing
/// the requested layer inputs.
pub fn forward(model: &Checkpoint, x: &[f64], capture: &[&str]) -> Result<ForwardTrace> {
    if x.len() != model.input_dim() {
        return Err(Error::DimensionMismatch {
            context: "forward input".into(),
            expected: model.input_dim().to_string(),
            got: x.len().to_string(),
        });
    }
    for name in capture {
        model.layer_index(name)?;
    }
    let mut z: Vec<f64> = x.to_vec();
    let mut captured = BTreeMap::new();
    for layer in &model.layers {
        if capture.contains(&layer.name.as_str()) {
            captured.insert(layer.name.clone(), z.clone());
        }
        let mut out = layer.weights.matvec(&z)?;
        if let Some(b) = &layer.bias {
            for (o, bi) in out.iter_mut().zip(b) {
                *o += *bi as f64;
            }
        }
        layer.activation.apply(&mut out);
        if !out.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite {
                context: format!("activation after layer {:?}", layer.name),
            });
        }
        z = out;
    }
    Ok(ForwardTrace {
        captured,
        final_repr: z,
    })
}

/// How the router-selected subspaces are merged in the second pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MergeMode {
    /// Re-run the orthogonalizing merge over the selected bundles.
    #[default]
    Tsv,
    /// Literal sum of the selected truncated reconstructions.
    PlainSum,
}

/// Merge only the selected task subspaces into `pre + alpha * Delta_ada`.
pub fn adaptive_merge(
    pre: &Checkpoint,
    bundles: &[TaskSubspaceBundle],
    omega: &[usize],
    alpha: f64,
    mode: MergeMode,
) -> Result<MergedModel> {
    if omega.is_empty() {
        return Err(Error::EmptyInput {
            context: "adaptive_merge selection".into(),
        });
    }
    let selected: Vec<TaskSubspaceBundle> = omega
        .iter()
        .map(|&i| {
            bundles.get(i).cloned().ok_or_else(|| Error::InvalidConfig(
                format!("selected task index {i} out of range (T = {})", bundles.len()),
            ))
        })
        .collect::<Result<_>>()?;
    match mode {
        MergeMode::Tsv => {
            let mut merged = tsv_merge(pre, &selected, alpha, RankPolicy::UniformReduce)?;
            merged.provenance.method = "mass-adaptive".into();
            merged.provenance.admitted = omega.to_vec();
            Ok(merged)
        }
        MergeMode::PlainSum => {
            let mut out = pre.clone();
            for b in &selected {
                for (layer, f) in out.layers.iter_mut().zip(&b.layers) {
                    layer.weights = layer.weights.add_scaled(&f.reconstruct(), alpha)?;
                    if let (Some(bias), Some(db)) = (&mut layer.bias, &f.bias) {
                        for (x, dx) in bias.iter_mut().zip(db.data()) {
                            *x = (*x as f64 + alpha * *dx as f64) as f32;
                        }
                    }
                }
            }
            Ok(MergedModel {
                weights: out,
                provenance: Provenance {
                    method: "mass-adaptive-plain-sum".into(),
                    alpha,
                    rank_k: None,
                    epsilon: None,
                    admitted: omega.to_vec(),
                    task_ids: selected.iter().map(|b| b.task_id.clone()).collect(),
                },
            })
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineConfig {
    pub router: RouterConfig,
    pub alpha: f64,
    pub merge_mode: MergeMode,
    /// Bounded LRU memo over distinct selections.
    pub cache_capacity: usize,
    /// Router candidate subset (None = all tasks).
    pub candidates: Option<Vec<usize>>,
}

impl EngineConfig {
    pub fn new(router: RouterConfig) -> Self {
        Self {
            router,
            alpha: 1.0,
            merge_mode: MergeMode::Tsv,
            cache_capacity: 64,
            candidates: None,
        }
    }
}

/// Call counters for the cost contract: two forward passes plus `|Omega|`
/// head evaluations per classified sample, one adaptive merge per distinct
/// selection.
#[derive(Debug, Default)]
pub struct EngineStats {
    pub forward_passes: AtomicU64,
    pub head_evaluations: AtomicU64,
    pub adaptive_merges: AtomicU64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StatsSnapshot {
    pub forward_passes: u64,
    pub head_evaluations: u64,
    pub adaptive_merges: u64,
}

struct MergeCache {
    entries: Vec<(Vec<usize>, Arc<Checkpoint>)>,
    order: VecDeque<Vec<usize>>,
    capacity: usize,
}

impl MergeCache {
    fn new(capacity: usize) -> Self {
        Self {
            entries: Vec::new(),
            order: VecDeque::new(),
            capacity: capacity.max(1),
        }
    }

    fn get(&mut self, key: &[usize]) -> Option<Arc<Checkpoint>> {
        let hit = self
            .entries
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.clone())?;
        self.order.retain(|k| k != key);
        self.order.push_back(key.to_vec());
        Some(hit)
    }

    fn insert(&mut self, key: Vec<usize>, value: Arc<Checkpoint>) {
        self.entries.push((key.clone(), value));
        self.order.push_back(key);
        while self.entries.len() > self.capacity {
            if let Some(evict) = self.order.pop_front() {
                self.entries.retain(|(k, _)| k != &evict);
            }
        }
    }
}

/// One classified sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub task: usize,
    pub class: usize,
    pub logit: f64,
    pub decision: RoutingDecision,
}

/// Immutable inference session over a fixed merged model, per-task factor
/// bundles, and per-task heads. The merge memo-cache is the only
/// synchronized structure; each distinct selection is merged at most once.
pub struct MassEngine {
    pre: Checkpoint,
    merged: Checkpoint,
    bundles: Vec<TaskSubspaceBundle>,
    heads: Vec<Head>,
    cfg: EngineConfig,
    subspaces: RouterSubspaces,
    cache: Mutex<MergeCache>,
    stats: EngineStats,
}

impl MassEngine {
    pub fn new(
        pre: Checkpoint,
        merged: Checkpoint,
        bundles: Vec<TaskSubspaceBundle>,
        heads: Vec<Head>,
        cfg: EngineConfig,
    ) -> Result<Self> {
        cfg.router.validate()?;
        if heads.len() != bundles.len() {
            return Err(Error::InvalidConfig(format!(
                "expected one head per task, got {} heads for {} tasks",
                heads.len(),
                bundles.len()
            )));
        }
        let subspaces =
            RouterSubspaces::build(&bundles, &cfg.router.layer, cfg.router.subspace_source)?;
        let capacity = cfg.cache_capacity;
        Ok(Self {
            pre,
            merged,
            bundles,
            heads,
            cfg,
            subspaces,
            cache: Mutex::new(MergeCache::new(capacity)),
            stats: EngineStats::default(),
        })
    }

    pub fn task_count(&self) -> usize {
        self.bundles.len()
    }

    pub fn stats(&self) -> StatsSnapshot {
        StatsSnapshot {
            forward_passes: self.stats.forward_passes.load(Ordering::Relaxed),
            head_evaluations: self.stats.head_evaluations.load(Ordering::Relaxed),
            adaptive_merges: self.stats.adaptive_merges.load(Ordering::Relaxed),
        }
    }

    fn adaptive_model(&self, omega: &[usize]) -> Result<Arc<Checkpoint>> {
        let mut cache = self.cache.lock().unwrap();
        if let Some(hit) = cache.get(omega) {
            return Ok(hit);
        }
        // Compute inside the lock: each distinct selection is merged at
        // most once even under contention.
        let merged = adaptive_merge(
            &self.pre,
            &self.bundles,
            omega,
            self.cfg.alpha,
            self.cfg.merge_mode,
        )?;
        self.stats.adaptive_merges.fetch_add(1, Ordering::Relaxed);
        let model = Arc::new(merged.weights);
        cache.insert(omega.to_vec(), model.clone());
        Ok(model)
    }

    fn routing_activation(&self, x: &[f64]) -> Result<Vec<f64>> {
        let trace = forward(&self.merged, x, &[self.cfg.router.layer.as_str()])?;
        self.stats.forward_passes.fetch_add(1, Ordering::Relaxed);
        Ok(trace.captured[&self.cfg.router.layer].clone())
    }

    fn head_logits(&self, task: usize, z: &[f64]) -> Result<Vec<f64>> {
        self.stats.head_evaluations.fetch_add(1, Ordering::Relaxed);
        let head = &self.heads[task];
        let mut logits = head.weights.matvec(z)?;
        for (l, b) in logits.iter_mut().zip(&head.bias) {
            *l += *b as f64;
        }
        Ok(logits)
    }

    fn second_pass(&self, model: &Checkpoint, x: &[f64], decision: RoutingDecision) -> Result<Prediction> {
        let trace = forward(model, x, &[])?;
        self.stats.forward_passes.fetch_add(1, Ordering::Relaxed);
        let mut best: Option<(f64, usize, usize)> = None;
        for &task in &decision.selected {
            let logits = self.head_logits(task, &trace.final_repr)?;
            for (class, &logit) in logits.iter().enumerate() {
                // Strict > keeps ties at the lower task, then lower class.
                if best.map_or(true, |(b, _, _)| logit > b) {
                    best = Some((logit, task, class));
                }
            }
        }
        let (logit, task, class) = best.ok_or_else(|| Error::EmptyInput {
            context: "no head logits produced".into(),
        })?;
        Ok(Prediction {
            task,
            class,
            logit,
            decision,
        })
    }

    /// Full two-pass classification of one input.
    pub fn classify(&self, x: &[f64]) -> Result<Prediction> {
        let z = self.routing_activation(x)?;
        let decision = route_precomputed(
            &self.subspaces,
            &z,
            &self.cfg.router,
            self.cfg.candidates.as_deref(),
        )?;
        let model = self.adaptive_model(&decision.selected)?;
        self.second_pass(&model, x, decision)
    }

    /// Batched classification: one routing decision and one adaptive merge
    /// for the whole batch, then a per-sample second pass.
    pub fn classify_batched(&self, batch: &[Vec<f64>]) -> Result<Vec<Prediction>> {
        if batch.is_empty() {
            return Err(Error::EmptyInput {
                context: "classify_batched batch".into(),
            });
        }
        let activations: Vec<Vec<f64>> = batch
            .iter()
            .map(|x| self.routing_activation(x))
            .collect::<Result<_>>()?;
        let decision = batched_route_precomputed(
            &self.subspaces,
            &activations,
            &self.cfg.router,
            self.cfg.candidates.as_deref(),
        )?;
        let model = self.adaptive_model(&decision.selected)?;
        batch
            .iter()
            .map(|x| self.second_pass(&model, x, decision.clone()))
            .collect()
    }
}
