//! Per-task truncated singular factor bundles and the redundant-direction
//! filter applied before the fixed merge.

use crate::checkpoint::{
    flatten, flatten_layer, Container, ContainerTensor, Head, TaskDelta, TopologyHeader,
};
use crate::error::{Error, Result};
use crate::linalg::{cosine_similarity, thin_svd, truncate_svd, Matrix};
use std::collections::BTreeMap;
use std::path::Path;

/// Truncated factors `(U, S, V)` for one layer of one task's delta, plus the
/// bias delta which rides along untouched by the truncation.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerFactors {
    pub name: String,
    pub u: Matrix,
    pub s: Vec<f32>,
    pub v: Matrix,
    pub bias: Option<Matrix>,
}

impl LayerFactors {
    pub fn rank(&self) -> usize {
        self.s.len()
    }

    /// `U diag(S) V^T`.
    pub fn reconstruct(&self) -> Matrix {
        let m = self.u.rows();
        let n = self.v.rows();
        Matrix::from_fn(m, n, |i, j| {
            let mut acc = 0.0f64;
            for k in 0..self.s.len() {
                acc += self.u.get(i, k) as f64 * self.s[k] as f64 * self.v.get(j, k) as f64;
            }
            acc as f32
        })
    }

    /// Re-truncate to a smaller rank.
    pub fn truncated(&self, k: usize) -> Result<LayerFactors> {
        if k == 0 || k > self.rank() {
            return Err(Error::InvalidRank {
                k,
                max: self.rank(),
            });
        }
        Ok(LayerFactors {
            name: self.name.clone(),
            u: self.u.left_columns(k),
            s: self.s[..k].to_vec(),
            v: self.v.left_columns(k),
            bias: self.bias.clone(),
        })
    }
}

/// Truncated task singular factors for every layer of one task.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskSubspaceBundle {
    pub task_id: String,
    pub layers: Vec<LayerFactors>,
}

impl TaskSubspaceBundle {
    pub fn layer(&self, name: &str) -> Result<&LayerFactors> {
        self.layers
            .iter()
            .find(|l| l.name == name)
            .ok_or_else(|| Error::UnknownLayer(name.into()))
    }
}

/// Default truncation rank from the per-task compression rate `1/T`:
/// `max(1, floor(min(m, n) / tasks))`.
pub fn default_rank(m: usize, n: usize, tasks: usize) -> usize {
    (m.min(n) / tasks).max(1)
}

/// Truncated thin SVD of every layer of a task delta. `rank_for` maps the
/// layer index to the truncation rank for that layer.
pub fn decompose_task(
    d: &TaskDelta,
    rank_for: impl Fn(usize, &Matrix) -> usize,
) -> Result<TaskSubspaceBundle> {
    let mut layers = Vec::with_capacity(d.layers.len());
    for (idx, dl) in d.layers.iter().enumerate() {
        let k = rank_for(idx, &dl.weights);
        let svd = thin_svd(&dl.weights)?;
        let t = truncate_svd(&svd, k)?;
        layers.push(LayerFactors {
            name: dl.name.clone(),
            u: t.u,
            s: t.s,
            v: t.v,
            bias: dl.bias.clone(),
        });
    }
    Ok(TaskSubspaceBundle {
        task_id: d.task_id.clone(),
        layers,
    })
}

/// Granularity of the redundancy filter's flattened similarity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FilterScope {
    /// One scan over whole-model flattened deltas.
    #[default]
    Global,
    /// Admit a task only if it clears the threshold at every layer.
    PerLayer,
}

/// Greedy scan in input order: task `i` is admitted iff the maximum cosine
/// similarity of its flattened delta to all previously admitted deltas is
/// strictly below `epsilon`. The first task is always admitted (the max
/// over an empty set is treated as -inf). Returns admitted indices in
/// input order.
pub fn filter_redundant(
    deltas: &[TaskDelta],
    epsilon: f64,
    scope: FilterScope,
) -> Result<Vec<usize>> {
    if deltas.is_empty() {
        return Err(Error::EmptyInput {
            context: "filter_redundant deltas".into(),
        });
    }
    if !(epsilon > 0.0 && epsilon <= 1.0) {
        return Err(Error::InvalidConfig(format!(
            "epsilon must be in (0, 1], got {epsilon}"
        )));
    }
    let layer_count = deltas[0].layers.len();
    let flats: Vec<Vec<Vec<f64>>> = match scope {
        FilterScope::Global => deltas.iter().map(|d| vec![flatten(d)]).collect(),
        FilterScope::PerLayer => deltas
            .iter()
            .map(|d| (0..layer_count).map(|l| flatten_layer(d, l)).collect())
            .collect(),
    };
    // Reject zero-norm deltas up front: their cosine is undefined.
    for (i, parts) in flats.iter().enumerate() {
        let norm_sq: f64 = parts
            .iter()
            .flat_map(|p| p.iter())
            .map(|x| x * x)
            .sum();
        if norm_sq == 0.0 {
            return Err(Error::ZeroNorm {
                context: format!("delta for task {:?} (index {i})", deltas[i].task_id),
            });
        }
    }
    let mut admitted: Vec<usize> = Vec::new();
    for i in 0..deltas.len() {
        let mut max_sim = f64::NEG_INFINITY;
        for &j in &admitted {
            for (a, b) in flats[i].iter().zip(&flats[j]) {
                // Per-layer slices of a non-zero delta can still be zero;
                // those layers carry no similarity signal.
                let na: f64 = a.iter().map(|x| x * x).sum();
                let nb: f64 = b.iter().map(|x| x * x).sum();
                if na == 0.0 || nb == 0.0 {
                    continue;
                }
                max_sim = max_sim.max(cosine_similarity(a, b)?);
            }
        }
        if max_sim < epsilon {
            admitted.push(i);
        }
    }
    Ok(admitted)
}

// ── Bundle persistence ──────────────────────────────────────────────

/// Serialized collection of bundles plus each task's classification head.
#[derive(Debug, Clone)]
pub struct BundleStore {
    pub bundles: Vec<TaskSubspaceBundle>,
    pub heads: Vec<Head>,
    pub meta: BTreeMap<String, String>,
}

pub fn write_bundles(store: &BundleStore, path: &Path) -> Result<()> {
    let mut tensors = Vec::new();
    let mut topology = TopologyHeader::default();
    let mut meta = store.meta.clone();
    meta.insert(
        "task_ids".into(),
        store
            .bundles
            .iter()
            .map(|b| b.task_id.as_str())
            .collect::<Vec<_>>()
            .join(","),
    );
    for bundle in &store.bundles {
        for layer in &bundle.layers {
            let prefix = format!("{}/{}", bundle.task_id, layer.name);
            tensors.push(ContainerTensor::from_matrix(&prefix, "tsv_u", &layer.u));
            tensors.push(ContainerTensor::from_vector(&prefix, "tsv_s", &layer.s));
            tensors.push(ContainerTensor::from_matrix(&prefix, "tsv_v", &layer.v));
            if let Some(b) = &layer.bias {
                tensors.push(ContainerTensor::from_matrix(&prefix, "tsv_bias", b));
            }
        }
        meta.insert(
            format!("layers/{}", bundle.task_id),
            bundle
                .layers
                .iter()
                .map(|l| l.name.as_str())
                .collect::<Vec<_>>()
                .join(","),
        );
    }
    for head in &store.heads {
        topology.heads.push(head.name.clone());
        tensors.push(ContainerTensor::from_matrix(&head.name, "head", &head.weights));
        tensors.push(ContainerTensor::from_vector(&head.name, "head_bias", &head.bias));
    }
    crate::checkpoint::write_container(path, &tensors, &topology, &meta)
}

pub fn read_bundles(path: &Path) -> Result<BundleStore> {
    let container = crate::checkpoint::read_container(path)?;
    bundles_from_container(&container)
}

fn bundles_from_container(container: &Container) -> Result<BundleStore> {
    let task_ids: Vec<String> = container
        .meta
        .get("task_ids")
        .map(|s| s.split(',').map(String::from).collect())
        .unwrap_or_default();
    let mut bundles = Vec::new();
    for task_id in &task_ids {
        let layer_names: Vec<String> = container
            .meta
            .get(&format!("layers/{task_id}"))
            .map(|s| s.split(',').map(String::from).collect())
            .ok_or_else(|| {
                Error::BadHeader(format!("missing layer list for task {task_id:?}"))
            })?;
        let mut layers = Vec::new();
        for name in &layer_names {
            let prefix = format!("{task_id}/{name}");
            let get = |role: &str| {
                container.find(&prefix, role).ok_or_else(|| {
                    Error::ShapeInconsistency(format!("missing {role} tensor for {prefix:?}"))
                })
            };
            layers.push(LayerFactors {
                name: name.clone(),
                u: get("tsv_u")?.to_matrix()?,
                s: get("tsv_s")?.data.clone(),
                v: get("tsv_v")?.to_matrix()?,
                bias: container
                    .find(&prefix, "tsv_bias")
                    .map(|t| t.to_matrix())
                    .transpose()?,
            });
        }
        bundles.push(TaskSubspaceBundle {
            task_id: task_id.clone(),
            layers,
        });
    }
    let mut heads = Vec::new();
    for name in &container.topology.heads {
        let weights = container
            .find(name, "head")
            .ok_or_else(|| Error::ShapeInconsistency(format!("missing head tensor {name:?}")))?
            .to_matrix()?;
        let bias = container
            .find(name, "head_bias")
            .ok_or_else(|| Error::ShapeInconsistency(format!("missing head bias {name:?}")))?
            .data
            .clone();
        heads.push(Head {
            name: name.clone(),
            weights,
            bias,
        });
    }
    Ok(BundleStore {
        bundles,
        heads,
        meta: container.meta.clone(),
    })
}
