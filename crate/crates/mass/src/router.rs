//! Data-free projection routing: score each task by the Euclidean residual
//! of an intermediate activation after projection onto that task's right
//! singular subspace, softmax the negated residuals, and gate by threshold
//! and top-k. Includes the nearest-neighbor baseline router.

use crate::error::{Error, Result};
use crate::linalg::{cosine_similarity, orthogonalize, project_residual, softmax_neg, Matrix};
use crate::subspace::TaskSubspaceBundle;
use serde::{Deserialize, Serialize};

/// Which per-task basis the router projects onto.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SubspaceSource {
    /// Each task's own truncated right singular vectors.
    #[default]
    RawV,
    /// Per-task column blocks of the orthogonalized concatenation.
    OrthogonalizedV,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouterConfig {
    /// Layer whose input activation is routed on.
    pub layer: String,
    /// Minimum softmax weight for a task to enter the selected set.
    pub eta: f64,
    /// Cap on the number of selected tasks.
    pub route_top_k: usize,
    /// Softmax temperature.
    pub temperature: f64,
    pub subspace_source: SubspaceSource,
}

impl RouterConfig {
    pub fn new(layer: &str) -> Self {
        Self {
            layer: layer.into(),
            eta: 0.2,
            route_top_k: 2,
            temperature: 1.0,
            subspace_source: SubspaceSource::RawV,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(Error::InvalidConfig(format!(
                "eta must be in [0, 1], got {}",
                self.eta
            )));
        }
        if self.route_top_k == 0 {
            return Err(Error::InvalidConfig("route_top_k must be >= 1".into()));
        }
        if self.temperature <= 0.0 {
            return Err(Error::InvalidConfig(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// Outcome of routing one input (or one batch).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingDecision {
    pub residuals: Vec<f64>,
    pub weights: Vec<f64>,
    /// Selected task indices, ascending.
    pub selected: Vec<usize>,
    pub layer: String,
}

/// Per-task projection bases at one layer, prebuilt so repeated routing
/// does not redo the orthogonalization.
#[derive(Debug, Clone)]
pub struct RouterSubspaces {
    pub layer: String,
    pub bases: Vec<Matrix>,
}

impl RouterSubspaces {
    pub fn build(
        bundles: &[TaskSubspaceBundle],
        layer: &str,
        source: SubspaceSource,
    ) -> Result<Self> {
        if bundles.is_empty() {
            return Err(Error::EmptyInput {
                context: "router bundles".into(),
            });
        }
        let vs: Vec<&Matrix> = bundles
            .iter()
            .map(|b| b.layer(layer).map(|f| &f.v))
            .collect::<Result<_>>()?;
        let bases = match source {
            SubspaceSource::RawV => vs.into_iter().cloned().collect(),
            SubspaceSource::OrthogonalizedV => {
                let concat = Matrix::hconcat(&vs)?;
                let v_perp = orthogonalize(&concat)?;
                let mut bases = Vec::with_capacity(bundles.len());
                let mut offset = 0;
                for b in bundles {
                    let k = b.layer(layer)?.v.cols();
                    bases.push(v_perp.column_block(offset, k));
                    offset += k;
                }
                bases
            }
        };
        Ok(Self {
            layer: layer.into(),
            bases,
        })
    }

    pub fn residuals(&self, z: &[f64]) -> Result<Vec<f64>> {
        self.bases
            .iter()
            .map(|v| project_residual(z, v))
            .collect()
    }
}

/// Per-task projection residuals of `z` at the given layer, using each
/// task's raw truncated right singular vectors.
pub fn residuals(z: &[f64], bundles: &[TaskSubspaceBundle], layer: &str) -> Result<Vec<f64>> {
    RouterSubspaces::build(bundles, layer, SubspaceSource::RawV)?.residuals(z)
}

/// Threshold-then-top-k gating. Indices with `w_i >= eta`, truncated to the
/// `top_k` largest weights (ties to the lower index); falls back to the
/// argmax singleton when nothing clears the threshold. Returned ascending.
pub fn gate(weights: &[f64], eta: f64, top_k: usize) -> Vec<usize> {
    let mut passing: Vec<usize> = (0..weights.len()).filter(|&i| weights[i] >= eta).collect();
    passing.sort_by(|&a, &b| {
        weights[b]
            .partial_cmp(&weights[a])
            .unwrap()
            .then(a.cmp(&b))
    });
    passing.truncate(top_k);
    if passing.is_empty() {
        let argmax = (0..weights.len())
            .max_by(|&a, &b| weights[a].partial_cmp(&weights[b]).unwrap().then(b.cmp(&a)))
            .unwrap();
        passing.push(argmax);
    }
    passing.sort_unstable();
    passing
}

fn decide(
    residuals: Vec<f64>,
    cfg: &RouterConfig,
    candidates: Option<&[usize]>,
) -> Result<RoutingDecision> {
    let t = residuals.len();
    let weights = match candidates {
        None => softmax_neg(&residuals, cfg.temperature)?,
        Some(cands) => {
            // Excluded tasks get weight zero; the softmax runs over the
            // candidate subset only.
            let sub: Vec<f64> = cands.iter().map(|&i| residuals[i]).collect();
            let w = softmax_neg(&sub, cfg.temperature)?;
            let mut full = vec![0.0; t];
            for (&i, wi) in cands.iter().zip(w) {
                full[i] = wi;
            }
            full
        }
    };
    let selected = match candidates {
        None => gate(&weights, cfg.eta, cfg.route_top_k),
        Some(cands) => {
            let sub: Vec<f64> = cands.iter().map(|&i| weights[i]).collect();
            let mut sel: Vec<usize> = gate(&sub, cfg.eta, cfg.route_top_k)
                .into_iter()
                .map(|i| cands[i])
                .collect();
            sel.sort_unstable();
            sel
        }
    };
    Ok(RoutingDecision {
        residuals,
        weights,
        selected,
        layer: cfg.layer.clone(),
    })
}

/// Route against prebuilt subspaces (used by the inference engine to avoid
/// rebuilding bases per sample).
pub fn route_precomputed(
    subspaces: &RouterSubspaces,
    z: &[f64],
    cfg: &RouterConfig,
    candidates: Option<&[usize]>,
) -> Result<RoutingDecision> {
    cfg.validate()?;
    decide(subspaces.residuals(z)?, cfg, candidates)
}

/// As `route_precomputed` for a batch: mean per-sample residuals, then
/// softmax and gating.
pub fn batched_route_precomputed(
    subspaces: &RouterSubspaces,
    batch: &[Vec<f64>],
    cfg: &RouterConfig,
    candidates: Option<&[usize]>,
) -> Result<RoutingDecision> {
    cfg.validate()?;
    if batch.is_empty() {
        return Err(Error::EmptyInput {
            context: "batched_route batch".into(),
        });
    }
    let t = subspaces.bases.len();
    let mut mean = vec![0.0f64; t];
    for z in batch {
        for (acc, r) in mean.iter_mut().zip(subspaces.residuals(z)?) {
            *acc += r;
        }
    }
    for acc in mean.iter_mut() {
        *acc /= batch.len() as f64;
    }
    decide(mean, cfg, candidates)
}

/// Route one activation vector: residuals, softmax over negated residuals,
/// then gating. Deterministic.
pub fn route(
    z: &[f64],
    bundles: &[TaskSubspaceBundle],
    cfg: &RouterConfig,
) -> Result<RoutingDecision> {
    route_restricted(z, bundles, cfg, None)
}

/// As `route`, but with routing restricted to a candidate subset of tasks.
pub fn route_restricted(
    z: &[f64],
    bundles: &[TaskSubspaceBundle],
    cfg: &RouterConfig,
    candidates: Option<&[usize]>,
) -> Result<RoutingDecision> {
    cfg.validate()?;
    let subspaces = RouterSubspaces::build(bundles, &cfg.layer, cfg.subspace_source)?;
    decide(subspaces.residuals(z)?, cfg, candidates)
}

/// Route a whole batch at once: the residual vector is the elementwise
/// mean of the per-sample residuals.
pub fn batched_route(
    batch: &[Vec<f64>],
    bundles: &[TaskSubspaceBundle],
    cfg: &RouterConfig,
    candidates: Option<&[usize]>,
) -> Result<RoutingDecision> {
    cfg.validate()?;
    if batch.is_empty() {
        return Err(Error::EmptyInput {
            context: "batched_route batch".into(),
        });
    }
    let dim = batch[0].len();
    if batch.iter().any(|z| z.len() != dim) {
        return Err(Error::DimensionMismatch {
            context: "batched_route sample dimensions".into(),
            expected: dim.to_string(),
            got: "mixed".into(),
        });
    }
    let subspaces = RouterSubspaces::build(bundles, &cfg.layer, cfg.subspace_source)?;
    batched_route_precomputed(&subspaces, batch, cfg, candidates)
}

/// Nearest-neighbor baseline: the task of the support vector with maximum
/// cosine similarity to `z` (ties to the lowest support index).
pub fn nn_route(z: &[f64], support: &[(Vec<f64>, String)]) -> Result<String> {
    if support.is_empty() {
        return Err(Error::EmptyInput {
            context: "nn_route support set".into(),
        });
    }
    let mut best: Option<(f64, usize)> = None;
    for (idx, (v, _)) in support.iter().enumerate() {
        let sim = cosine_similarity(z, v)?;
        let better = match best {
            None => true,
            Some((b, _)) => sim > b,
        };
        if better {
            best = Some((sim, idx));
        }
    }
    let (_, idx) = best.unwrap();
    Ok(support[idx].1.clone())
}
