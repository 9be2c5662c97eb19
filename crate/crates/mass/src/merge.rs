//! Fixed merging: truncated-singular-vector merging with orthogonalized
//! concatenated factors, plus task-arithmetic and weight-averaging
//! baselines.

use crate::checkpoint::{apply_deltas, Checkpoint, TaskDelta};
use crate::error::{Error, Result};
use crate::linalg::{orthogonalize, Matrix};
use crate::subspace::TaskSubspaceBundle;
use serde::{Deserialize, Serialize};

/// Everything needed to reproduce a merge bit-exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub method: String,
    pub alpha: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rank_k: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    pub admitted: Vec<usize>,
    pub task_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MergedModel {
    pub weights: Checkpoint,
    pub provenance: Provenance,
}

/// What to do when the concatenated rank at a layer exceeds `min(m, n)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RankPolicy {
    /// Uniformly reduce per-task ranks to `floor(min(m, n) / T)`.
    #[default]
    UniformReduce,
    /// Error out instead.
    Strict,
}

/// Merge truncated task factors into `pre + alpha * U_perp Sigma V_perp^T`
/// per layer. `bundles` is expected to be already restricted to the
/// admitted set. Bias deltas are summed and scaled by `alpha` verbatim.
pub fn tsv_merge(
    pre: &Checkpoint,
    bundles: &[TaskSubspaceBundle],
    alpha: f64,
    policy: RankPolicy,
) -> Result<MergedModel> {
    if bundles.is_empty() {
        return Err(Error::EmptyInput {
            context: "tsv_merge bundles".into(),
        });
    }
    for b in bundles {
        if b.layers.len() != pre.layers.len()
            || b.layers.iter().zip(&pre.layers).any(|(f, l)| f.name != l.name)
        {
            return Err(Error::Topology(format!(
                "bundle for task {:?} does not match the pretrained layer list",
                b.task_id
            )));
        }
    }

    let mut out = pre.clone();
    for (idx, layer) in out.layers.iter_mut().enumerate() {
        let m = layer.weights.rows();
        let n = layer.weights.cols();
        let min_dim = m.min(n);

        // Negligible singular values carry no mass in U_perp Sigma V_perp^T
        // but their factor columns are arbitrary null-space directions that
        // make the concatenation rank-deficient (or distort its polar
        // factor), so drop those column pairs first. The threshold is
        // relative to the largest singular value across tasks at this layer.
        let s_max = bundles
            .iter()
            .flat_map(|b| b.layers[idx].s.iter())
            .fold(0.0f32, |a, &s| a.max(s));
        let cutoff = s_max * 1e-6;
        let mut kept: Vec<(Matrix, Vec<f32>, Matrix)> = Vec::new();
        for b in bundles {
            let f = &b.layers[idx];
            let nz = f.s.iter().take_while(|&&s| s > cutoff).count();
            if nz > 0 {
                kept.push((f.u.left_columns(nz), f.s[..nz].to_vec(), f.v.left_columns(nz)));
            }
        }

        let mut total: usize = kept.iter().map(|(_, s, _)| s.len()).sum();
        if total > min_dim {
            match policy {
                RankPolicy::Strict => {
                    return Err(Error::InvalidRank {
                        k: total,
                        max: min_dim,
                    });
                }
                RankPolicy::UniformReduce => {
                    let per_task = (min_dim / bundles.len()).max(1);
                    for (u, s, v) in kept.iter_mut() {
                        if s.len() > per_task {
                            *u = u.left_columns(per_task);
                            s.truncate(per_task);
                            *v = v.left_columns(per_task);
                        }
                    }
                    total = kept.iter().map(|(_, s, _)| s.len()).sum();
                    if total > min_dim {
                        return Err(Error::InvalidRank {
                            k: total,
                            max: min_dim,
                        });
                    }
                }
            }
        }

        if total > 0 {
            let us: Vec<&Matrix> = kept.iter().map(|(u, _, _)| u).collect();
            let vs: Vec<&Matrix> = kept.iter().map(|(_, _, v)| v).collect();
            let sigma: Vec<f32> = kept.iter().flat_map(|(_, s, _)| s.iter().copied()).collect();
            let u_perp = orthogonalize(&Matrix::hconcat(&us)?)?;
            let v_perp = orthogonalize(&Matrix::hconcat(&vs)?)?;
            let delta_hat = Matrix::from_fn(m, n, |i, j| {
                let mut acc = 0.0f64;
                for k in 0..total {
                    acc += u_perp.get(i, k) as f64 * sigma[k] as f64 * v_perp.get(j, k) as f64;
                }
                acc as f32
            });
            layer.weights = layer.weights.add_scaled(&delta_hat, alpha)?;
        }

        if let Some(bias) = &mut layer.bias {
            for b in bundles {
                if let Some(db) = &b.layers[idx].bias {
                    for (x, dx) in bias.iter_mut().zip(db.data()) {
                        *x = (*x as f64 + alpha * *dx as f64) as f32;
                    }
                }
            }
        }
    }

    if !out.layers.iter().all(|l| l.weights.is_finite()) {
        return Err(Error::NonFinite {
            context: "tsv_merge output".into(),
        });
    }
    let task_ids: Vec<String> = bundles.iter().map(|b| b.task_id.clone()).collect();
    Ok(MergedModel {
        weights: out,
        provenance: Provenance {
            method: "tsv-m".into(),
            alpha,
            rank_k: bundles
                .first()
                .and_then(|b| b.layers.first())
                .map(|l| l.rank()),
            epsilon: None,
            admitted: (0..bundles.len()).collect(),
            task_ids,
        },
    })
}

/// `pre + alpha * sum(deltas)`.
pub fn task_arithmetic_merge(
    pre: &Checkpoint,
    deltas: &[TaskDelta],
    alpha: f64,
) -> Result<MergedModel> {
    let refs: Vec<&TaskDelta> = deltas.iter().collect();
    let weights = apply_deltas(pre, &refs, alpha)?;
    Ok(MergedModel {
        weights,
        provenance: Provenance {
            method: "task-arithmetic".into(),
            alpha,
            rank_k: None,
            epsilon: None,
            admitted: (0..deltas.len()).collect(),
            task_ids: deltas.iter().map(|d| d.task_id.clone()).collect(),
        },
    })
}

/// Elementwise mean of all weights and biases. Heads are not averaged.
pub fn weight_average(checkpoints: &[Checkpoint]) -> Result<MergedModel> {
    let first = checkpoints.first().ok_or_else(|| Error::EmptyInput {
        context: "weight_average checkpoints".into(),
    })?;
    for c in checkpoints.iter().skip(1) {
        if !c.same_topology(first) {
            return Err(Error::Topology(
                "weight_average inputs have different topologies".into(),
            ));
        }
    }
    let count = checkpoints.len() as f64;
    let mut out = first.clone();
    out.heads.clear();
    for (idx, layer) in out.layers.iter_mut().enumerate() {
        layer.weights = Matrix::from_fn(layer.weights.rows(), layer.weights.cols(), |i, j| {
            let sum: f64 = checkpoints
                .iter()
                .map(|c| c.layers[idx].weights.get(i, j) as f64)
                .sum();
            (sum / count) as f32
        });
        if let Some(bias) = &mut layer.bias {
            for (i, x) in bias.iter_mut().enumerate() {
                let sum: f64 = checkpoints
                    .iter()
                    .map(|c| c.layers[idx].bias.as_ref().unwrap()[i] as f64)
                    .sum();
                *x = (sum / count) as f32;
            }
        }
    }
    Ok(MergedModel {
        weights: out,
        provenance: Provenance {
            method: "weight-average".into(),
            alpha: 1.0 / count,
            rank_k: None,
            epsilon: None,
            admitted: (0..checkpoints.len()).collect(),
            task_ids: vec![],
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::checkpoint::{delta, Activation, Layer};
    use crate::subspace::decompose_task;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeMap;

    fn random_checkpoint(rng: &mut ChaCha8Rng, dims: &[(usize, usize)]) -> Checkpoint {
        Checkpoint {
            layers: dims
                .iter()
                .enumerate()
                .map(|(i, &(m, n))| Layer {
                    name: format!("l{i}"),
                    weights: Matrix::from_fn(m, n, |_, _| rng.gen_range(-1.0..1.0)),
                    bias: Some((0..m).map(|_| rng.gen_range(-0.5..0.5)).collect()),
                    activation: Activation::Identity,
                })
                .collect(),
            heads: vec![],
            meta: BTreeMap::new(),
        }
    }

    fn max_abs_diff(a: &Checkpoint, b: &Checkpoint) -> f64 {
        let mut worst = 0.0f64;
        for (la, lb) in a.layers.iter().zip(&b.layers) {
            for (x, y) in la.weights.data().iter().zip(lb.weights.data()) {
                worst = worst.max(((x - y) as f64).abs());
            }
            if let (Some(ba), Some(bb)) = (&la.bias, &lb.bias) {
                for (x, y) in ba.iter().zip(bb) {
                    worst = worst.max(((x - y) as f64).abs());
                }
            }
        }
        worst
    }

    #[test]
    fn single_task_full_rank_recovers_fine_tuned() {
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pre = random_checkpoint(&mut rng, &[(6, 4), (5, 6)]);
            let ft = random_checkpoint(&mut rng, &[(6, 4), (5, 6)]);
            let d = delta("t", &ft, &pre).unwrap();
            let bundle =
                decompose_task(&d, |_, w| w.rows().min(w.cols())).unwrap();
            let merged = tsv_merge(&pre, &[bundle], 1.0, RankPolicy::Strict).unwrap();
            assert!(max_abs_diff(&merged.weights, &ft) <= 1e-5);
        }
    }

    #[test]
    fn zero_deltas_reproduce_pre_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pre = random_checkpoint(&mut rng, &[(4, 4)]);
        let d = delta("t", &pre, &pre).unwrap();
        let b1 = decompose_task(&d, |_, _| 2).unwrap();
        let mut b2 = b1.clone();
        b2.task_id = "u".into();
        let merged = tsv_merge(&pre, &[b1, b2, ], 1.0, RankPolicy::Strict).unwrap();
        assert_eq!(merged.weights.layers[0].weights, pre.layers[0].weights);
    }

    #[test]
    fn orthogonal_factor_columns_merge_additively() {
        // Two rank-1 deltas on disjoint coordinate blocks of a 4x4 layer.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let pre = random_checkpoint(&mut rng, &[(4, 4)]);
        let mut ft1 = pre.clone();
        ft1.layers[0].weights = Matrix::from_fn(4, 4, |i, j| {
            pre.layers[0].weights.get(i, j) + if i == 0 && j == 0 { 2.0 } else { 0.0 }
        });
        let mut ft2 = pre.clone();
        ft2.layers[0].weights = Matrix::from_fn(4, 4, |i, j| {
            pre.layers[0].weights.get(i, j) + if i == 1 && j == 1 { 3.0 } else { 0.0 }
        });
        let d1 = delta("a", &ft1, &pre).unwrap();
        let d2 = delta("b", &ft2, &pre).unwrap();
        let b1 = decompose_task(&d1, |_, _| 1).unwrap();
        let b2 = decompose_task(&d2, |_, _| 1).unwrap();
        let merged = tsv_merge(&pre, &[b1, b2], 1.0, RankPolicy::Strict).unwrap();
        let expected = apply_deltas(&pre, &[&d1, &d2], 1.0).unwrap();
        assert!(max_abs_diff(&merged.weights, &expected) <= 1e-5);
    }

    #[test]
    fn task_order_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let pre = random_checkpoint(&mut rng, &[(8, 8)]);
        let ft1 = random_checkpoint(&mut rng, &[(8, 8)]);
        let ft2 = random_checkpoint(&mut rng, &[(8, 8)]);
        let b1 = decompose_task(&delta("a", &ft1, &pre).unwrap(), |_, _| 2).unwrap();
        let b2 = decompose_task(&delta("b", &ft2, &pre).unwrap(), |_, _| 2).unwrap();
        let ab = tsv_merge(&pre, &[b1.clone(), b2.clone()], 1.0, RankPolicy::Strict).unwrap();
        let ba = tsv_merge(&pre, &[b2, b1], 1.0, RankPolicy::Strict).unwrap();
        assert!(max_abs_diff(&ab.weights, &ba.weights) <= 1e-5);
    }

    #[test]
    fn rerun_is_bit_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pre = random_checkpoint(&mut rng, &[(6, 6)]);
        let ft = random_checkpoint(&mut rng, &[(6, 6)]);
        let b = decompose_task(&delta("a", &ft, &pre).unwrap(), |_, _| 3).unwrap();
        let m1 = tsv_merge(&pre, &[b.clone()], 0.7, RankPolicy::Strict).unwrap();
        let m2 = tsv_merge(&pre, &[b], 0.7, RankPolicy::Strict).unwrap();
        assert_eq!(m1.weights, m2.weights);
    }

    #[test]
    fn uniform_reduction_caps_concatenated_rank() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pre = random_checkpoint(&mut rng, &[(4, 4)]);
        let bundles: Vec<_> = (0..2)
            .map(|i| {
                let ft = random_checkpoint(&mut rng, &[(4, 4)]);
                let mut d = delta("t", &ft, &pre).unwrap();
                d.task_id = format!("t{i}");
                decompose_task(&d, |_, _| 4).unwrap()
            })
            .collect();
        assert!(matches!(
            tsv_merge(&pre, &bundles, 1.0, RankPolicy::Strict),
            Err(Error::InvalidRank { .. })
        ));
        let merged = tsv_merge(&pre, &bundles, 1.0, RankPolicy::UniformReduce).unwrap();
        assert!(merged.weights.layers[0].weights.is_finite());
    }

    #[test]
    fn task_arithmetic_basics() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pre = random_checkpoint(&mut rng, &[(3, 3)]);
        let ft = random_checkpoint(&mut rng, &[(3, 3)]);
        let d = delta("a", &ft, &pre).unwrap();

        let zero_alpha = task_arithmetic_merge(&pre, &[d.clone()], 0.0).unwrap();
        assert_eq!(zero_alpha.weights.layers[0].weights, pre.layers[0].weights);

        let full = task_arithmetic_merge(&pre, &[d.clone()], 1.0).unwrap();
        assert_eq!(full.weights.layers[0].weights, ft.layers[0].weights);

        let mut neg = d.clone();
        neg.task_id = "b".into();
        neg.layers[0].weights = d.layers[0].weights.scale(-1.0);
        if let Some(b) = &mut neg.layers[0].bias {
            *b = b.scale(-1.0);
        }
        let cancel = task_arithmetic_merge(&pre, &[d, neg], 1.0).unwrap();
        assert!(max_abs_diff(&cancel.weights, &pre) <= 1e-6);
    }

    #[test]
    fn weight_average_basics() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let pre = random_checkpoint(&mut rng, &[(2, 2)]);
        let same = weight_average(&[pre.clone(), pre.clone()]).unwrap();
        assert!(max_abs_diff(&same.weights, &pre) <= 1e-7);

        let mut negated = pre.clone();
        negated.layers[0].weights = pre.layers[0].weights.scale(-1.0);
        if let Some(b) = &mut negated.layers[0].bias {
            *b = b.iter().map(|x| -x).collect();
        }
        let zeroed = weight_average(&[pre.clone(), negated]).unwrap();
        assert!(zeroed.weights.layers[0].weights.data().iter().all(|&x| x.abs() < 1e-7));
    }

    #[test]
    fn weight_average_hand_arithmetic() {
        // Mean of N copies of pre and one ft: pre + (ft - pre)/(N+1).
        let make = |vals: [f32; 4]| Checkpoint {
            layers: vec![Layer {
                name: "l0".into(),
                weights: Matrix::new(2, 2, vals.to_vec()).unwrap(),
                bias: None,
                activation: Activation::Identity,
            }],
            heads: vec![],
            meta: BTreeMap::new(),
        };
        let pre = make([1.0, 2.0, 3.0, 4.0]);
        let ft = make([5.0, 2.0, 3.0, 0.0]);
        let avg = weight_average(&[pre.clone(), pre.clone(), pre.clone(), ft.clone()]).unwrap();
        for idx in 0..4 {
            let p = pre.layers[0].weights.data()[idx] as f64;
            let f = ft.layers[0].weights.data()[idx] as f64;
            let expected = p + (f - p) / 4.0;
            let got = avg.weights.layers[0].weights.data()[idx] as f64;
            assert!((got - expected).abs() < 1e-6);
        }
    }
}
