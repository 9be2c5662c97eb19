//! Model checkpoints, task deltas, and the MTSV container format.
//!
//! MTSV layout (all integers little-endian):
//! magic `"MTSV"` (4 bytes) | format version u32 (currently 1) |
//! header length u64 | UTF-8 JSON header | raw f32 payload at the
//! offsets declared in the header. Offsets are relative to the start of
//! the payload section. Round-trips are byte-exact.

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashSet};
use std::io::{Read, Write};
use std::path::Path;

pub const MAGIC: [u8; 4] = *b"MTSV";
pub const FORMAT_VERSION: u32 = 1;

/// Per-layer activation tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Relu,
    Gelu,
}

impl Activation {
    pub fn apply(&self, z: &mut [f64]) {
        match self {
            Activation::Identity => {}
            Activation::Relu => {
                for x in z.iter_mut() {
                    if *x < 0.0 {
                        *x = 0.0;
                    }
                }
            }
            Activation::Gelu => {
                // tanh approximation
                for x in z.iter_mut() {
                    let c = (2.0 / std::f64::consts::PI).sqrt();
                    *x = 0.5 * *x * (1.0 + (c * (*x + 0.044715 * x.powi(3))).tanh());
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub name: String,
    pub weights: Matrix,
    pub bias: Option<Vec<f32>>,
    pub activation: Activation,
}

/// Task classification head: logits = `weights * z + bias`.
#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    pub name: String,
    pub weights: Matrix,
    pub bias: Vec<f32>,
}

impl Head {
    pub fn classes(&self) -> usize {
        self.weights.rows()
    }
}

/// Ordered stack of dense layers plus optional per-task heads.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub layers: Vec<Layer>,
    pub heads: Vec<Head>,
    pub meta: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Topology("checkpoint has no layers".into()));
        }
        let mut names = HashSet::new();
        for layer in &self.layers {
            if !names.insert(layer.name.as_str()) {
                return Err(Error::Topology(format!(
                    "duplicate layer name {:?}",
                    layer.name
                )));
            }
            if let Some(b) = &layer.bias {
                if b.len() != layer.weights.rows() {
                    return Err(Error::Topology(format!(
                        "layer {:?}: bias length {} does not match output dimension {}",
                        layer.name,
                        b.len(),
                        layer.weights.rows()
                    )));
                }
                if !b.iter().all(|x| x.is_finite()) {
                    return Err(Error::NonFinite {
                        context: format!("bias of layer {:?}", layer.name),
                    });
                }
            }
            if !layer.weights.is_finite() {
                return Err(Error::NonFinite {
                    context: format!("weights of layer {:?}", layer.name),
                });
            }
        }
        for pair in self.layers.windows(2) {
            if pair[1].weights.cols() != pair[0].weights.rows() {
                return Err(Error::Topology(format!(
                    "layer {:?} expects input dimension {}, but layer {:?} outputs {}",
                    pair[1].name,
                    pair[1].weights.cols(),
                    pair[0].name,
                    pair[0].weights.rows()
                )));
            }
        }
        let d = self.layers.last().unwrap().weights.rows();
        let mut head_names = HashSet::new();
        for head in &self.heads {
            if !head_names.insert(head.name.as_str()) {
                return Err(Error::Topology(format!(
                    "duplicate head name {:?}",
                    head.name
                )));
            }
            if head.weights.cols() != d {
                return Err(Error::Topology(format!(
                    "head {:?} expects input dimension {}, final layer outputs {}",
                    head.name,
                    head.weights.cols(),
                    d
                )));
            }
            if head.bias.len() != head.weights.rows() {
                return Err(Error::Topology(format!(
                    "head {:?}: bias length {} does not match class count {}",
                    head.name,
                    head.bias.len(),
                    head.weights.rows()
                )));
            }
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weights.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().weights.rows()
    }

    pub fn layer_index(&self, name: &str) -> Result<usize> {
        self.layers
            .iter()
            .position(|l| l.name == name)
            .ok_or_else(|| Error::UnknownLayer(name.into()))
    }

    /// Same layer names, shapes, and activations.
    pub fn same_topology(&self, other: &Checkpoint) -> bool {
        self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|(a, b)| {
                a.name == b.name
                    && a.weights.rows() == b.weights.rows()
                    && a.weights.cols() == b.weights.cols()
                    && a.bias.is_some() == b.bias.is_some()
                    && a.activation == b.activation
            })
    }
}

/// Per-layer weight differences for one task. Biases are differenced
/// alongside the weights and stored as width-1 matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskDelta {
    pub task_id: String,
    pub layers: Vec<DeltaLayer>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeltaLayer {
    pub name: String,
    pub weights: Matrix,
    pub bias: Option<Matrix>,
}

/// `ft - pre`, layer by layer.
pub fn delta(task_id: &str, ft: &Checkpoint, pre: &Checkpoint) -> Result<TaskDelta> {
    if !ft.same_topology(pre) {
        return Err(Error::Topology(
            "fine-tuned and pretrained checkpoints have different topologies".into(),
        ));
    }
    let mut layers = Vec::with_capacity(ft.layers.len());
    for (f, p) in ft.layers.iter().zip(&pre.layers) {
        let weights = f.weights.add_scaled(&p.weights, -1.0)?;
        let bias = match (&f.bias, &p.bias) {
            (Some(fb), Some(pb)) => {
                let diff: Vec<f32> = fb.iter().zip(pb).map(|(a, b)| a - b).collect();
                Some(Matrix::column(&diff))
            }
            _ => None,
        };
        layers.push(DeltaLayer {
            name: f.name.clone(),
            weights,
            bias,
        });
    }
    Ok(TaskDelta {
        task_id: task_id.into(),
        layers,
    })
}

/// `pre + alpha * sum(deltas)`, layer by layer (heads and meta from `pre`).
pub fn apply_deltas(pre: &Checkpoint, deltas: &[&TaskDelta], alpha: f64) -> Result<Checkpoint> {
    let mut out = pre.clone();
    for d in deltas {
        if d.layers.len() != out.layers.len()
            || d.layers.iter().zip(&out.layers).any(|(a, b)| a.name != b.name)
        {
            return Err(Error::Topology(format!(
                "delta for task {:?} does not match the checkpoint's layers",
                d.task_id
            )));
        }
        for (layer, dl) in out.layers.iter_mut().zip(&d.layers) {
            layer.weights = layer.weights.add_scaled(&dl.weights, alpha)?;
            if let (Some(b), Some(db)) = (&mut layer.bias, &dl.bias) {
                for (x, dx) in b.iter_mut().zip(db.data()) {
                    *x = (*x as f64 + alpha * *dx as f64) as f32;
                }
            }
        }
    }
    Ok(out)
}

/// Row-major flattening of every delta matrix (weights, then bias where
/// present), concatenated in layer order.
pub fn flatten(d: &TaskDelta) -> Vec<f64> {
    let mut out = Vec::new();
    for layer in &d.layers {
        out.extend(layer.weights.data().iter().map(|&x| x as f64));
        if let Some(b) = &layer.bias {
            out.extend(b.data().iter().map(|&x| x as f64));
        }
    }
    out
}

/// Flattening of a single layer's delta matrices.
pub fn flatten_layer(d: &TaskDelta, layer_idx: usize) -> Vec<f64> {
    let layer = &d.layers[layer_idx];
    let mut out: Vec<f64> = layer.weights.data().iter().map(|&x| x as f64).collect();
    if let Some(b) = &layer.bias {
        out.extend(b.data().iter().map(|&x| x as f64));
    }
    out
}

// ── MTSV container ──────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    role: String,
    shape: [usize; 2],
    dtype: String,
    offset: u64,
    byte_length: u64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TopologyHeader {
    pub layer_order: Vec<String>,
    pub activations: BTreeMap<String, Activation>,
    pub heads: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ContainerHeader {
    tensors: Vec<TensorEntry>,
    topology: TopologyHeader,
    meta: BTreeMap<String, String>,
}

/// One named f32 tensor inside a container.
#[derive(Debug, Clone)]
pub struct ContainerTensor {
    pub name: String,
    pub role: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl ContainerTensor {
    pub fn from_matrix(name: &str, role: &str, m: &Matrix) -> Self {
        Self {
            name: name.into(),
            role: role.into(),
            rows: m.rows(),
            cols: m.cols(),
            data: m.data().to_vec(),
        }
    }

    pub fn from_vector(name: &str, role: &str, v: &[f32]) -> Self {
        Self {
            name: name.into(),
            role: role.into(),
            rows: v.len(),
            cols: 1,
            data: v.to_vec(),
        }
    }

    pub fn to_matrix(&self) -> Result<Matrix> {
        Matrix::new(self.rows, self.cols, self.data.clone())
    }
}

/// Fully parsed container.
#[derive(Debug, Clone)]
pub struct Container {
    pub tensors: Vec<ContainerTensor>,
    pub topology: TopologyHeader,
    pub meta: BTreeMap<String, String>,
}

impl Container {
    pub fn find(&self, name: &str, role: &str) -> Option<&ContainerTensor> {
        self.tensors
            .iter()
            .find(|t| t.name == name && t.role == role)
    }
}

pub fn write_container(
    path: &Path,
    tensors: &[ContainerTensor],
    topology: &TopologyHeader,
    meta: &BTreeMap<String, String>,
) -> Result<()> {
    let mut entries = Vec::with_capacity(tensors.len());
    let mut offset = 0u64;
    for t in tensors {
        let byte_length = (t.rows * t.cols * 4) as u64;
        if t.data.len() != t.rows * t.cols {
            return Err(Error::ShapeInconsistency(format!(
                "tensor {:?}: {}x{} declared but {} values given",
                t.name,
                t.rows,
                t.cols,
                t.data.len()
            )));
        }
        entries.push(TensorEntry {
            name: t.name.clone(),
            role: t.role.clone(),
            shape: [t.rows, t.cols],
            dtype: "f32".into(),
            offset,
            byte_length,
        });
        offset += byte_length;
    }
    let header = ContainerHeader {
        tensors: entries,
        topology: topology.clone(),
        meta: meta.clone(),
    };
    let header_json = serde_json::to_vec(&header)
        .map_err(|e| Error::BadHeader(format!("serialization failed: {e}")))?;

    let io_err = |e: std::io::Error| Error::Io {
        path: path.display().to_string(),
        source: e,
    };
    let mut file = std::fs::File::create(path).map_err(io_err)?;
    file.write_all(&MAGIC).map_err(io_err)?;
    file.write_all(&FORMAT_VERSION.to_le_bytes()).map_err(io_err)?;
    file.write_all(&(header_json.len() as u64).to_le_bytes())
        .map_err(io_err)?;
    file.write_all(&header_json).map_err(io_err)?;
    let mut payload = Vec::with_capacity(offset as usize);
    for t in tensors {
        for &x in &t.data {
            payload.extend_from_slice(&x.to_le_bytes());
        }
    }
    file.write_all(&payload).map_err(io_err)?;
    Ok(())
}

pub fn read_container(path: &Path) -> Result<Container> {
    let io_err = |e: std::io::Error| Error::Io {
        path: path.display().to_string(),
        source: e,
    };
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(io_err)?
        .read_to_end(&mut bytes)
        .map_err(io_err)?;

    if bytes.len() < 16 {
        return Err(Error::TruncatedPayload {
            context: format!("file is {} bytes, shorter than the fixed header", bytes.len()),
        });
    }
    let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
    if magic != MAGIC {
        return Err(Error::BadMagic(magic));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    if bytes.len() < 16 + header_len {
        return Err(Error::TruncatedPayload {
            context: format!(
                "header declares {header_len} bytes but only {} remain",
                bytes.len() - 16
            ),
        });
    }
    let header: ContainerHeader = serde_json::from_slice(&bytes[16..16 + header_len])
        .map_err(|e| Error::BadHeader(e.to_string()))?;
    let payload = &bytes[16 + header_len..];

    let mut tensors = Vec::with_capacity(header.tensors.len());
    for e in &header.tensors {
        if e.dtype != "f32" {
            return Err(Error::BadHeader(format!(
                "tensor {:?}: unsupported dtype {:?}",
                e.name, e.dtype
            )));
        }
        let count = e.shape[0] * e.shape[1];
        if e.byte_length as usize != count * 4 {
            return Err(Error::ShapeInconsistency(format!(
                "tensor {:?}: shape {}x{} implies {} bytes, header declares {}",
                e.name,
                e.shape[0],
                e.shape[1],
                count * 4,
                e.byte_length
            )));
        }
        let start = e.offset as usize;
        let end = start + e.byte_length as usize;
        if end > payload.len() {
            return Err(Error::TruncatedPayload {
                context: format!(
                    "tensor {:?} needs payload bytes {start}..{end}, payload is {} bytes",
                    e.name,
                    payload.len()
                ),
            });
        }
        let mut data = Vec::with_capacity(count);
        for chunk in payload[start..end].chunks_exact(4) {
            let x = f32::from_le_bytes(chunk.try_into().unwrap());
            if x.is_nan() {
                return Err(Error::NanPayload(e.name.clone()));
            }
            data.push(x);
        }
        tensors.push(ContainerTensor {
            name: e.name.clone(),
            role: e.role.clone(),
            rows: e.shape[0],
            cols: e.shape[1],
            data,
        });
    }
    Ok(Container {
        tensors,
        topology: header.topology,
        meta: header.meta,
    })
}

/// Serialize a checkpoint to an MTSV file.
pub fn write_checkpoint(c: &Checkpoint, path: &Path) -> Result<()> {
    c.validate()?;
    let mut tensors = Vec::new();
    let mut topology = TopologyHeader::default();
    for layer in &c.layers {
        topology.layer_order.push(layer.name.clone());
        topology
            .activations
            .insert(layer.name.clone(), layer.activation);
        tensors.push(ContainerTensor::from_matrix(&layer.name, "layer", &layer.weights));
        if let Some(b) = &layer.bias {
            tensors.push(ContainerTensor::from_vector(&layer.name, "bias", b));
        }
    }
    for head in &c.heads {
        topology.heads.push(head.name.clone());
        tensors.push(ContainerTensor::from_matrix(&head.name, "head", &head.weights));
        tensors.push(ContainerTensor::from_vector(&head.name, "head_bias", &head.bias));
    }
    write_container(path, &tensors, &topology, &c.meta)
}

/// Parse an MTSV file into a checkpoint satisfying all invariants.
pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let container = read_container(path)?;
    checkpoint_from_container(&container)
}

pub fn checkpoint_from_container(container: &Container) -> Result<Checkpoint> {
    let mut layers = Vec::new();
    for name in &container.topology.layer_order {
        let weights = container
            .find(name, "layer")
            .ok_or_else(|| Error::ShapeInconsistency(format!("missing layer tensor {name:?}")))?
            .to_matrix()?;
        let bias = container
            .find(name, "bias")
            .map(|t| t.data.clone());
        let activation = *container
            .topology
            .activations
            .get(name)
            .unwrap_or(&Activation::Identity);
        layers.push(Layer {
            name: name.clone(),
            weights,
            bias,
            activation,
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
    let c = Checkpoint {
        layers,
        heads,
        meta: container.meta.clone(),
    };
    c.validate()?;
    Ok(c)
}
