use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{payload_slice, read_frame, write_frame, CHECKPOINT_MAGIC};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F16,
    U8,
    U16,
}

impl DType {
    pub fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F16 | DType::U16 => 2,
            DType::U8 => 1,
        }
    }
}

/// One named tensor with raw little-endian row-major payload.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorRecord {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub data: Vec<u8>,
}

impl TensorRecord {
    pub fn from_f32(name: impl Into<String>, shape: Vec<usize>, values: &[f32]) -> Self {
        assert_eq!(shape.iter().product::<usize>(), values.len(), "shape/value count mismatch");
        let data = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        Self { name: name.into(), dtype: DType::F32, shape, data }
    }

    /// Stores `values` as f32.
    pub fn from_f64(name: impl Into<String>, shape: Vec<usize>, values: &[f64]) -> Self {
        let narrowed: Vec<f32> = values.iter().map(|&v| v as f32).collect();
        Self::from_f32(name, shape, &narrowed)
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    /// Widens the payload to f64 regardless of the stored dtype.
    pub fn to_f64(&self) -> Vec<f64> {
        match self.dtype {
            DType::F32 => self
                .data
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
                .collect(),
            DType::F16 => self
                .data
                .chunks_exact(2)
                .map(|b| half::f16::from_bits(u16::from_le_bytes([b[0], b[1]])).to_f64())
                .collect(),
            DType::U16 => self
                .data
                .chunks_exact(2)
                .map(|b| u16::from_le_bytes([b[0], b[1]]) as f64)
                .collect(),
            DType::U8 => self.data.iter().map(|&b| b as f64).collect(),
        }
    }

    fn check(&self) -> Result<()> {
        if self.shape.contains(&0) {
            return Err(Error::MalformedFile(format!("tensor `{}` has a zero dimension", self.name)));
        }
        if self.data.len() != self.numel() * self.dtype.width() {
            return Err(Error::MalformedFile(format!(
                "tensor `{}` has {} bytes, shape {:?} needs {}",
                self.name,
                self.data.len(),
                self.shape,
                self.numel() * self.dtype.width()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    Conv,
    Deconv,
    Fc,
    BatchNorm,
    Add,
    /// Channel concatenation of its producers, in edge declaration order.
    Concat,
    Relu,
    Pool,
    Reshape,
    Input,
    Output,
}

impl LayerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LayerKind::Conv => "conv",
            LayerKind::Deconv => "deconv",
            LayerKind::Fc => "fc",
            LayerKind::BatchNorm => "batchnorm",
            LayerKind::Add => "add",
            LayerKind::Concat => "concat",
            LayerKind::Relu => "relu",
            LayerKind::Pool => "pool",
            LayerKind::Reshape => "reshape",
            LayerKind::Input => "input",
            LayerKind::Output => "output",
        }
    }

    /// Layers that own a weight matrix and can be vector-quantized.
    pub fn has_weight_matrix(self) -> bool {
        matches!(self, LayerKind::Conv | LayerKind::Deconv | LayerKind::Fc)
    }
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LayerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "conv" => LayerKind::Conv,
            "deconv" => LayerKind::Deconv,
            "fc" => LayerKind::Fc,
            "batchnorm" => LayerKind::BatchNorm,
            "add" => LayerKind::Add,
            "concat" => LayerKind::Concat,
            "relu" => LayerKind::Relu,
            "pool" => LayerKind::Pool,
            "reshape" => LayerKind::Reshape,
            "input" => LayerKind::Input,
            "output" => LayerKind::Output,
            other => return Err(Error::UnknownLayerKind(other.to_string())),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerMeta {
    pub name: String,
    pub kind: LayerKind,
    pub kernel: usize,
    pub c_in: usize,
    pub c_out: usize,
}

impl LayerMeta {
    pub fn new(name: impl Into<String>, kind: LayerKind, kernel: usize, c_in: usize, c_out: usize) -> Self {
        Self { name: name.into(), kind, kernel, c_in, c_out }
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    /// Axis order of the stored weight tensor.
    ///
    /// conv: `(C_in, C_out, K, K)`; deconv: `(C_out, C_in, K, K)`;
    /// fc: `(C_in, C_out)`.
    pub fn weight_shape(&self) -> Vec<usize> {
        match self.kind {
            LayerKind::Conv => vec![self.c_in, self.c_out, self.kernel, self.kernel],
            LayerKind::Deconv => vec![self.c_out, self.c_in, self.kernel, self.kernel],
            LayerKind::Fc => vec![self.c_in, self.c_out],
            LayerKind::BatchNorm => vec![self.c_out],
            _ => Vec::new(),
        }
    }
}

/// Named tensors plus the layer DAG they belong to.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ModelCheckpoint {
    pub tensors: Vec<TensorRecord>,
    pub layers: Vec<LayerMeta>,
    pub edges: Vec<(String, String)>,
}

impl ModelCheckpoint {
    pub fn tensor(&self, name: &str) -> Option<&TensorRecord> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut TensorRecord> {
        self.tensors.iter_mut().find(|t| t.name == name)
    }

    pub fn layer(&self, name: &str) -> Option<&LayerMeta> {
        self.layers.iter().find(|l| l.name == name)
    }

    pub fn producers<'a>(&'a self, layer: &'a str) -> impl Iterator<Item = &'a str> + 'a {
        self.edges.iter().filter(move |(_, c)| c == layer).map(|(p, _)| p.as_str())
    }

    pub fn consumers<'a>(&'a self, layer: &'a str) -> impl Iterator<Item = &'a str> + 'a {
        self.edges.iter().filter(move |(p, _)| p == layer).map(|(_, c)| c.as_str())
    }

    /// Layer indices in a topological order; ties follow declaration order.
    pub fn topological_order(&self) -> Result<Vec<usize>> {
        let index: HashMap<&str, usize> =
            self.layers.iter().enumerate().map(|(i, l)| (l.name.as_str(), i)).collect();
        let mut indegree = vec![0usize; self.layers.len()];
        let mut out_edges = vec![Vec::new(); self.layers.len()];
        for (p, c) in &self.edges {
            let pi = *index.get(p.as_str()).ok_or_else(|| Error::DanglingEdge(p.clone()))?;
            let ci = *index.get(c.as_str()).ok_or_else(|| Error::DanglingEdge(c.clone()))?;
            out_edges[pi].push(ci);
            indegree[ci] += 1;
        }
        let mut ready: std::collections::BTreeSet<usize> =
            (0..self.layers.len()).filter(|&i| indegree[i] == 0).collect();
        let mut order = Vec::with_capacity(self.layers.len());
        while let Some(i) = ready.pop_first() {
            order.push(i);
            for &c in &out_edges[i] {
                indegree[c] -= 1;
                if indegree[c] == 0 {
                    ready.insert(c);
                }
            }
        }
        if order.len() != self.layers.len() {
            return Err(Error::InvalidGraph("edge list contains a cycle".into()));
        }
        Ok(order)
    }

    /// Checks name uniqueness, edge endpoints and the single-source DAG shape.
    pub fn validate_graph(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for l in &self.layers {
            if !seen.insert(l.name.as_str()) {
                return Err(Error::InvalidGraph(format!("duplicate layer `{}`", l.name)));
            }
        }
        for (p, c) in &self.edges {
            for end in [p, c] {
                if !seen.contains(end.as_str()) {
                    return Err(Error::DanglingEdge(end.clone()));
                }
            }
        }
        if self.layers.is_empty() {
            return Ok(());
        }
        let inputs = self.layers.iter().filter(|l| l.kind == LayerKind::Input).count();
        let outputs = self.layers.iter().filter(|l| l.kind == LayerKind::Output).count();
        if inputs != 1 {
            return Err(Error::InvalidGraph(format!("expected one input node, found {inputs}")));
        }
        if outputs == 0 {
            return Err(Error::InvalidGraph("no output node".into()));
        }
        for l in &self.layers {
            let indeg = self.producers(&l.name).count();
            if l.kind == LayerKind::Input && indeg != 0 {
                return Err(Error::InvalidGraph(format!("input `{}` has producers", l.name)));
            }
            if l.kind != LayerKind::Input && indeg == 0 {
                return Err(Error::InvalidGraph(format!("`{}` has no producer", l.name)));
            }
            if l.kind == LayerKind::Output && self.consumers(&l.name).next().is_some() {
                return Err(Error::InvalidGraph(format!("output `{}` has consumers", l.name)));
            }
        }
        self.topological_order().map(|_| ())
    }

    fn validate_tensors(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for t in &self.tensors {
            if !seen.insert(t.name.as_str()) {
                return Err(Error::DuplicateTensorName(t.name.clone()));
            }
            t.check()?;
        }
        if self.tensors.is_empty() {
            return Ok(());
        }
        for l in self.layers.iter().filter(|l| l.kind.has_weight_matrix()) {
            let w = self.tensor(&l.weight_name()).ok_or_else(|| Error::MissingTensor(l.weight_name()))?;
            if w.shape != l.weight_shape() {
                return Err(Error::ShapeMismatch(format!(
                    "`{}` has shape {:?}, layer expects {:?}",
                    w.name,
                    w.shape,
                    l.weight_shape()
                )));
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.validate_tensors()?;
        self.validate_graph()
    }
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    dtype: DType,
    shape: Vec<usize>,
    offset: u64,
    nbytes: u64,
}

#[derive(Serialize, Deserialize)]
struct CheckpointManifest {
    layers: Vec<LayerMeta>,
    edges: Vec<(String, String)>,
    tensors: Vec<TensorEntry>,
}

pub fn checkpoint_to_bytes(ckpt: &ModelCheckpoint) -> Vec<u8> {
    let mut offset = 0u64;
    let tensors = ckpt
        .tensors
        .iter()
        .map(|t| {
            let e = TensorEntry {
                name: t.name.clone(),
                dtype: t.dtype,
                shape: t.shape.clone(),
                offset,
                nbytes: t.data.len() as u64,
            };
            offset += t.data.len() as u64;
            e
        })
        .collect();
    let manifest = CheckpointManifest { layers: ckpt.layers.clone(), edges: ckpt.edges.clone(), tensors };
    let manifest = serde_json::to_vec(&manifest).expect("manifest serializes");
    let mut out = write_frame(CHECKPOINT_MAGIC, &manifest, offset as usize);
    for t in &ckpt.tensors {
        out.extend_from_slice(&t.data);
    }
    out
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<ModelCheckpoint> {
    let (manifest, payload) = read_frame(CHECKPOINT_MAGIC, bytes)?;
    let manifest: CheckpointManifest = serde_json::from_slice(manifest)
        .map_err(|e| Error::MalformedFile(format!("manifest: {e}")))?;
    let mut tensors = Vec::with_capacity(manifest.tensors.len());
    for e in manifest.tensors {
        let data = payload_slice(payload, e.offset, e.nbytes, &e.name)?.to_vec();
        tensors.push(TensorRecord { name: e.name, dtype: e.dtype, shape: e.shape, data });
    }
    let ckpt = ModelCheckpoint { tensors, layers: manifest.layers, edges: manifest.edges };
    ckpt.validate()?;
    Ok(ckpt)
}

pub fn save_checkpoint(ckpt: &ModelCheckpoint, path: impl AsRef<Path>) -> Result<u64> {
    let bytes = checkpoint_to_bytes(ckpt);
    fs::write(path, &bytes)?;
    Ok(bytes.len() as u64)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelCheckpoint> {
    checkpoint_from_bytes(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_tensor() -> ModelCheckpoint {
        ModelCheckpoint {
            tensors: vec![
                TensorRecord::from_f32("a", vec![2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]),
                TensorRecord::from_f32("b", vec![4], &[-1.0, 0.5, 0.25, 8.0]),
            ],
            ..Default::default()
        }
    }

    fn mlp() -> ModelCheckpoint {
        let layers = vec![
            LayerMeta::new("input", LayerKind::Input, 0, 2, 2),
            LayerMeta::new("fc1", LayerKind::Fc, 1, 2, 3),
            LayerMeta::new("relu", LayerKind::Relu, 1, 3, 3),
            LayerMeta::new("fc2", LayerKind::Fc, 1, 3, 1),
            LayerMeta::new("output", LayerKind::Output, 0, 1, 0),
        ];
        let edges = [("input", "fc1"), ("fc1", "relu"), ("relu", "fc2"), ("fc2", "output")]
            .iter()
            .map(|(a, b)| (a.to_string(), b.to_string()))
            .collect();
        ModelCheckpoint {
            tensors: vec![
                TensorRecord::from_f32("fc1.weight", vec![2, 3], &[0.0; 6]),
                TensorRecord::from_f32("fc2.weight", vec![3, 1], &[0.0; 3]),
            ],
            layers,
            edges,
        }
    }

    #[test]
    fn round_trip_two_tensors() {
        let ckpt = two_tensor();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.pqfn");
        let n = save_checkpoint(&ckpt, &path).unwrap();
        assert_eq!(n, fs::metadata(&path).unwrap().len());
        assert_eq!(load_checkpoint(&path).unwrap(), ckpt);
    }

    #[test]
    fn truncated_mid_tensor() {
        let bytes = checkpoint_to_bytes(&two_tensor());
        let err = checkpoint_from_bytes(&bytes[..bytes.len() - 5]).unwrap_err();
        assert!(matches!(err, Error::MalformedFile(_)), "{err}");
    }

    #[test]
    fn bad_magic() {
        let mut bytes = checkpoint_to_bytes(&two_tensor());
        bytes[0] = b'X';
        assert!(matches!(checkpoint_from_bytes(&bytes), Err(Error::MalformedFile(_))));
    }

    #[test]
    fn dangling_edge() {
        let mut ckpt = mlp();
        ckpt.edges.push(("fc2".into(), "x".into()));
        let bytes = checkpoint_to_bytes(&ckpt);
        match checkpoint_from_bytes(&bytes) {
            Err(Error::DanglingEdge(name)) => assert_eq!(name, "x"),
            other => panic!("expected DanglingEdge, got {other:?}"),
        }
    }

    #[test]
    fn duplicate_tensor_name() {
        let mut ckpt = two_tensor();
        ckpt.tensors[1].name = "a".into();
        let bytes = checkpoint_to_bytes(&ckpt);
        assert!(matches!(checkpoint_from_bytes(&bytes), Err(Error::DuplicateTensorName(_))));
    }

    #[test]
    fn graph_checks() {
        let ckpt = mlp();
        ckpt.validate().unwrap();
        assert_eq!(ckpt.topological_order().unwrap(), vec![0, 1, 2, 3, 4]);

        let mut cyclic = mlp();
        cyclic.edges.push(("fc2".into(), "fc1".into()));
        assert!(matches!(cyclic.validate_graph(), Err(Error::InvalidGraph(_))));

        let mut missing_weight = mlp();
        missing_weight.tensors.pop();
        assert!(matches!(missing_weight.validate(), Err(Error::MissingTensor(_))));
    }
}
