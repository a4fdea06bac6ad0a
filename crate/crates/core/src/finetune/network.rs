//! A small DAG evaluator with reverse-mode gradients.
//!
//! Activations are `(batch, features)` matrices; a feature index is
//! `c * side^2 + y * side + x`. Convolutions run as a matrix product over
//! extracted `K x K` patches with stride 1 and same padding, using the same
//! reshaped weight layout as the codec.

use ndarray::{s, Array1, Array2, Axis};

use crate::codec::LayerEncoding;
use crate::error::{Error, Result};
use crate::layout::{reshape_record, unreshape_weight, Geometry, ReshapedWeight};
use crate::tensor_io::{LayerKind, LayerMeta, ModelCheckpoint, TensorRecord};

#[derive(Debug, Clone, PartialEq)]
pub enum WeightSource {
    /// Reshaped weight matrix, `(C_in * K^2, C_out)`.
    Raw(Array2<f64>),
    Encoded(LayerEncoding),
}

impl WeightSource {
    pub fn matrix(&self) -> Array2<f64> {
        match self {
            WeightSource::Raw(m) => m.clone(),
            WeightSource::Encoded(e) => e.decode_matrix(),
        }
    }

    pub fn dim(&self) -> (usize, usize) {
        match self {
            WeightSource::Raw(m) => m.dim(),
            WeightSource::Encoded(e) => (e.geometry.rows(), e.geometry.c_out),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ToyOp {
    Input,
    Dense { weight: WeightSource, bias: Option<Array1<f64>> },
    Conv { kernel: usize, weight: WeightSource, bias: Option<Array1<f64>> },
    Relu,
    Add,
    /// Stacks the inputs' channels in input order.
    Concat,
    /// Frozen per-channel affine map (an inference-mode batchnorm).
    Affine { scale: Array1<f64>, shift: Array1<f64> },
    /// Average pooling with stride equal to the window; 0 pools globally.
    Pool { window: usize },
    Flatten,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shape {
    pub channels: usize,
    pub side: usize,
}

impl Shape {
    pub fn width(&self) -> usize {
        self.channels * self.side * self.side
    }

    pub fn area(&self) -> usize {
        self.side * self.side
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyNode {
    pub name: String,
    pub op: ToyOp,
    pub inputs: Vec<usize>,
    pub shape: Shape,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyNetwork {
    pub nodes: Vec<ToyNode>,
    /// Output nodes; the first one feeds the loss.
    pub outputs: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub activations: Vec<Array2<f64>>,
    patches: Vec<Option<Array2<f64>>>,
    weights: Vec<Option<Array2<f64>>>,
}

impl ForwardCache {
    pub fn node(&self, i: usize) -> &Array2<f64> {
        &self.activations[i]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    /// Gradient of the reshaped weight in original row order.
    pub weight: Array2<f64>,
    pub bias: Option<Array1<f64>>,
}

#[derive(Debug, Clone)]
pub struct Gradients {
    pub layers: Vec<Option<LayerGrad>>,
    pub input: Array2<f64>,
}

fn shape_err(node: &str, why: String) -> Error {
    Error::ShapeMismatch(format!("`{node}`: {why}"))
}

impl ToyNetwork {
    pub fn new(name: impl Into<String>, input: Shape) -> Self {
        let node = ToyNode { name: name.into(), op: ToyOp::Input, inputs: Vec::new(), shape: input };
        Self { nodes: vec![node], outputs: Vec::new() }
    }

    pub fn input_shape(&self) -> Shape {
        self.nodes[0].shape
    }

    /// Appends a node after checking its inputs and inferring its shape.
    pub fn push(&mut self, name: impl Into<String>, op: ToyOp, inputs: Vec<usize>) -> Result<usize> {
        let name = name.into();
        if inputs.is_empty() || inputs.iter().any(|&i| i >= self.nodes.len()) {
            return Err(Error::InvalidGraph(format!("`{name}` has missing inputs")));
        }
        let first = self.nodes[inputs[0]].shape;
        if !matches!(op, ToyOp::Add | ToyOp::Concat) && inputs.len() != 1 {
            return Err(Error::InvalidGraph(format!("`{name}` takes exactly one input")));
        }
        let shape = match &op {
            ToyOp::Input => return Err(Error::InvalidGraph("only one input node".into())),
            ToyOp::Dense { weight, bias } => {
                let (rows, cols) = weight.dim();
                if rows != first.width() {
                    return Err(shape_err(&name, format!("{rows} weight rows for {} features", first.width())));
                }
                if bias.as_ref().is_some_and(|b| b.len() != cols) {
                    return Err(shape_err(&name, "bias length".into()));
                }
                Shape { channels: cols, side: 1 }
            }
            ToyOp::Conv { kernel, weight, bias } => {
                let (rows, cols) = weight.dim();
                if *kernel == 0 || rows != first.channels * kernel * kernel {
                    return Err(shape_err(&name, format!("{rows} weight rows for {} channels", first.channels)));
                }
                if bias.as_ref().is_some_and(|b| b.len() != cols) {
                    return Err(shape_err(&name, "bias length".into()));
                }
                Shape { channels: cols, side: first.side }
            }
            ToyOp::Relu => first,
            ToyOp::Add => {
                if inputs.iter().any(|&i| self.nodes[i].shape != first) {
                    return Err(shape_err(&name, "add inputs differ in shape".into()));
                }
                first
            }
            ToyOp::Concat => {
                if inputs.iter().any(|&i| self.nodes[i].shape.side != first.side) {
                    return Err(shape_err(&name, "concat inputs differ in side".into()));
                }
                Shape { channels: inputs.iter().map(|&i| self.nodes[i].shape.channels).sum(), side: first.side }
            }
            ToyOp::Affine { scale, shift } => {
                if scale.len() != first.channels || shift.len() != first.channels {
                    return Err(shape_err(&name, "affine length".into()));
                }
                first
            }
            ToyOp::Pool { window: 0 } => Shape { channels: first.channels, side: 1 },
            ToyOp::Pool { window } => {
                if !first.side.is_multiple_of(*window) {
                    return Err(shape_err(&name, format!("window {window} does not tile side {}", first.side)));
                }
                Shape { channels: first.channels, side: first.side / window }
            }
            ToyOp::Flatten => Shape { channels: first.width(), side: 1 },
        };
        self.nodes.push(ToyNode { name, op, inputs, shape });
        Ok(self.nodes.len() - 1)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.nodes.iter().position(|n| n.name == name)
    }

    fn output_nodes(&self) -> Vec<usize> {
        if self.outputs.is_empty() {
            vec![self.nodes.len() - 1]
        } else {
            self.outputs.clone()
        }
    }

    pub fn primary_output(&self) -> usize {
        self.output_nodes()[0]
    }

    pub fn output_width(&self) -> usize {
        self.output_nodes().iter().map(|&i| self.nodes[i].shape.width()).sum()
    }

    pub fn forward(&self, x: &Array2<f64>) -> Result<ForwardCache> {
        let width = self.input_shape().width();
        if x.ncols() != width {
            return Err(Error::ShapeMismatch(format!("input has {} features, network takes {width}", x.ncols())));
        }
        let n = self.nodes.len();
        let mut acts: Vec<Array2<f64>> = Vec::with_capacity(n);
        let mut patches = vec![None; n];
        let mut weights = vec![None; n];
        for (i, node) in self.nodes.iter().enumerate() {
            let input = node.inputs.first().map(|&j| &acts[j]);
            let out = match &node.op {
                ToyOp::Input => x.clone(),
                ToyOp::Dense { weight, bias } => {
                    let w = weight.matrix();
                    let mut y = input.unwrap().dot(&w);
                    if let Some(b) = bias {
                        y += b;
                    }
                    weights[i] = Some(w);
                    y
                }
                ToyOp::Conv { kernel, weight, bias } => {
                    let in_shape = self.nodes[node.inputs[0]].shape;
                    let w = weight.matrix();
                    let p = im2col(input.unwrap(), in_shape, *kernel);
                    let mut rows = p.dot(&w);
                    if let Some(b) = bias {
                        rows += b;
                    }
                    patches[i] = Some(p);
                    weights[i] = Some(w);
                    rows_to_features(&rows, x.nrows(), in_shape.area())
                }
                ToyOp::Relu => input.unwrap().mapv(|v| v.max(0.0)),
                ToyOp::Add => {
                    let mut y = acts[node.inputs[0]].clone();
                    for &j in &node.inputs[1..] {
                        y += &acts[j];
                    }
                    y
                }
                ToyOp::Concat => {
                    let parts: Vec<_> = node.inputs.iter().map(|&j| acts[j].view()).collect();
                    ndarray::concatenate(Axis(1), &parts).expect("concat widths checked on push")
                }
                ToyOp::Affine { scale, shift } => {
                    let area = node.shape.area();
                    let mut y = input.unwrap().clone();
                    for c in 0..node.shape.channels {
                        y.slice_mut(s![.., c * area..(c + 1) * area]).mapv_inplace(|v| v * scale[c] + shift[c]);
                    }
                    y
                }
                ToyOp::Pool { window } => pool_forward(input.unwrap(), self.nodes[node.inputs[0]].shape, *window),
                ToyOp::Flatten => input.unwrap().clone(),
            };
            acts.push(out);
        }
        Ok(ForwardCache { activations: acts, patches, weights })
    }

    /// Primary output for `x`.
    pub fn logits(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        let cache = self.forward(x)?;
        Ok(cache.activations[self.primary_output()].clone())
    }

    /// All outputs side by side.
    pub fn predict(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        let cache = self.forward(x)?;
        let outs: Vec<_> = self.output_nodes().iter().map(|&i| cache.activations[i].view()).collect();
        ndarray::concatenate(Axis(1), &outs).map_err(|e| Error::ShapeMismatch(e.to_string()))
    }

    /// Backpropagates `grad_out` (gradient of the loss with respect to the
    /// primary output) through the cached forward pass.
    pub fn backward(&self, cache: &ForwardCache, grad_out: &Array2<f64>) -> Gradients {
        let n = self.nodes.len();
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; n];
        grads[self.primary_output()] = Some(grad_out.clone());
        let mut layers = vec![None; n];
        let batch = grad_out.nrows();
        let accumulate = |slot: &mut Option<Array2<f64>>, g: Array2<f64>| match slot {
            Some(acc) => *acc += &g,
            None => *slot = Some(g),
        };
        for i in (1..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let src = node.inputs[0];
            match &node.op {
                ToyOp::Input => unreachable!(),
                ToyOp::Dense { bias, .. } => {
                    let w = cache.weights[i].as_ref().unwrap();
                    let x = &cache.activations[src];
                    layers[i] = Some(LayerGrad {
                        weight: x.t().dot(&g),
                        bias: bias.as_ref().map(|_| g.sum_axis(Axis(0))),
                    });
                    accumulate(&mut grads[src], g.dot(&w.t()));
                }
                ToyOp::Conv { kernel, bias, .. } => {
                    let in_shape = self.nodes[src].shape;
                    let w = cache.weights[i].as_ref().unwrap();
                    let p = cache.patches[i].as_ref().unwrap();
                    let rows = features_to_rows(&g, batch, in_shape.area());
                    layers[i] = Some(LayerGrad {
                        weight: p.t().dot(&rows),
                        bias: bias.as_ref().map(|_| rows.sum_axis(Axis(0))),
                    });
                    let dp = rows.dot(&w.t());
                    accumulate(&mut grads[src], col2im(&dp, batch, in_shape, *kernel));
                }
                ToyOp::Relu => {
                    let x = &cache.activations[src];
                    let mut dx = g;
                    dx.zip_mut_with(x, |d, &v| {
                        if v <= 0.0 {
                            *d = 0.0
                        }
                    });
                    accumulate(&mut grads[src], dx);
                }
                ToyOp::Add => {
                    for &j in &node.inputs {
                        accumulate(&mut grads[j], g.clone());
                    }
                }
                ToyOp::Concat => {
                    let mut at = 0;
                    for &j in &node.inputs {
                        let w = self.nodes[j].shape.width();
                        accumulate(&mut grads[j], g.slice(s![.., at..at + w]).to_owned());
                        at += w;
                    }
                }
                ToyOp::Affine { scale, .. } => {
                    let area = node.shape.area();
                    let mut dx = g;
                    for c in 0..node.shape.channels {
                        dx.slice_mut(s![.., c * area..(c + 1) * area]).mapv_inplace(|v| v * scale[c]);
                    }
                    accumulate(&mut grads[src], dx);
                }
                ToyOp::Pool { window } => {
                    accumulate(&mut grads[src], pool_backward(&g, self.nodes[src].shape, *window));
                }
                ToyOp::Flatten => accumulate(&mut grads[src], g),
            }
        }
        let input = grads[0].take().unwrap_or_else(|| Array2::zeros((batch, self.input_shape().width())));
        Gradients { layers, input }
    }

    pub fn weight_source(&self, i: usize) -> Option<&WeightSource> {
        match &self.nodes[i].op {
            ToyOp::Dense { weight, .. } | ToyOp::Conv { weight, .. } => Some(weight),
            _ => None,
        }
    }

    pub fn weight_source_mut(&mut self, i: usize) -> Option<&mut WeightSource> {
        match &mut self.nodes[i].op {
            ToyOp::Dense { weight, .. } | ToyOp::Conv { weight, .. } => Some(weight),
            _ => None,
        }
    }

    pub fn bias_mut(&mut self, i: usize) -> Option<&mut Array1<f64>> {
        match &mut self.nodes[i].op {
            ToyOp::Dense { bias, .. } | ToyOp::Conv { bias, .. } => bias.as_mut(),
            _ => None,
        }
    }

    /// Replaces the weight of the layer named like `enc` by its encoding.
    pub fn set_encoding(&mut self, enc: LayerEncoding) -> Result<()> {
        let i = self.index_of(&enc.name).ok_or_else(|| Error::MissingTensor(enc.name.clone()))?;
        let w = self
            .weight_source_mut(i)
            .ok_or_else(|| Error::UnsupportedLayerKind(format!("`{}` has no weight", enc.name)))?;
        let dim = (enc.geometry.rows(), enc.geometry.c_out);
        if w.dim() != dim {
            return Err(Error::ShapeMismatch(format!("`{}`: encoding is {dim:?}, layer is {:?}", enc.name, w.dim())));
        }
        *w = WeightSource::Encoded(enc);
        Ok(())
    }

    pub fn encodings(&self) -> Vec<&LayerEncoding> {
        (0..self.nodes.len())
            .filter_map(|i| match self.weight_source(i) {
                Some(WeightSource::Encoded(e)) => Some(e),
                _ => None,
            })
            .collect()
    }

    /// Builds the evaluator for a checkpoint whose input is `side x side`.
    pub fn from_checkpoint(ckpt: &ModelCheckpoint, side: usize) -> Result<Self> {
        ckpt.validate()?;
        let order = ckpt.topological_order()?;
        let input = ckpt.layers.iter().find(|l| l.kind == LayerKind::Input).unwrap();
        let mut net = ToyNetwork::new(input.name.clone(), Shape { channels: input.c_out, side });
        let mut index = std::collections::HashMap::new();
        index.insert(input.name.as_str(), 0usize);
        let vector = |name: String| -> Result<Array1<f64>> {
            ckpt.tensor(&name).map(|t| Array1::from(t.to_f64())).ok_or(Error::MissingTensor(name))
        };
        for li in order {
            let l = &ckpt.layers[li];
            let inputs: Vec<usize> = ckpt.producers(&l.name).map(|p| index[p]).collect();
            let bias = || ckpt.tensor(&l.bias_name()).map(|t| Array1::from(t.to_f64()));
            let weight = || -> Result<Array2<f64>> {
                let t = ckpt.tensor(&l.weight_name()).ok_or_else(|| Error::MissingTensor(l.weight_name()))?;
                Ok(reshape_record(t, l)?.matrix)
            };
            let op = match l.kind {
                LayerKind::Input => continue,
                LayerKind::Output => {
                    net.outputs.push(inputs[0]);
                    continue;
                }
                LayerKind::Fc => ToyOp::Dense { weight: WeightSource::Raw(weight()?), bias: bias() },
                LayerKind::Conv => ToyOp::Conv { kernel: l.kernel, weight: WeightSource::Raw(weight()?), bias: bias() },
                LayerKind::Deconv => return Err(Error::UnsupportedLayerKind("deconv in the evaluator".into())),
                LayerKind::BatchNorm => ToyOp::Affine { scale: vector(l.weight_name())?, shift: vector(l.bias_name())? },
                LayerKind::Relu => ToyOp::Relu,
                LayerKind::Add => ToyOp::Add,
                LayerKind::Concat => ToyOp::Concat,
                LayerKind::Pool => ToyOp::Pool { window: l.kernel },
                LayerKind::Reshape => ToyOp::Flatten,
            };
            let at = net.push(l.name.clone(), op, inputs)?;
            if l.kind == LayerKind::Reshape && net.nodes[at].shape.channels != l.c_out {
                return Err(shape_err(&l.name, format!("flattens to {}, declared {}", net.nodes[at].shape.channels, l.c_out)));
            }
            index.insert(l.name.as_str(), at);
        }
        Ok(net)
    }

    /// Exports the network (decoding any encoded layers) as a checkpoint
    /// with f32 tensors.
    pub fn to_checkpoint(&self) -> ModelCheckpoint {
        let mut ckpt = ModelCheckpoint::default();
        for node in &self.nodes {
            let in_shape = node.inputs.first().map(|&j| self.nodes[j].shape).unwrap_or(node.shape);
            let (kind, kernel, c_in, c_out) = match &node.op {
                ToyOp::Input => (LayerKind::Input, 0, node.shape.channels, node.shape.channels),
                ToyOp::Dense { .. } => (LayerKind::Fc, 1, in_shape.width(), node.shape.channels),
                ToyOp::Conv { kernel, .. } => (LayerKind::Conv, *kernel, in_shape.channels, node.shape.channels),
                ToyOp::Relu => (LayerKind::Relu, 1, in_shape.channels, node.shape.channels),
                ToyOp::Add => (LayerKind::Add, 1, in_shape.channels, node.shape.channels),
                ToyOp::Concat => (LayerKind::Concat, 1, node.shape.channels, node.shape.channels),
                ToyOp::Affine { .. } => (LayerKind::BatchNorm, 1, in_shape.channels, node.shape.channels),
                ToyOp::Pool { window } => (LayerKind::Pool, *window, in_shape.channels, node.shape.channels),
                ToyOp::Flatten => (LayerKind::Reshape, 1, in_shape.channels, node.shape.channels),
            };
            let meta = LayerMeta::new(node.name.clone(), kind, kernel, c_in, c_out);
            match &node.op {
                ToyOp::Dense { weight, bias } | ToyOp::Conv { weight, bias, .. } => {
                    let w = ReshapedWeight::from_matrix(weight.matrix(), Geometry::of(&meta));
                    ckpt.tensors.push(TensorRecord::from_f64(meta.weight_name(), meta.weight_shape(), &unreshape_weight(&w)));
                    if let Some(b) = bias {
                        ckpt.tensors.push(TensorRecord::from_f64(meta.bias_name(), vec![b.len()], b.as_slice().unwrap()));
                    }
                }
                ToyOp::Affine { scale, shift } => {
                    ckpt.tensors.push(TensorRecord::from_f64(meta.weight_name(), vec![scale.len()], &scale.to_vec()));
                    ckpt.tensors.push(TensorRecord::from_f64(meta.bias_name(), vec![shift.len()], &shift.to_vec()));
                }
                _ => {}
            }
            for &j in &node.inputs {
                ckpt.edges.push((self.nodes[j].name.clone(), node.name.clone()));
            }
            ckpt.layers.push(meta);
        }
        for (k, &o) in self.output_nodes().iter().enumerate() {
            let name = if k == 0 { "output".to_string() } else { format!("output{k}") };
            let w = self.nodes[o].shape.width();
            ckpt.layers.push(LayerMeta::new(name.clone(), LayerKind::Output, 0, w, 0));
            ckpt.edges.push((self.nodes[o].name.clone(), name));
        }
        ckpt
    }
}

/// Patch matrix `(batch * area, C * K^2)` with zero padding.
fn im2col(x: &Array2<f64>, shape: Shape, k: usize) -> Array2<f64> {
    let (side, area, kk) = (shape.side as isize, shape.area(), k * k);
    let pad = ((k - 1) / 2) as isize;
    let mut p = Array2::zeros((x.nrows() * area, shape.channels * kk));
    for b in 0..x.nrows() {
        let xb = x.row(b);
        for y in 0..side {
            for xx in 0..side {
                let r = b * area + (y * side + xx) as usize;
                let mut row = p.row_mut(r);
                for c in 0..shape.channels {
                    for ky in 0..k as isize {
                        let sy = y + ky - pad;
                        if sy < 0 || sy >= side {
                            continue;
                        }
                        for kx in 0..k as isize {
                            let sx = xx + kx - pad;
                            if sx < 0 || sx >= side {
                                continue;
                            }
                            row[c * kk + (ky as usize) * k + kx as usize] = xb[c * area + (sy * side + sx) as usize];
                        }
                    }
                }
            }
        }
    }
    p
}

fn col2im(dp: &Array2<f64>, batch: usize, shape: Shape, k: usize) -> Array2<f64> {
    let (side, area, kk) = (shape.side as isize, shape.area(), k * k);
    let pad = ((k - 1) / 2) as isize;
    let mut dx = Array2::zeros((batch, shape.width()));
    for b in 0..batch {
        for y in 0..side {
            for xx in 0..side {
                let row = dp.row(b * area + (y * side + xx) as usize);
                for c in 0..shape.channels {
                    for ky in 0..k as isize {
                        let sy = y + ky - pad;
                        if sy < 0 || sy >= side {
                            continue;
                        }
                        for kx in 0..k as isize {
                            let sx = xx + kx - pad;
                            if sx < 0 || sx >= side {
                                continue;
                            }
                            dx[[b, c * area + (sy * side + sx) as usize]] += row[c * kk + (ky as usize) * k + kx as usize];
                        }
                    }
                }
            }
        }
    }
    dx
}

/// `(batch * area, C)` rows to channel-major `(batch, C * area)` features.
fn rows_to_features(rows: &Array2<f64>, batch: usize, area: usize) -> Array2<f64> {
    let c = rows.ncols();
    Array2::from_shape_fn((batch, c * area), |(b, f)| rows[[b * area + f % area, f / area]])
}

fn features_to_rows(g: &Array2<f64>, batch: usize, area: usize) -> Array2<f64> {
    let c = g.ncols() / area;
    Array2::from_shape_fn((batch * area, c), |(r, ch)| g[[r / area, ch * area + r % area]])
}

fn pool_forward(x: &Array2<f64>, shape: Shape, window: usize) -> Array2<f64> {
    let w = if window == 0 { shape.side } else { window };
    let out_side = shape.side / w;
    let (area, out_area) = (shape.area(), out_side * out_side);
    let norm = 1.0 / (w * w) as f64;
    Array2::from_shape_fn((x.nrows(), shape.channels * out_area), |(b, f)| {
        let (c, p) = (f / out_area, f % out_area);
        let (oy, ox) = (p / out_side, p % out_side);
        let mut sum = 0.0;
        for dy in 0..w {
            for dx in 0..w {
                sum += x[[b, c * area + (oy * w + dy) * shape.side + ox * w + dx]];
            }
        }
        sum * norm
    })
}

fn pool_backward(g: &Array2<f64>, shape: Shape, window: usize) -> Array2<f64> {
    let w = if window == 0 { shape.side } else { window };
    let out_side = shape.side / w;
    let (area, out_area) = (shape.area(), out_side * out_side);
    let norm = 1.0 / (w * w) as f64;
    Array2::from_shape_fn((g.nrows(), shape.width()), |(b, f)| {
        let (c, p) = (f / area, f % area);
        let (y, x) = (p / shape.side, p % shape.side);
        g[[b, c * out_area + (y / w) * out_side + x / w]] * norm
    })
}
