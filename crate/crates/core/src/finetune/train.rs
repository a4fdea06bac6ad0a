use ndarray::{s, Array2, ArrayViewMut2, Axis};
use rand::seq::SliceRandom;
use serde::Serialize;

use super::data::ToyDataset;
use super::loss::{accuracy, softmax_cross_entropy};
use super::network::{ToyNetwork, ToyOp, WeightSource};
use super::optim::{adam_cosine_step, AdamConfig, OptimizerState};
use crate::codec::LayerEncoding;
use crate::error::{Error, Result};
use crate::rng::seeded;

/// Gradient of every centroid: the sum of the permuted weight-gradient
/// slices at the positions assigned to it.
pub fn centroid_gradients(weight_grad: &Array2<f64>, enc: &LayerEncoding) -> Array2<f64> {
    let g = enc.permutation.apply_rows(weight_grad);
    let (d, m_hat) = (enc.d, enc.codes.m_hat);
    let mut out = Array2::zeros((enc.k_eff(), d));
    for j in 0..enc.codes.n {
        for i in 0..m_hat {
            let t = enc.codes.assignments[j * m_hat + i] as usize;
            let slice = g.slice(s![i * d..(i + 1) * d, j]);
            let mut row = out.row_mut(t);
            row += &slice;
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 9, batch_size: 32, adam: AdamConfig::default(), seed: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_acc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainTrace {
    pub initial_val_acc: f64,
    pub epochs: Vec<EpochRecord>,
}

impl TrainTrace {
    pub fn final_val_acc(&self) -> f64 {
        self.epochs.last().map_or(self.initial_val_acc, |e| e.val_acc)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,lr,train_loss,val_acc\n");
        for e in &self.epochs {
            s.push_str(&format!("{},{:e},{:.6},{:.4}\n", e.epoch, e.lr, e.train_loss, e.val_acc));
        }
        s
    }
}

/// Validation loss and accuracy.
pub fn evaluate(net: &ToyNetwork, data: &ToyDataset) -> Result<(f64, f64)> {
    let logits = net.logits(&data.val_x)?;
    let (loss, _) = softmax_cross_entropy(&logits, &data.val_y);
    Ok((loss, accuracy(&logits, &data.val_y)))
}

fn rows(x: &Array2<f64>, idx: &[usize]) -> Array2<f64> {
    x.select(Axis(0), idx)
}

/// Shared minibatch loop. `step` receives the network, the batch gradients
/// per node and the schedule position, and applies the update.
fn run_epochs<F>(net: &mut ToyNetwork, data: &ToyDataset, cfg: &TrainConfig, mut step: F) -> Result<TrainTrace>
where
    F: FnMut(&mut ToyNetwork, &super::network::Gradients, f64) -> f64,
{
    let (_, initial_val_acc) = evaluate(net, data)?;
    let n = data.train_y.len();
    let batch = cfg.batch_size.max(1);
    let per_epoch = n.div_ceil(batch).max(1);
    let total = (per_epoch * cfg.epochs).max(1) as f64;
    let mut rng = seeded(cfg.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut k = 0usize;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut lr) = (0.0, cfg.adam.lr_at(k as f64 / total));
        for chunk in order.chunks(batch) {
            let x = rows(&data.train_x, chunk);
            let y: Vec<usize> = chunk.iter().map(|&i| data.train_y[i]).collect();
            let cache = net.forward(&x)?;
            let (loss, grad) = softmax_cross_entropy(cache.node(net.primary_output()), &y);
            if !loss.is_finite() {
                return Err(Error::DivergedLoss { epoch, loss });
            }
            loss_sum += loss * chunk.len() as f64;
            let grads = net.backward(&cache, &grad);
            lr = step(net, &grads, k as f64 / total);
            k += 1;
        }
        let train_loss = loss_sum / n.max(1) as f64;
        let (_, val_acc) = evaluate(net, data)?;
        epochs.push(EpochRecord { epoch, lr, train_loss, val_acc });
    }
    Ok(TrainTrace { initial_val_acc, epochs })
}

/// Fine-tunes the codebooks of every encoded layer with Adam and cosine
/// annealing. Codes and permutations are never touched.
pub fn finetune_codebooks(net: &mut ToyNetwork, data: &ToyDataset, cfg: &TrainConfig) -> Result<TrainTrace> {
    let encoded: Vec<usize> =
        (0..net.nodes.len()).filter(|&i| matches!(net.weight_source(i), Some(WeightSource::Encoded(_)))).collect();
    let frozen: Vec<_> = net.encodings().iter().map(|e| (e.codes.clone(), e.permutation.clone())).collect();
    let shapes: Vec<_> = net.encodings().iter().map(|e| e.codebook.centroids.dim()).collect();
    let mut state = OptimizerState::new(cfg.adam, &shapes);
    let trace = run_epochs(net, data, cfg, |net, grads, t| {
        let mut cb_grads = Vec::with_capacity(encoded.len());
        for &i in &encoded {
            let Some(WeightSource::Encoded(e)) = net.weight_source(i) else { unreachable!() };
            cb_grads.push(centroid_gradients(&grads.layers[i].as_ref().unwrap().weight, e));
        }
        let mut params: Vec<ArrayViewMut2<'_, f64>> = net
            .nodes
            .iter_mut()
            .filter_map(|n| match &mut n.op {
                ToyOp::Dense { weight: WeightSource::Encoded(e), .. }
                | ToyOp::Conv { weight: WeightSource::Encoded(e), .. } => Some(e.codebook.centroids.view_mut()),
                _ => None,
            })
            .collect();
        adam_cosine_step(&mut state, &mut params, &cb_grads, t)
    })?;
    let after: Vec<_> = net.encodings().iter().map(|e| (e.codes.clone(), e.permutation.clone())).collect();
    assert_eq!(frozen, after, "fine-tuning changed codes or permutations");
    Ok(trace)
}

/// Trains every raw weight and bias; used to produce fixture networks.
pub fn train_raw(net: &mut ToyNetwork, data: &ToyDataset, cfg: &TrainConfig) -> Result<TrainTrace> {
    let mut shapes = Vec::new();
    for n in &net.nodes {
        if let ToyOp::Dense { weight: WeightSource::Raw(w), bias } | ToyOp::Conv { weight: WeightSource::Raw(w), bias, .. } = &n.op {
            shapes.push(w.dim());
            if let Some(b) = bias {
                shapes.push((1, b.len()));
            }
        }
    }
    let mut state = OptimizerState::new(cfg.adam, &shapes);
    run_epochs(net, data, cfg, |net, grads, t| {
        let mut g = Vec::new();
        let mut params = Vec::new();
        for (i, n) in net.nodes.iter_mut().enumerate() {
            if let ToyOp::Dense { weight: WeightSource::Raw(w), bias } | ToyOp::Conv { weight: WeightSource::Raw(w), bias, .. } =
                &mut n.op
            {
                let lg = grads.layers[i].as_ref().unwrap();
                g.push(lg.weight.clone());
                params.push(w.view_mut());
                if let Some(b) = bias {
                    g.push(lg.bias.as_ref().unwrap().clone().insert_axis(Axis(0)));
                    params.push(b.view_mut().insert_axis(Axis(0)));
                }
            }
        }
        adam_cosine_step(&mut state, &mut params, &g, t)
    })
}
