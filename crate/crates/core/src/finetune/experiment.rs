use serde::{Deserialize, Serialize};

use super::data::ToyDataset;
use super::network::ToyNetwork;
use super::train::{evaluate, finetune_codebooks, train_raw, TrainConfig, TrainTrace};
use super::{conv_net, mlp, AdamConfig};
use crate::codec::{compress_model, LayerCompressionConfig, Quantizer};
use crate::error::{Error, Result};
use crate::rng::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ToyKind {
    Mlp,
    Conv,
}

impl std::str::FromStr for ToyKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mlp" => Ok(ToyKind::Mlp),
            "conv" => Ok(ToyKind::Conv),
            other => Err(Error::InvalidArgument(format!("unknown toy network `{other}`"))),
        }
    }
}

/// Train a toy classifier, quantize it hard, then fine-tune its codebooks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryConfig {
    pub kind: ToyKind,
    pub seed: u64,
    pub pretrain_epochs: usize,
    pub pretrain_lr: f64,
    pub finetune_epochs: usize,
    pub lr: f64,
    pub lr_min: f64,
    pub batch_size: usize,
    /// Subvector size of the dense layers.
    pub d: usize,
    /// Requested codebook size of every layer.
    pub k: usize,
    pub quantizer: Quantizer,
    pub quantizer_iters: usize,
}

impl RecoveryConfig {
    pub fn new(kind: ToyKind, seed: u64) -> Self {
        Self {
            kind,
            seed,
            pretrain_epochs: 30,
            pretrain_lr: 1e-2,
            finetune_epochs: 30,
            lr: 1e-3,
            lr_min: 1e-6,
            batch_size: 32,
            d: 8,
            k: 4,
            quantizer: Quantizer::Src,
            quantizer_iters: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RecoveryOutcome {
    pub raw_val_acc: f64,
    pub quantized_val_acc: f64,
    pub finetuned_val_acc: f64,
    pub trace: TrainTrace,
    /// Codes and permutations after fine-tuning equal the ones before.
    pub structure_preserved: bool,
}

pub fn toy_dataset(kind: ToyKind, seed: u64) -> ToyDataset {
    match kind {
        ToyKind::Mlp => ToyDataset::blobs(8, 16, 60, 0.6, 0.25, seed),
        ToyKind::Conv => ToyDataset::blobs(4, 2 * 4 * 4, 60, 0.8, 0.25, seed),
    }
}

pub fn toy_network(kind: ToyKind, seed: u64) -> ToyNetwork {
    match kind {
        ToyKind::Mlp => mlp(&[16, 32, 32, 8], seed),
        ToyKind::Conv => conv_net(2, 4, 8, 4, seed),
    }
}

pub fn recovery_experiment(cfg: &RecoveryConfig) -> Result<RecoveryOutcome> {
    let data = toy_dataset(cfg.kind, derive_seed(cfg.seed, 0));
    let mut net = toy_network(cfg.kind, derive_seed(cfg.seed, 1));
    let side = net.input_shape().side;
    let pre = TrainConfig {
        epochs: cfg.pretrain_epochs,
        batch_size: cfg.batch_size,
        adam: AdamConfig { lr: cfg.pretrain_lr, lr_min: cfg.pretrain_lr * 1e-2, ..Default::default() },
        seed: derive_seed(cfg.seed, 2),
    };
    train_raw(&mut net, &data, &pre)?;
    let ckpt = net.to_checkpoint();
    let raw = ToyNetwork::from_checkpoint(&ckpt, side)?;
    let (_, raw_val_acc) = evaluate(&raw, &data)?;

    let ccfg = LayerCompressionConfig {
        k: cfg.k,
        k_fc: cfg.k,
        d_fc: cfg.d,
        skip_first: false,
        quantizer: cfg.quantizer,
        iterations: cfg.quantizer_iters,
        perm_iters: 200,
        seed: derive_seed(cfg.seed, 3),
        ..Default::default()
    };
    let outcome = compress_model(&ckpt, &ccfg)?;
    let mut quantized = raw;
    for enc in outcome.encodings {
        quantized.set_encoding(enc)?;
    }
    let (_, quantized_val_acc) = evaluate(&quantized, &data)?;
    let before: Vec<_> = quantized.encodings().iter().map(|e| (e.codes.clone(), e.permutation.clone())).collect();
    let ft = TrainConfig {
        epochs: cfg.finetune_epochs,
        batch_size: cfg.batch_size,
        adam: AdamConfig { lr: cfg.lr, lr_min: cfg.lr_min, ..Default::default() },
        seed: derive_seed(cfg.seed, 4),
    };
    let trace = finetune_codebooks(&mut quantized, &data, &ft)?;
    let after: Vec<_> = quantized.encodings().iter().map(|e| (e.codes.clone(), e.permutation.clone())).collect();
    Ok(RecoveryOutcome {
        raw_val_acc,
        quantized_val_acc,
        finetuned_val_acc: trace.final_val_acc(),
        trace,
        structure_preserved: before == after,
    })
}
