//! Codebook fine-tuning on small networks.
//!
//! [`ToyNetwork`] evaluates dense, conv, relu, add, affine, pooling and
//! flatten nodes with exact reverse-mode gradients in f64. Encoded layers
//! decode their weights on every forward pass, and [`finetune_codebooks`]
//! moves only their centroids.

mod data;
mod experiment;
mod loss;
mod network;
mod optim;
mod train;

pub use data::ToyDataset;
pub use experiment::{recovery_experiment, toy_dataset, toy_network, RecoveryConfig, RecoveryOutcome, ToyKind};
pub use loss::{accuracy, mse, softmax_cross_entropy};
pub use network::{ForwardCache, Gradients, LayerGrad, Shape, ToyNetwork, ToyNode, ToyOp, WeightSource};
pub use optim::{adam_cosine_step, AdamConfig, OptimizerState};
pub use train::{centroid_gradients, evaluate, finetune_codebooks, train_raw, EpochRecord, TrainConfig, TrainTrace};

use ndarray::{Array1, Array2};
use rand::Rng;

use crate::error::Result;
use crate::rng::{seeded, Gaussian, SeededRng};

fn he(rows: usize, cols: usize, fan_in: usize, rng: &mut SeededRng, g: &mut Gaussian) -> Array2<f64> {
    let std = (2.0 / fan_in as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| g.sample(rng) * std)
}

fn small(n: usize, scale: f64, rng: &mut SeededRng, g: &mut Gaussian) -> Array1<f64> {
    Array1::from_shape_fn(n, |_| g.sample(rng) * scale)
}

/// Fully-connected ReLU network with layer widths `sizes`.
pub fn mlp(sizes: &[usize], seed: u64) -> ToyNetwork {
    assert!(sizes.len() >= 2);
    let mut rng = seeded(seed);
    let mut g = Gaussian::new();
    let mut net = ToyNetwork::new("input", Shape { channels: sizes[0], side: 1 });
    let mut prev = 0;
    for (l, w) in sizes.windows(2).enumerate() {
        let weight = WeightSource::Raw(he(w[0], w[1], w[0], &mut rng, &mut g));
        let bias = Some(small(w[1], 0.01, &mut rng, &mut g));
        prev = net.push(format!("fc{}", l + 1), ToyOp::Dense { weight, bias }, vec![prev]).unwrap();
        if l + 2 < sizes.len() {
            prev = net.push(format!("relu{}", l + 1), ToyOp::Relu, vec![prev]).unwrap();
        }
    }
    net
}

/// Two 3x3 convolutions, pooling and a linear classifier.
pub fn conv_net(channels: usize, side: usize, width: usize, classes: usize, seed: u64) -> ToyNetwork {
    let mut rng = seeded(seed);
    let mut g = Gaussian::new();
    let mut net = ToyNetwork::new("input", Shape { channels, side });
    let w1 = WeightSource::Raw(he(channels * 9, width, channels * 9, &mut rng, &mut g));
    let mut p = net.push("conv1", ToyOp::Conv { kernel: 3, weight: w1, bias: Some(small(width, 0.01, &mut rng, &mut g)) }, vec![0]).unwrap();
    p = net.push("relu1", ToyOp::Relu, vec![p]).unwrap();
    if side.is_multiple_of(2) {
        p = net.push("pool1", ToyOp::Pool { window: 2 }, vec![p]).unwrap();
    }
    let w2 = WeightSource::Raw(he(width * 9, width, width * 9, &mut rng, &mut g));
    p = net.push("conv2", ToyOp::Conv { kernel: 3, weight: w2, bias: None }, vec![p]).unwrap();
    p = net.push("relu2", ToyOp::Relu, vec![p]).unwrap();
    p = net.push("pool2", ToyOp::Pool { window: 0 }, vec![p]).unwrap();
    p = net.push("flatten", ToyOp::Flatten, vec![p]).unwrap();
    let wf = WeightSource::Raw(he(width, classes, width, &mut rng, &mut g));
    net.push("fc", ToyOp::Dense { weight: wf, bias: Some(small(classes, 0.01, &mut rng, &mut g)) }, vec![p]).unwrap();
    net
}

/// A randomly sized residual network: a conv stem, one to three residual
/// blocks (3x3 conv, affine, relu, 1x1 conv, affine, add), optional
/// projection shortcuts, pooling, and either a global-pool or a flatten
/// head.
pub fn residual_net(seed: u64) -> ToyNetwork {
    let mut rng = seeded(seed);
    let mut g = Gaussian::new();
    let channels = rng.gen_range(1..=3);
    let side = [2, 3, 4][rng.gen_range(0..3)];
    let mut width = rng.gen_range(2..=6);
    let mut net = ToyNetwork::new("input", Shape { channels, side });
    let conv = |net: &mut ToyNetwork, rng: &mut SeededRng, g: &mut Gaussian, name: String, k: usize, c_in: usize, c_out: usize, from: usize| -> Result<usize> {
        let weight = WeightSource::Raw(he(c_in * k * k, c_out, c_in * k * k, rng, g));
        let bias = rng.gen_bool(0.5).then(|| small(c_out, 0.1, rng, g));
        net.push(name, ToyOp::Conv { kernel: k, weight, bias }, vec![from])
    };
    let affine = |net: &mut ToyNetwork, rng: &mut SeededRng, g: &mut Gaussian, name: String, c: usize, from: usize| -> Result<usize> {
        let scale = Array1::from_shape_fn(c, |_| 1.0 + 0.3 * g.sample(rng));
        let shift = small(c, 0.1, rng, g);
        net.push(name, ToyOp::Affine { scale, shift }, vec![from])
    };
    let mut p = conv(&mut net, &mut rng, &mut g, "stem".into(), 3, channels, width, 0).unwrap();
    p = affine(&mut net, &mut rng, &mut g, "stem_bn".into(), width, p).unwrap();
    p = net.push("stem_relu", ToyOp::Relu, vec![p]).unwrap();
    for b in 0..rng.gen_range(1..=3) {
        let out = if rng.gen_bool(0.3) { width + rng.gen_range(1..=3) } else { width };
        let mut q = conv(&mut net, &mut rng, &mut g, format!("b{b}.conv1"), 3, width, out, p).unwrap();
        q = affine(&mut net, &mut rng, &mut g, format!("b{b}.bn1"), out, q).unwrap();
        q = net.push(format!("b{b}.relu1"), ToyOp::Relu, vec![q]).unwrap();
        q = conv(&mut net, &mut rng, &mut g, format!("b{b}.conv2"), 1, out, out, q).unwrap();
        q = affine(&mut net, &mut rng, &mut g, format!("b{b}.bn2"), out, q).unwrap();
        let shortcut = if out != width {
            let s = conv(&mut net, &mut rng, &mut g, format!("b{b}.proj"), 1, width, out, p).unwrap();
            affine(&mut net, &mut rng, &mut g, format!("b{b}.proj_bn"), out, s).unwrap()
        } else {
            p
        };
        q = net.push(format!("b{b}.add"), ToyOp::Add, vec![q, shortcut]).unwrap();
        p = net.push(format!("b{b}.relu2"), ToyOp::Relu, vec![q]).unwrap();
        width = out;
    }
    let classes = rng.gen_range(2..=4);
    let features = if rng.gen_bool(0.5) {
        p = net.push("pool", ToyOp::Pool { window: 0 }, vec![p]).unwrap();
        width
    } else {
        width * side * side
    };
    p = net.push("flatten", ToyOp::Flatten, vec![p]).unwrap();
    let weight = WeightSource::Raw(he(features, classes, features, &mut rng, &mut g));
    net.push("fc", ToyOp::Dense { weight, bias: Some(small(classes, 0.1, &mut rng, &mut g)) }, vec![p]).unwrap();
    net
}

/// Two concatenations on a `2 x 4 x 4` input: a stem feeds a 1x1 and a 3x3
/// branch that are concatenated (4 + 2 channels) and normalized, a 3x3 conv
/// follows, its 6 channels are concatenated with the raw input, and a 1x1
/// conv, global pool and fc finish.
pub fn concat_net(seed: u64) -> ToyNetwork {
    let mut rng = seeded(seed);
    let mut g = Gaussian::new();
    let mut net = ToyNetwork::new("input", Shape { channels: 2, side: 4 });
    let mut conv = |net: &mut ToyNetwork, name: &str, k: usize, c_in: usize, c_out: usize, from: usize| {
        let weight = WeightSource::Raw(he(c_in * k * k, c_out, c_in * k * k, &mut rng, &mut g));
        let bias = Some(small(c_out, 0.1, &mut rng, &mut g));
        net.push(name, ToyOp::Conv { kernel: k, weight, bias }, vec![from]).unwrap()
    };
    let stem = conv(&mut net, "stem", 3, 2, 8, 0);
    let r = net.push("stem_relu", ToyOp::Relu, vec![stem]).unwrap();
    let a = conv(&mut net, "a", 1, 8, 4, r);
    let b = conv(&mut net, "b", 3, 8, 2, r);
    let cat = net.push("cat", ToyOp::Concat, vec![a, b]).unwrap();
    let (scale, shift) = (Array1::linspace(0.5, 1.5, 6), Array1::linspace(-0.3, 0.3, 6));
    let bn = net.push("bn", ToyOp::Affine { scale, shift }, vec![cat]).unwrap();
    let r = net.push("relu", ToyOp::Relu, vec![bn]).unwrap();
    let c = conv(&mut net, "c", 3, 6, 6, r);
    let cat2 = net.push("cat2", ToyOp::Concat, vec![c, 0]).unwrap();
    let d = conv(&mut net, "d", 1, 8, 4, cat2);
    let pool = net.push("pool", ToyOp::Pool { window: 0 }, vec![d]).unwrap();
    let flat = net.push("flatten", ToyOp::Flatten, vec![pool]).unwrap();
    let weight = WeightSource::Raw(he(4, 3, 4, &mut rng, &mut g));
    net.push("fc", ToyOp::Dense { weight, bias: None }, vec![flat]).unwrap();
    net
}
