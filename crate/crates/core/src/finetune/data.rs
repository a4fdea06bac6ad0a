use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;

use crate::rng::{seeded, Gaussian};

/// Seeded synthetic classification data with a fixed train/val split.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyDataset {
    pub train_x: Array2<f64>,
    pub train_y: Vec<usize>,
    pub val_x: Array2<f64>,
    pub val_y: Vec<usize>,
    pub classes: usize,
}

fn split(x: Array2<f64>, y: Vec<usize>, classes: usize, val_fraction: f64, seed: u64) -> ToyDataset {
    let mut order: Vec<usize> = (0..y.len()).collect();
    order.shuffle(&mut seeded(seed ^ 0x5eed));
    let n_val = ((y.len() as f64) * val_fraction).round() as usize;
    let (val, train) = order.split_at(n_val);
    let take = |idx: &[usize]| {
        let rows = Array2::from_shape_fn((idx.len(), x.ncols()), |(r, c)| x[[idx[r], c]]);
        (rows, idx.iter().map(|&i| y[i]).collect::<Vec<_>>())
    };
    let (train_x, train_y) = take(train);
    let (val_x, val_y) = take(val);
    ToyDataset { train_x, train_y, val_x, val_y, classes }
}

impl ToyDataset {
    /// Isotropic Gaussian clusters around random unit-variance centres.
    pub fn blobs(classes: usize, dim: usize, per_class: usize, spread: f64, val_fraction: f64, seed: u64) -> Self {
        let mut rng = seeded(seed);
        let mut g = Gaussian::new();
        let centres: Vec<Vec<f64>> = (0..classes).map(|_| (0..dim).map(|_| g.sample(&mut rng)).collect()).collect();
        let n = classes * per_class;
        let mut x = Array2::zeros((n, dim));
        let mut y = Vec::with_capacity(n);
        for i in 0..n {
            let c = i % classes;
            for j in 0..dim {
                x[[i, j]] = centres[c][j] + spread * g.sample(&mut rng);
            }
            y.push(c);
        }
        split(x, y, classes, val_fraction, seed)
    }

    /// Two interleaved 2-D spirals.
    pub fn spirals(per_class: usize, noise: f64, val_fraction: f64, seed: u64) -> Self {
        let mut rng = seeded(seed);
        let mut g = Gaussian::new();
        let n = 2 * per_class;
        let mut x = Array2::zeros((n, 2));
        let mut y = Vec::with_capacity(n);
        for i in 0..n {
            let c = i % 2;
            let r: f64 = rng.gen_range(0.05..1.0);
            let theta = 3.0 * std::f64::consts::PI * r + c as f64 * std::f64::consts::PI;
            x[[i, 0]] = r * theta.cos() + noise * g.sample(&mut rng);
            x[[i, 1]] = r * theta.sin() + noise * g.sample(&mut rng);
            y.push(c);
        }
        split(x, y, 2, val_fraction, seed)
    }

    pub fn dim(&self) -> usize {
        self.train_x.ncols()
    }
}
