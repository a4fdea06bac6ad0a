//! Synthetic ablation: plain k-means, SR-C, and SR-C after a permutation
//! search, on generated weight matrices.

use std::fmt::Write as _;
use std::str::FromStr;
use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layout::{split_matrix, Geometry};
use crate::permsearch::{greedy_init, local_search, rd_lower_bound, subvector_covariance};
use crate::quantize::{kmeans, src, SrcConfig};
use crate::rng::{derive_seed, seeded, Gaussian};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Generator {
    /// i.i.d. standard normal entries.
    Isotropic,
    /// Rows with log-spread scales, each correlated with a partner row
    /// half the matrix away.
    Anisotropic,
}

impl FromStr for Generator {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "isotropic" => Ok(Generator::Isotropic),
            "anisotropic" => Ok(Generator::Anisotropic),
            other => Err(Error::InvalidArgument(format!("unknown generator `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "kmeans")]
    Kmeans,
    #[serde(rename = "src")]
    Src,
    #[serde(rename = "perm+src")]
    PermSrc,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Kmeans, Method::Src, Method::PermSrc];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Kmeans => "kmeans",
            Method::Src => "src",
            Method::PermSrc => "perm+src",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub generator: Generator,
    pub rows: usize,
    pub cols: usize,
    pub d: usize,
    pub k: usize,
    pub seeds: usize,
    pub base_seed: u64,
    pub iterations: usize,
    pub gamma: f64,
    pub perm_iters: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            generator: Generator::Anisotropic,
            rows: 32,
            cols: 256,
            d: 4,
            k: 64,
            seeds: 20,
            base_seed: 0,
            iterations: 200,
            gamma: 0.5,
            perm_iters: 1000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BenchRow {
    pub method: Method,
    pub seed: u64,
    pub error: f64,
    pub rd_bound: f64,
    pub wall_ms: f64,
}

/// A `rows x cols` weight matrix from `generator`.
pub fn synthetic_weights(generator: Generator, rows: usize, cols: usize, seed: u64) -> Array2<f64> {
    let mut rng = seeded(seed);
    let mut g = Gaussian::new();
    match generator {
        Generator::Isotropic => Array2::from_shape_fn((rows, cols), |_| g.sample(&mut rng)),
        Generator::Anisotropic => {
            let half = rows.div_ceil(2);
            let mut scales: Vec<f64> = (0..half).map(|i| (2.0 * i as f64 / half.max(2) as f64 - 1.0).exp2()).collect();
            scales.shuffle(&mut rng);
            let latent = Array2::from_shape_fn((half, cols), |_| g.sample(&mut rng));
            Array2::from_shape_fn((rows, cols), |(r, c)| {
                let src = r % half;
                let sign = if r < half { 1.0 } else { -0.8 };
                scales[src] * (sign * latent[[src, c]] + 0.2 * g.sample(&mut rng))
            })
        }
    }
}

/// Runs every method on every seed.
pub fn run_bench(cfg: &BenchConfig) -> Result<Vec<BenchRow>> {
    if cfg.d == 0 || !cfg.rows.is_multiple_of(cfg.d) {
        return Err(Error::IndivisibleBlockSize { rows: cfg.rows, d: cfg.d, block: 1 });
    }
    let seeds: Vec<u64> = (0..cfg.seeds as u64).map(|s| cfg.base_seed + s).collect();
    let per_seed: Vec<Result<Vec<BenchRow>>> = seeds.par_iter().map(|&seed| bench_seed(cfg, seed)).collect();
    let mut rows = Vec::new();
    for r in per_seed {
        rows.extend(r?);
    }
    Ok(rows)
}

fn bench_seed(cfg: &BenchConfig, seed: u64) -> Result<Vec<BenchRow>> {
    let w = synthetic_weights(cfg.generator, cfg.rows, cfg.cols, derive_seed(seed, 0));
    let geometry = Geometry::fc(cfg.rows, cfg.cols);
    let qseed = derive_seed(seed, 1);
    let src_cfg = SrcConfig { iterations: cfg.iterations, gamma: cfg.gamma, seed: qseed };
    let mut out = Vec::with_capacity(3);

    let s = split_matrix(&w, cfg.d, geometry)?;
    let stats = subvector_covariance(&s)?;
    let k_eff = cfg.k.min(s.len());
    let bound = rd_lower_bound(&stats, k_eff, cfg.d);

    let t = Instant::now();
    let q = kmeans(&s, k_eff, cfg.iterations, qseed);
    out.push(BenchRow { method: Method::Kmeans, seed, error: q.error, rd_bound: bound, wall_ms: ms(t) });

    let t = Instant::now();
    let q = src(&s, &stats, k_eff, &src_cfg)?;
    out.push(BenchRow { method: Method::Src, seed, error: q.error, rd_bound: bound, wall_ms: ms(t) });

    let t = Instant::now();
    let start = greedy_init(&w, cfg.d, 1)?;
    let perm = local_search(&w, cfg.d, &start, cfg.perm_iters, derive_seed(seed, 2));
    let permuted = perm.apply_rows(&w);
    let ps = split_matrix(&permuted, cfg.d, geometry)?;
    let pstats = subvector_covariance(&ps)?;
    let q = src(&ps, &pstats, k_eff, &src_cfg)?;
    let pbound = rd_lower_bound(&pstats, k_eff, cfg.d);
    out.push(BenchRow { method: Method::PermSrc, seed, error: q.error, rd_bound: pbound, wall_ms: ms(t) });
    Ok(out)
}

fn ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

pub fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Median error of each method.
pub fn median_errors(rows: &[BenchRow]) -> [(Method, f64); 3] {
    Method::ALL.map(|m| {
        let mut e: Vec<f64> = rows.iter().filter(|r| r.method == m).map(|r| r.error).collect();
        (m, median(&mut e))
    })
}

pub fn to_csv(rows: &[BenchRow]) -> String {
    let mut s = String::from("method,seed,E_t,rd_bound,wall_ms\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{:.9},{:.9},{:.3}", r.method.as_str(), r.seed, r.error, r.rd_bound, r.wall_ms);
    }
    s
}
