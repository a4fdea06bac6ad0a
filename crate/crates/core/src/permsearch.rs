//! Permutation search: reorder the rows of a weight matrix so that its
//! subvectors have a covariance with small determinant.
//!
//! The objective is `ln |Σ + εI|` of the mean-centered subvector covariance.
//! A greedy bucket assignment provides the starting point and a stochastic
//! local search over pairwise swaps refines it. For `K x K` convolutions
//! rows move in contiguous groups of `K^2` (the permutation is block
//! structured), and the greedy score of a group is the log-determinant of
//! its own `K^2 x K^2` covariance.

use ndarray::Array2;
use rand::Rng;

use crate::error::{Error, Result};
use crate::layout::SubvectorMatrix;
use crate::rng::seeded;

/// A row gather order `indices`: row `r` of the permuted matrix is row
/// `indices[r]` of the original. Rows move in contiguous groups of `block`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Permutation {
    indices: Vec<usize>,
    block: usize,
}

impl Permutation {
    pub fn identity(len: usize, block: usize) -> Self {
        assert!(block > 0 && len.is_multiple_of(block), "block must divide length");
        Self { indices: (0..len).collect(), block }
    }

    /// Validates bijectivity and the block structure.
    pub fn new(indices: Vec<usize>, block: usize) -> Result<Self> {
        if block == 0 || !indices.len().is_multiple_of(block) {
            return Err(Error::IndivisibleBlockSize { rows: indices.len(), d: block, block });
        }
        let mut seen = vec![false; indices.len()];
        for &i in &indices {
            match seen.get_mut(i) {
                Some(s) if !*s => *s = true,
                _ => return Err(Error::InvalidArgument(format!("not a permutation: index {i}"))),
            }
        }
        for (b, chunk) in indices.chunks_exact(block).enumerate() {
            let base = chunk[0];
            if base % block != 0 || chunk.iter().enumerate().any(|(r, &v)| v != base + r) {
                return Err(Error::BlockViolation(b * block));
            }
        }
        Ok(Self { indices, block })
    }

    /// Expands an order over blocks into an order over rows.
    pub fn from_groups(groups: &[usize], block: usize) -> Self {
        let indices = groups.iter().flat_map(|&g| (g * block)..(g * block + block)).collect();
        Self { indices, block }
    }

    pub fn groups(&self) -> Vec<usize> {
        self.indices.iter().step_by(self.block).map(|&i| i / self.block).collect()
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn block(&self) -> usize {
        self.block
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn is_identity(&self) -> bool {
        self.indices.iter().enumerate().all(|(r, &i)| r == i)
    }

    pub fn inverse(&self) -> Self {
        let mut inv = vec![0; self.indices.len()];
        for (r, &i) in self.indices.iter().enumerate() {
            inv[i] = r;
        }
        Self { indices: inv, block: self.block }
    }

    /// Returns `P * matrix`.
    pub fn apply_rows(&self, matrix: &Array2<f64>) -> Array2<f64> {
        assert_eq!(matrix.nrows(), self.len());
        let mut out = Array2::zeros(matrix.dim());
        for (r, &src) in self.indices.iter().enumerate() {
            out.row_mut(r).assign(&matrix.row(src));
        }
        out
    }

    /// Returns `P^-1 * matrix`.
    pub fn unapply_rows(&self, matrix: &Array2<f64>) -> Array2<f64> {
        assert_eq!(matrix.nrows(), self.len());
        let mut out = Array2::zeros(matrix.dim());
        for (r, &dst) in self.indices.iter().enumerate() {
            out.row_mut(dst).assign(&matrix.row(r));
        }
        out
    }
}

/// Mean-centered covariance of a set of subvectors.
#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceStats {
    pub sigma: Array2<f64>,
    pub count: usize,
    pub mean: Vec<f64>,
}

impl CovarianceStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn trace(&self) -> f64 {
        self.sigma.diag().sum()
    }

    pub fn zeros(d: usize) -> Self {
        Self { sigma: Array2::zeros((d, d)), count: 0, mean: vec![0.0; d] }
    }
}

fn covariance_of_vectors(data: &[f64], d: usize) -> CovarianceStats {
    let count = data.len() / d;
    let mut mean = vec![0.0; d];
    for v in data.chunks_exact(d) {
        for (m, x) in mean.iter_mut().zip(v) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= count as f64);
    let mut sigma = Array2::zeros((d, d));
    let mut centered = vec![0.0; d];
    for v in data.chunks_exact(d) {
        for a in 0..d {
            centered[a] = v[a] - mean[a];
        }
        for a in 0..d {
            for b in a..d {
                sigma[[a, b]] += centered[a] * centered[b];
            }
        }
    }
    for a in 0..d {
        for b in a..d {
            let v = sigma[[a, b]] / count as f64;
            sigma[[a, b]] = v;
            sigma[[b, a]] = v;
        }
    }
    CovarianceStats { sigma, count, mean }
}

pub fn subvector_covariance(s: &SubvectorMatrix) -> Result<CovarianceStats> {
    if s.len() < 2 {
        return Err(Error::TooFewSubvectors(s.len()));
    }
    Ok(covariance_of_vectors(&s.data, s.d))
}

/// Lower-triangular Cholesky factor, or `None` if a pivot is not positive.
pub(crate) fn cholesky(a: &Array2<f64>) -> Option<Array2<f64>> {
    let n = a.nrows();
    let mut l = Array2::<f64>::zeros((n, n));
    for j in 0..n {
        let mut diag = a[[j, j]];
        for k in 0..j {
            diag -= l[[j, k]] * l[[j, k]];
        }
        if !(diag > 0.0) {
            return None;
        }
        let ljj = diag.sqrt();
        l[[j, j]] = ljj;
        for i in j + 1..n {
            let mut v = a[[i, j]];
            for k in 0..j {
                v -= l[[i, k]] * l[[j, k]];
            }
            l[[i, j]] = v / ljj;
        }
    }
    Some(l)
}

/// Regularization added to the diagonal before factorizing.
pub fn logdet_epsilon(sigma: &Array2<f64>) -> f64 {
    let d = sigma.nrows().max(1) as f64;
    1e-12 * (sigma.diag().sum() / d).max(1.0)
}

fn regularized_logdet(sigma: &Array2<f64>) -> f64 {
    let eps = logdet_epsilon(sigma);
    let mut jitter = eps;
    // Rounding can leave a PSD matrix a hair indefinite; grow the jitter
    // until the factorization succeeds.
    loop {
        let mut a = sigma.clone();
        for i in 0..a.nrows() {
            a[[i, i]] += jitter;
        }
        if let Some(l) = cholesky(&a) {
            return 2.0 * l.diag().iter().map(|v| v.ln()).sum::<f64>();
        }
        jitter *= 10.0;
    }
}

/// `ln |Σ + εI|` with `ε = 1e-12 * max(trace / d, 1)`.
pub fn logdet(stats: &CovarianceStats) -> f64 {
    regularized_logdet(&stats.sigma)
}

/// Unregularized determinant; zero when `Σ` is singular.
pub fn determinant(stats: &CovarianceStats) -> f64 {
    match cholesky(&stats.sigma) {
        Some(l) => l.diag().iter().map(|v| v * v).product(),
        None => 0.0,
    }
}

/// Gaussian rate-distortion bound on the expected squared error per
/// subvector: `k^(-2/d) * d * |Σ|^(1/d)`.
pub fn rd_lower_bound(stats: &CovarianceStats, k: usize, d: usize) -> f64 {
    assert!(k >= 1 && d == stats.dim());
    let det = determinant(stats);
    if det <= 0.0 {
        return 0.0;
    }
    let d_f = d as f64;
    (k as f64).powf(-2.0 / d_f) * d_f * det.powf(1.0 / d_f)
}

/// `ln |Σ|` of the subvectors of `P * matrix` for gather order `indices`.
pub fn permuted_objective(matrix: &Array2<f64>, indices: &[usize], d: usize) -> f64 {
    let (rows, n) = matrix.dim();
    debug_assert_eq!(rows % d, 0);
    let m_hat = rows / d;
    let count = (m_hat * n) as f64;
    let mut mean = vec![0.0; d];
    let mut cross = vec![0.0; d * d];
    let mut v = vec![0.0; d];
    for i in 0..m_hat {
        let src: Vec<_> = (0..d).map(|a| matrix.row(indices[i * d + a])).collect();
        for j in 0..n {
            for a in 0..d {
                v[a] = src[a][j];
                mean[a] += v[a];
            }
            for a in 0..d {
                let va = v[a];
                for b in a..d {
                    cross[a * d + b] += va * v[b];
                }
            }
        }
    }
    mean.iter_mut().for_each(|m| *m /= count);
    let mut sigma = Array2::zeros((d, d));
    for a in 0..d {
        for b in a..d {
            let c = cross[a * d + b] / count - mean[a] * mean[b];
            sigma[[a, b]] = c;
            sigma[[b, a]] = c;
        }
    }
    regularized_logdet(&sigma)
}

/// Greedy score of each block of `g` rows: row variance for `g = 1`,
/// otherwise the log-determinant of the block's `g x g` covariance.
fn block_scores(matrix: &Array2<f64>, g: usize) -> Vec<f64> {
    let (rows, n) = matrix.dim();
    (0..rows / g)
        .map(|b| {
            let mut samples = Vec::with_capacity(n * g);
            for j in 0..n {
                for r in 0..g {
                    samples.push(matrix[[b * g + r, j]]);
                }
            }
            let stats = covariance_of_vectors(&samples, g);
            if g == 1 {
                stats.sigma[[0, 0]]
            } else {
                logdet(&stats)
            }
        })
        .collect()
}

/// Greedy bucket initialization.
///
/// Creates `d / g` buckets of capacity `m / d` blocks. Blocks are visited in
/// descending score order (ties by index) and each goes to the non-full
/// bucket with the smallest score sum (ties to the lowest bucket). Members
/// are then interlaced so that blocks of one bucket sit `d` rows apart.
pub fn greedy_init(matrix: &Array2<f64>, d: usize, g: usize) -> Result<Permutation> {
    let rows = matrix.nrows();
    if g == 0 || d == 0 || !rows.is_multiple_of(d) || !d.is_multiple_of(g) {
        return Err(Error::IndivisibleBlockSize { rows, d, block: g });
    }
    let scores = block_scores(matrix, g);
    let n_buckets = d / g;
    let capacity = rows / d;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));

    let mut buckets: Vec<Vec<usize>> = vec![Vec::with_capacity(capacity); n_buckets];
    let mut sums = vec![0.0f64; n_buckets];
    for blk in order {
        let target = (0..n_buckets)
            .filter(|&b| buckets[b].len() < capacity)
            .min_by(|&a, &b| (sums[a] + scores[blk]).total_cmp(&(sums[b] + scores[blk])).then(a.cmp(&b)))
            .expect("total capacity equals block count");
        buckets[target].push(blk);
        sums[target] += scores[blk];
    }

    let mut groups = vec![0; rows / g];
    for (b, members) in buckets.iter().enumerate() {
        for (q, &blk) in members.iter().enumerate() {
            groups[q * n_buckets + b] = blk;
        }
    }
    Ok(Permutation::from_groups(&groups, g))
}

/// Result of a local search run.
#[derive(Debug, Clone)]
pub struct SearchTrace {
    pub permutation: Permutation,
    pub initial_objective: f64,
    /// Objective after every accepted swap.
    pub accepted: Vec<f64>,
}

impl SearchTrace {
    pub fn final_objective(&self) -> f64 {
        self.accepted.last().copied().unwrap_or(self.initial_objective)
    }
}

/// Random pairwise-swap descent over an order of `units`; a swap is kept
/// only if it strictly lowers `objective`.
/// Iterated local search over unit orders. Random pair swaps are kept when
/// they lower the objective; once as many swaps as there are pairs have
/// failed in a row, the search restarts from a few random swaps of the best
/// order found. Returns the best order, the starting objective, and every
/// new best objective in order.
fn swap_descent<R: Rng>(
    order: Vec<usize>,
    iters: usize,
    rng: &mut R,
    objective: impl Fn(&[usize]) -> f64,
) -> (Vec<usize>, f64, Vec<f64>) {
    let initial = objective(&order);
    let mut accepted = Vec::new();
    let units = order.len();
    if units < 2 {
        return (order, initial, accepted);
    }
    let pairs = units * (units - 1) / 2;
    let kick = (units / 2).clamp(1, 3);
    let mut best = order.clone();
    let mut best_obj = initial;
    let mut current = order;
    let mut current_obj = initial;
    let mut stalled = 0;
    let random_pair = |rng: &mut R| {
        let a = rng.gen_range(0..units);
        let mut b = rng.gen_range(0..units - 1);
        if b >= a {
            b += 1;
        }
        (a, b)
    };
    for _ in 0..iters {
        if stalled >= pairs {
            current.clone_from(&best);
            for _ in 0..kick {
                let (a, b) = random_pair(rng);
                current.swap(a, b);
            }
            current_obj = objective(&current);
            stalled = 0;
            if current_obj < best_obj {
                best.clone_from(&current);
                best_obj = current_obj;
                accepted.push(best_obj);
            }
            continue;
        }
        let (a, b) = random_pair(rng);
        current.swap(a, b);
        let candidate = objective(&current);
        if candidate < current_obj {
            current_obj = candidate;
            stalled = 0;
            if candidate < best_obj {
                best.clone_from(&current);
                best_obj = candidate;
                accepted.push(best_obj);
            }
        } else {
            current.swap(a, b);
            stalled += 1;
        }
    }
    (best, initial, accepted)
}

pub fn local_search_traced(
    matrix: &Array2<f64>,
    d: usize,
    start: &Permutation,
    iters: usize,
    seed: u64,
) -> SearchTrace {
    let g = start.block();
    assert_eq!(start.len(), matrix.nrows());
    let mut rng = seeded(seed);
    let (order, initial, accepted) = swap_descent(start.groups(), iters, &mut rng, |groups| {
        let p = Permutation::from_groups(groups, g);
        permuted_objective(matrix, p.indices(), d)
    });
    SearchTrace { permutation: Permutation::from_groups(&order, g), initial_objective: initial, accepted }
}

/// Refines `start` by `iters` objective evaluations of row-block swaps.
pub fn local_search(matrix: &Array2<f64>, d: usize, start: &Permutation, iters: usize, seed: u64) -> Permutation {
    local_search_traced(matrix, d, start, iters, seed).permutation
}

/// One consumer of a shared channel permutation: its reshaped weight, its
/// subvector size, and how many matrix rows each shared channel spans.
#[derive(Debug, Clone, Copy)]
pub struct GroupChild<'a> {
    pub matrix: &'a Array2<f64>,
    pub d: usize,
    pub rows_per_channel: usize,
}

impl GroupChild<'_> {
    fn channels(&self) -> usize {
        self.matrix.nrows() / self.rows_per_channel
    }
}

/// Summed objective of all children under channel order `channels`.
pub fn group_objective(children: &[GroupChild<'_>], channels: &[usize]) -> f64 {
    children
        .iter()
        .map(|c| {
            let p = Permutation::from_groups(channels, c.rows_per_channel);
            permuted_objective(c.matrix, p.indices(), c.d)
        })
        .sum()
}

/// Finds one channel permutation for a set of children that must share it.
///
/// The greedy start comes from the child with the most weights (falling
/// back to identity when its block does not divide its `d`); the local
/// search then accepts swaps on the summed objective.
pub fn optimize_group_permutation(children: &[GroupChild<'_>], iters: usize, seed: u64) -> Result<Permutation> {
    let Some(first) = children.first() else {
        return Err(Error::InvalidArgument("permutation group without children".into()));
    };
    let channels = first.channels();
    for c in children {
        if c.d == 0 || c.matrix.nrows() % c.d != 0 {
            return Err(Error::IndivisibleBlockSize { rows: c.matrix.nrows(), d: c.d, block: c.rows_per_channel });
        }
        if c.matrix.nrows() % c.rows_per_channel != 0 {
            return Err(Error::IndivisibleBlockSize { rows: c.matrix.nrows(), d: c.d, block: c.rows_per_channel });
        }
        if c.channels() != channels {
            return Err(Error::MismatchedChannelCounts(channels, c.channels()));
        }
    }
    let largest = children
        .iter()
        .enumerate()
        .max_by(|(ia, a), (ib, b)| a.matrix.len().cmp(&b.matrix.len()).then(ib.cmp(ia)))
        .map(|(_, c)| c)
        .unwrap();
    let start = greedy_init(largest.matrix, largest.d, largest.rows_per_channel)
        .map(|p| p.groups())
        .unwrap_or_else(|_| (0..channels).collect());
    let mut rng = seeded(seed);
    let (order, _, _) = swap_descent(start, iters, &mut rng, |order| group_objective(children, order));
    Ok(Permutation::from_groups(&order, 1))
}
