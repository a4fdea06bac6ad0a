//! Codebook learning for a set of subvectors: plain k-means and SR-C, a
//! stochastic relaxation that runs the codebook update on noise-perturbed
//! subvectors with a decaying noise schedule `(1 - τ/I)^γ`.

use ndarray::Array2;
use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::layout::SubvectorMatrix;
use crate::permsearch::CovarianceStats;
use crate::rng::{seeded, Gaussian};

#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    /// `k_eff x d` centroid matrix.
    pub centroids: Array2<f64>,
}

impl Codebook {
    pub fn len(&self) -> usize {
        self.centroids.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.centroids.ncols()
    }

    pub fn centroid(&self, t: usize) -> &[f64] {
        let d = self.dim();
        &self.centroids.as_slice().expect("standard layout")[t * d..(t + 1) * d]
    }
}

/// Per-subvector codebook indices, indexed like [`SubvectorMatrix`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Codes {
    pub assignments: Vec<u32>,
    pub m_hat: usize,
    pub n: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SrcConfig {
    pub iterations: usize,
    pub gamma: f64,
    pub seed: u64,
}

impl Default for SrcConfig {
    fn default() -> Self {
        Self { iterations: 1000, gamma: 0.5, seed: 0 }
    }
}

impl SrcConfig {
    /// Noise multiplier at iteration `tau` (1-based).
    pub fn noise_scale(&self, tau: usize) -> f64 {
        (1.0 - tau as f64 / self.iterations as f64).max(0.0).powf(self.gamma)
    }
}

#[derive(Debug, Clone)]
pub struct Quantization {
    pub codes: Codes,
    pub codebook: Codebook,
    /// Mean squared reconstruction error per subvector.
    pub error: f64,
    /// Error after each completed iteration.
    pub trace: Vec<f64>,
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(v: &[f64], centroids: &[f64], d: usize) -> u32 {
    let mut best = 0;
    let mut best_dist = f64::INFINITY;
    for (t, c) in centroids.chunks_exact(d).enumerate() {
        let dist = squared_distance(v, c);
        if dist < best_dist {
            best_dist = dist;
            best = t;
        }
    }
    best as u32
}

/// Assigns every subvector to its nearest centroid (ties to the lowest index).
pub fn assign_codes(s: &SubvectorMatrix, codebook: &Codebook) -> Result<Codes> {
    if codebook.dim() != s.d {
        return Err(Error::DimensionMismatch { expected: s.d, actual: codebook.dim() });
    }
    let centroids = codebook.centroids.as_slice().expect("standard layout");
    let assignments = s.data.par_chunks_exact(s.d).map(|v| nearest(v, centroids, s.d)).collect();
    Ok(Codes { assignments, m_hat: s.m_hat, n: s.n })
}

fn update_from(data: &[f64], d: usize, codes: &[u32], k_eff: usize) -> Array2<f64> {
    let mut sums = Array2::<f64>::zeros((k_eff, d));
    let mut counts = vec![0usize; k_eff];
    for (v, &c) in data.chunks_exact(d).zip(codes) {
        let c = c as usize;
        counts[c] += 1;
        for (acc, x) in sums.row_mut(c).iter_mut().zip(v) {
            *acc += x;
        }
    }
    for (t, &count) in counts.iter().enumerate() {
        if count > 0 {
            sums.row_mut(t).mapv_inplace(|x| x / count as f64);
        }
    }
    if counts.iter().all(|&c| c > 0) {
        return sums;
    }
    // Empty clusters take the worst-reconstructed subvectors, each used once.
    let mut errors: Vec<f64> = data
        .chunks_exact(d)
        .zip(codes)
        .map(|(v, &c)| squared_distance(v, sums.row(c as usize).as_slice().unwrap()))
        .collect();
    let count = errors.len();
    for t in (0..k_eff).filter(|&t| counts[t] == 0) {
        let pick = errors
            .iter()
            .enumerate()
            .filter(|(_, e)| e.is_finite())
            .max_by(|(ia, a), (ib, b)| a.total_cmp(b).then(ib.cmp(ia)))
            .map(|(i, _)| i)
            .unwrap_or(t % count);
        errors[pick] = f64::NEG_INFINITY;
        sums.row_mut(t).assign(&ndarray::ArrayView1::from(&data[pick * d..(pick + 1) * d]));
    }
    sums
}

/// Recomputes centroids as the means of their members; empty clusters are
/// re-seeded to the subvectors with the largest reconstruction error.
pub fn update_codebook(s: &SubvectorMatrix, codes: &Codes, k_eff: usize) -> Codebook {
    Codebook { centroids: update_from(&s.data, s.d, &codes.assignments, k_eff) }
}

/// `(1 / (m_hat n)) * sum ||w_ij - c(b_ij)||^2`.
pub fn reconstruction_error(s: &SubvectorMatrix, codes: &Codes, codebook: &Codebook) -> f64 {
    let total: f64 = s
        .iter()
        .zip(&codes.assignments)
        .map(|(v, &c)| squared_distance(v, codebook.centroid(c as usize)))
        .sum();
    total / s.len() as f64
}

fn initialize_codes<R: Rng>(rng: &mut R, count: usize, k_eff: usize) -> Vec<u32> {
    (0..count).map(|_| rng.gen_range(0..k_eff as u32)).collect()
}

/// `min(k, num_subvectors / 4)`, and at least one centroid.
pub fn clamp_codebook_size(k: usize, num_subvectors: usize) -> usize {
    k.min(num_subvectors / 4).max(1)
}

/// Lloyd iterations from uniformly random codes.
///
/// Each round updates the codebook from the current codes, then reassigns
/// codes; it stops early once the codes no longer change.
pub fn kmeans(s: &SubvectorMatrix, k_eff: usize, iters: usize, seed: u64) -> Quantization {
    assert!(k_eff >= 1);
    let mut rng = seeded(seed);
    let mut codes = Codes { assignments: initialize_codes(&mut rng, s.len(), k_eff), m_hat: s.m_hat, n: s.n };
    let mut codebook = update_codebook(s, &codes, k_eff);
    let mut trace = Vec::new();
    for _ in 0..iters {
        codebook = update_codebook(s, &codes, k_eff);
        let next = assign_codes(s, &codebook).expect("dimension fixed by construction");
        let stable = next == codes;
        codes = next;
        trace.push(reconstruction_error(s, &codes, &codebook));
        if stable {
            break;
        }
    }
    let error = reconstruction_error(s, &codes, &codebook);
    Quantization { codes, codebook, error, trace }
}

/// SR-C: annealed k-means.
///
/// Codes start uniformly random. At iteration `τ = 1..=I` every subvector
/// is perturbed by `x * (1 - τ/I)^γ` with `x ~ N(0, diag(Σ))`, the codebook
/// is fitted to the perturbed subvectors, and the codes are reassigned
/// against the clean ones. The last iteration is noise free.
pub fn src(s: &SubvectorMatrix, stats: &CovarianceStats, k_eff: usize, cfg: &SrcConfig) -> Result<Quantization> {
    if stats.dim() != s.d {
        return Err(Error::DimensionMismatch { expected: s.d, actual: stats.dim() });
    }
    if cfg.iterations == 0 || !(cfg.gamma > 0.0) {
        return Err(Error::InvalidArgument(format!("SR-C needs I >= 1 and γ > 0, got {cfg:?}")));
    }
    assert!(k_eff >= 1);
    let mut rng = seeded(cfg.seed);
    let mut gauss = Gaussian::new();
    let mut codes = Codes { assignments: initialize_codes(&mut rng, s.len(), k_eff), m_hat: s.m_hat, n: s.n };
    let std_dev: Vec<f64> = stats.sigma.diag().iter().map(|v| v.max(0.0).sqrt()).collect();
    let noiseless = std_dev.iter().all(|&v| v == 0.0);
    let mut noisy = s.data.clone();
    let mut codebook = update_codebook(s, &codes, k_eff);
    let mut trace = Vec::with_capacity(cfg.iterations);
    for tau in 1..=cfg.iterations {
        let scale = cfg.noise_scale(tau);
        let centroids = if noiseless || scale == 0.0 {
            update_from(&s.data, s.d, &codes.assignments, k_eff)
        } else {
            for (dst, src) in noisy.chunks_exact_mut(s.d).zip(s.data.chunks_exact(s.d)) {
                for a in 0..s.d {
                    dst[a] = if std_dev[a] == 0.0 {
                        src[a]
                    } else {
                        src[a] + gauss.sample(&mut rng) * std_dev[a] * scale
                    };
                }
            }
            update_from(&noisy, s.d, &codes.assignments, k_eff)
        };
        codebook = Codebook { centroids };
        codes = assign_codes(s, &codebook)?;
        trace.push(reconstruction_error(s, &codes, &codebook));
    }
    let error = reconstruction_error(s, &codes, &codebook);
    Ok(Quantization { codes, codebook, error, trace })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::permsearch::subvector_covariance;
    use ndarray::array;

    fn gaussian_vectors(count: usize, d: usize, seed: u64) -> SubvectorMatrix {
        let mut rng = seeded(seed);
        let mut g = Gaussian::new();
        SubvectorMatrix::from_vectors(d, (0..count * d).map(|_| g.sample(&mut rng)).collect())
    }

    fn oracle_nearest(v: &[f64], cb: &Codebook) -> u32 {
        let mut best = (f64::INFINITY, 0);
        for t in 0..cb.len() {
            let dist: f64 = v.iter().zip(cb.centroid(t)).map(|(a, b)| (a - b).powi(2)).sum();
            if dist < best.0 {
                best = (dist, t);
            }
        }
        best.1 as u32
    }

    #[test]
    fn assign_exact_match() {
        let s = SubvectorMatrix::from_vectors(2, vec![0.0, 0.0, 1.0, 1.0]);
        let cb = Codebook { centroids: array![[0.0, 0.0], [1.0, 1.0]] };
        let codes = assign_codes(&s, &cb).unwrap();
        assert_eq!(codes.assignments, vec![0, 1]);
        assert_eq!(reconstruction_error(&s, &codes, &cb), 0.0);
    }

    #[test]
    fn assign_tie_goes_to_lowest_index() {
        let s = SubvectorMatrix::from_vectors(2, vec![0.5, 0.5]);
        let cb = Codebook { centroids: array![[0.0, 0.0], [1.0, 1.0]] };
        assert_eq!(assign_codes(&s, &cb).unwrap().assignments, vec![0]);
    }

    #[test]
    fn assign_matches_brute_force() {
        let s = gaussian_vectors(200, 3, 1);
        let cb = Codebook { centroids: Array2::from_shape_vec((8, 3), gaussian_vectors(8, 3, 2).data).unwrap() };
        let codes = assign_codes(&s, &cb).unwrap();
        for (v, &c) in s.iter().zip(&codes.assignments) {
            assert_eq!(c, oracle_nearest(v, &cb));
        }
    }

    #[test]
    fn assign_dimension_mismatch() {
        let s = gaussian_vectors(4, 3, 1);
        let cb = Codebook { centroids: Array2::zeros((2, 2)) };
        assert!(matches!(assign_codes(&s, &cb), Err(Error::DimensionMismatch { expected: 3, actual: 2 })));
    }

    #[test]
    fn update_one_member_each() {
        let s = gaussian_vectors(3, 2, 4);
        let codes = Codes { assignments: vec![2, 0, 1], m_hat: 1, n: 3 };
        let cb = update_codebook(&s, &codes, 3);
        assert_eq!(cb.centroid(2), s.get(0));
        assert_eq!(cb.centroid(0), s.get(1));
        assert_eq!(cb.centroid(1), s.get(2));
    }

    #[test]
    fn update_reseeds_empty_cluster() {
        let s = SubvectorMatrix::from_vectors(1, vec![0.0, 1.0, 5.0, 2.0]);
        let codes = Codes { assignments: vec![0; 4], m_hat: 1, n: 4 };
        let cb = update_codebook(&s, &codes, 2);
        assert_eq!(cb.centroid(0), &[2.0]);
        // worst reconstructed under the mean 2.0 is 5.0
        assert_eq!(cb.centroid(1), &[5.0]);
    }

    #[test]
    fn update_reseeds_distinct_subvectors() {
        let s = SubvectorMatrix::from_vectors(1, vec![0.0, 1.0, 5.0, 2.0, -4.0]);
        let codes = Codes { assignments: vec![0; 5], m_hat: 1, n: 5 };
        let cb = update_codebook(&s, &codes, 3);
        // mean 0.8: squared errors 23.04 for -4.0, then 17.64 for 5.0
        assert_eq!(cb.centroid(1), &[-4.0]);
        assert_eq!(cb.centroid(2), &[5.0]);
    }

    #[test]
    fn update_matches_grouped_mean_oracle() {
        let s = gaussian_vectors(300, 4, 5);
        let mut rng = seeded(9);
        let assignments: Vec<u32> = (0..300).map(|_| rng.gen_range(0..6)).collect();
        let codes = Codes { assignments: assignments.clone(), m_hat: 1, n: 300 };
        let cb = update_codebook(&s, &codes, 6);
        for t in 0..6u32 {
            let members: Vec<&[f64]> = s.iter().zip(&assignments).filter(|(_, &c)| c == t).map(|(v, _)| v).collect();
            for a in 0..4 {
                let mean = members.iter().map(|v| v[a]).sum::<f64>() / members.len() as f64;
                assert!((cb.centroid(t as usize)[a] - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn kmeans_enough_centroids_is_exact() {
        let s = SubvectorMatrix::from_vectors(2, [0.0, 0.0, 1.0, 1.0, 3.0, -1.0].repeat(3));
        let q = kmeans(&s, 9, 50, 2);
        assert!(q.error < 1e-24, "{}", q.error);
    }

    #[test]
    fn kmeans_recovers_separated_clusters() {
        let mut rng = seeded(3);
        let mut g = Gaussian::new();
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for i in 0..200 {
            let (cx, cy) = if i % 2 == 0 { (-10.0, 0.0) } else { (10.0, 5.0) };
            data.push(cx + g.sample(&mut rng) * 0.5);
            data.push(cy + g.sample(&mut rng) * 0.5);
            labels.push(i % 2);
        }
        let s = SubvectorMatrix::from_vectors(2, data.clone());
        let q = kmeans(&s, 2, 100, 7);
        for cluster in 0..2 {
            let pts: Vec<&[f64]> = data.chunks(2).zip(&labels).filter(|(_, &l)| l == cluster).map(|(p, _)| p).collect();
            let mean = [
                pts.iter().map(|p| p[0]).sum::<f64>() / pts.len() as f64,
                pts.iter().map(|p| p[1]).sum::<f64>() / pts.len() as f64,
            ];
            let found = (0..2).any(|t| {
                let c = q.codebook.centroid(t);
                (c[0] - mean[0]).abs() < 1e-9 && (c[1] - mean[1]).abs() < 1e-9
            });
            assert!(found, "cluster {cluster} mean {mean:?} not recovered");
        }
    }

    #[test]
    fn kmeans_zero_iterations_keeps_init() {
        let s = gaussian_vectors(50, 2, 8);
        let q = kmeans(&s, 4, 0, 11);
        let mut rng = seeded(11);
        let init = initialize_codes(&mut rng, 50, 4);
        assert_eq!(q.codes.assignments, init);
        let cb = update_codebook(&s, &q.codes, 4);
        assert_eq!(q.error, reconstruction_error(&s, &q.codes, &cb));
        assert!(q.trace.is_empty());
    }

    #[test]
    fn kmeans_error_is_monotone() {
        let s = gaussian_vectors(500, 3, 12);
        let q = kmeans(&s, 16, 100, 1);
        for w in q.trace.windows(2) {
            assert!(w[1] <= w[0] * (1.0 + 1e-12), "{} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn src_single_iteration_is_one_kmeans_round() {
        let s = gaussian_vectors(100, 2, 13);
        let stats = subvector_covariance(&s).unwrap();
        let cfg = SrcConfig { iterations: 1, gamma: 0.5, seed: 4 };
        assert_eq!(cfg.noise_scale(1), 0.0);
        let a = src(&s, &stats, 8, &cfg).unwrap();
        let mut rng = seeded(4);
        let init = Codes { assignments: initialize_codes(&mut rng, 100, 8), m_hat: 1, n: 100 };
        let cb = update_codebook(&s, &init, 8);
        let codes = assign_codes(&s, &cb).unwrap();
        assert_eq!(a.codes, codes);
        assert_eq!(a.codebook, cb);
    }

    #[test]
    fn src_without_noise_equals_kmeans() {
        let s = gaussian_vectors(300, 4, 14);
        let zero = CovarianceStats::zeros(4);
        for seed in 0..3 {
            let cfg = SrcConfig { iterations: 40, gamma: 0.5, seed };
            let a = src(&s, &zero, 16, &cfg).unwrap();
            let b = kmeans(&s, 16, 40, seed);
            assert_eq!(a.codes, b.codes);
            assert_eq!(a.codebook, b.codebook);
            assert_eq!(a.error.to_bits(), b.error.to_bits());
        }
    }

    #[test]
    fn src_rejects_bad_config() {
        let s = gaussian_vectors(10, 2, 1);
        let stats = subvector_covariance(&s).unwrap();
        assert!(src(&s, &stats, 2, &SrcConfig { iterations: 0, ..Default::default() }).is_err());
        assert!(src(&s, &CovarianceStats::zeros(3), 2, &SrcConfig::default()).is_err());
    }

    #[test]
    fn src_is_deterministic() {
        let s = gaussian_vectors(200, 2, 15);
        let stats = subvector_covariance(&s).unwrap();
        let cfg = SrcConfig { iterations: 30, gamma: 0.5, seed: 99 };
        let a = src(&s, &stats, 8, &cfg).unwrap();
        let b = src(&s, &stats, 8, &cfg).unwrap();
        assert_eq!(a.codes, b.codes);
        assert_eq!(a.codebook, b.codebook);
    }

    #[test]
    fn clamp_rule() {
        assert_eq!(clamp_codebook_size(256, 4096), 256);
        assert_eq!(clamp_codebook_size(2048, 128_000), 2048);
        assert_eq!(clamp_codebook_size(256, 100), 25);
        assert_eq!(clamp_codebook_size(256, 3), 1);
    }
}
