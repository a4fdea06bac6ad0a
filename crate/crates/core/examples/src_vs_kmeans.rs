//! Annealed SR-C against plain k-means on clustered 4-D data.
use pqf::layout::SubvectorMatrix;
use pqf::permsearch::subvector_covariance;
use pqf::quantize::{kmeans, src, SrcConfig};
use rand::{Rng, SeedableRng};

fn main() -> pqf::Result<()> {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
    let (n, d) = (1024, 4);
    let centres: Vec<f64> = (0..16 * d).map(|_| rng.gen_range(-3.0..3.0)).collect();
    let mut data = Vec::with_capacity(n * d);
    for _ in 0..n {
        let c = rng.gen_range(0..16);
        data.extend((0..d).map(|a| centres[c * d + a] + 0.4 * rng.gen_range(-1.0..1.0)));
    }
    let s = SubvectorMatrix::from_vectors(d, data);
    let stats = subvector_covariance(&s)?;
    println!("seed  kmeans    src");
    for seed in 0..5 {
        let km = kmeans(&s, 64, 1000, seed);
        let sr = src(&s, &stats, 64, &SrcConfig { iterations: 1000, gamma: 0.5, seed })?;
        println!("{seed:>4}  {:.5}  {:.5}", km.error, sr.error);
    }
    Ok(())
}
