//! Greedy initialization plus local search on a matrix whose rows come in
//! correlated pairs that start out in different subvector slots.
use ndarray::Array2;
use pqf::permsearch::{greedy_init, local_search, permuted_objective, Permutation};
use rand::{Rng, SeedableRng};

fn main() {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
    let (rows, cols, d) = (16, 128, 2);
    let latent = Array2::from_shape_fn((rows / 2, cols), |_| rng.gen_range(-1.0..1.0));
    // row r and row r + rows/2 share a latent; identity pairs r with r+1
    let w = Array2::from_shape_fn((rows, cols), |(r, c)| latent[[r % (rows / 2), c]] + 0.05 * rng.gen_range(-1.0..1.0));
    let identity = Permutation::identity(rows, 1);
    let greedy = greedy_init(&w, d, 1).unwrap();
    let refined = local_search(&w, d, &greedy, 1000, 0);
    for (name, p) in [("identity", &identity), ("greedy", &greedy), ("greedy+local", &refined)] {
        println!("{name:>13}: log|Σ| = {:.4}", permuted_objective(&w, p.indices(), d));
    }
    println!("order: {:?}", refined.indices());
}
