//! k-means, SR-C and permutation+SR-C on isotropic and anisotropic weights.
use pqf::bench::{median_errors, run_bench, BenchConfig, Generator};

fn main() -> pqf::Result<()> {
    for generator in [Generator::Isotropic, Generator::Anisotropic] {
        let rows = run_bench(&BenchConfig { generator, seeds: 8, ..Default::default() })?;
        print!("{generator:?}:");
        for (method, e) in median_errors(&rows) {
            print!("  {} {e:.5}", method.as_str());
        }
        println!();
    }
    Ok(())
}
