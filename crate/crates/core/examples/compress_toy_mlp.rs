//! Compresses a small MLP and reports per-layer error and size.
use pqf::codec::{compress_model, LayerCompressionConfig};
use pqf::finetune::mlp;

fn main() -> pqf::Result<()> {
    let ckpt = mlp(&[16, 64, 64, 10], 5).to_checkpoint();
    let cfg = LayerCompressionConfig { skip_first: false, k: 16, k_fc: 16, d_fc: 4, iterations: 200, ..Default::default() };
    let outcome = compress_model(&ckpt, &cfg)?;
    for (name, e) in &outcome.errors {
        println!("{name}: E_t {e:.6}");
    }
    print!("{}", outcome.report.to_text());
    Ok(())
}
