//! Writes a compressed container, reads it back and expands it.
use pqf::codec::{compress_model, decompress, LayerCompressionConfig};
use pqf::finetune::conv_net;
use pqf::tensor_io::{compressed_to_bytes, load_compressed, save_compressed};

fn main() -> pqf::Result<()> {
    let ckpt = conv_net(2, 4, 8, 4, 9).to_checkpoint();
    let cfg = LayerCompressionConfig { skip_first: false, k: 8, k_fc: 8, iterations: 100, ..Default::default() };
    let outcome = compress_model(&ckpt, &cfg)?;
    let path = std::env::temp_dir().join("pqf_example.pqfc");
    let written = save_compressed(&outcome.model, &path)?;
    let back = load_compressed(&path)?;
    println!("{written} bytes, identical after reload: {}", compressed_to_bytes(&back)? == compressed_to_bytes(&outcome.model)?);
    let restored = decompress(&back)?;
    for l in &restored.layers {
        println!("{} {:?}", l.name, l.kind);
    }
    std::fs::remove_file(path)?;
    Ok(())
}
