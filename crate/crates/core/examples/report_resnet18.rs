//! Bit allocation for ResNet-18 under the small-block regime.
use pqf::codec::{bit_report, LayerCompressionConfig, Regime};
use pqf::tensor_io::load_arch;

fn main() -> pqf::Result<()> {
    let arch = load_arch(concat!(env!("CARGO_MANIFEST_DIR"), "/data/resnet18.arch"))?;
    for regime in [Regime::Small, Regime::Large] {
        let report = bit_report(&arch, &LayerCompressionConfig::new(regime))?;
        println!("{regime:?}: {:.2} MB, ratio {:.2}", report.total_mb(), report.ratio());
    }
    print!("{}", bit_report(&arch, &LayerCompressionConfig::default())?.to_text());
    Ok(())
}
