//! Permutation groups of ResNet-50, printed as a listing.
use pqf::graph::{format_groups, resolve_groups};
use pqf::tensor_io::load_arch;

fn main() -> pqf::Result<()> {
    let arch = load_arch(concat!(env!("CARGO_MANIFEST_DIR"), "/data/resnet50.arch"))?;
    let groups = resolve_groups(&arch)?;
    println!("# {} groups", groups.len());
    print!("{}", format_groups(&arch, &groups));
    Ok(())
}
