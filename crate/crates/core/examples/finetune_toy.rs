//! Train, quantize hard, then fine-tune the codebooks with codes frozen.
use pqf::finetune::{recovery_experiment, RecoveryConfig, ToyKind};

fn main() -> pqf::Result<()> {
    for kind in [ToyKind::Mlp, ToyKind::Conv] {
        let out = recovery_experiment(&RecoveryConfig::new(kind, 1))?;
        println!(
            "{kind:?}: raw {:.3}, quantized {:.3}, fine-tuned {:.3}, structure preserved {}",
            out.raw_val_acc, out.quantized_val_acc, out.finetuned_val_acc, out.structure_preserved
        );
        print!("{}", out.trace.to_csv());
    }
    Ok(())
}
