//! Train a Transformer with reconstruction loss only and one with the joint
//! objective, then print both validation curves side by side.
//!
//! The reconstruction-only model keeps lowering its error on observed values
//! while its error on the held-out gaps stays high; the joint model trades a
//! little reconstruction accuracy for much better imputation.
//!
//! ```text
//! cargo run --release -p saits --example ort_vs_joint -- [epochs] [curves.csv]
//! ```

use std::io::Write;

use saits::config::{SaitsConfig, TrainConfig, Variant};
use saits::data::{synth_generate, SynthKind, SynthSpec};
use saits::training::train;

fn main() -> anyhow::Result<()> {
    let mut args = std::env::args().skip(1);
    let epochs: usize = args.next().map(|a| a.parse()).transpose()?.unwrap_or(100);
    let out = args.next();

    let data = synth_generate(&SynthSpec::new(SynthKind::SineMixture, 512, 24, 8, 0.1, 7))?;
    let train_cfg = TrainConfig {
        max_epochs: epochs,
        patience: epochs,
        seed: 1,
        ..TrainConfig::default()
    };
    let run = |v| train(&SaitsConfig::tiny(24, 8).with_variant(v), &train_cfg, &data);
    let ort = run(Variant::TransformerOrtOnly)?;
    let joint = run(Variant::Transformer)?;

    let mut sink: Box<dyn Write> = match &out {
        Some(p) => Box::new(std::fs::File::create(p)?),
        None => Box::new(std::io::stdout()),
    };
    writeln!(sink, "epoch,ort_imputation,ort_reconstruction,joint_imputation,joint_reconstruction")?;
    for (a, b) in ort.curve.rows.iter().zip(&joint.curve.rows) {
        writeln!(
            sink,
            "{},{:.5},{:.5},{:.5},{:.5}",
            a.epoch, a.val_imputation_mae, a.val_reconstruction_mae, b.val_imputation_mae, b.val_reconstruction_mae
        )?;
    }
    if let Some(p) = out {
        eprintln!("wrote {p}");
    }
    Ok(())
}
