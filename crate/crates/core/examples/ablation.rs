//! Train several variants on the same data and seed and print the hold-out
//! table that `saits ablate` writes to ablation.md.
//!
//! ```text
//! cargo run --release -p saits --example ablation -- [epochs] [variant,variant,...]
//! ```

use saits::cli::{ablate, Preset, RunConfig};
use saits::config::Variant;
use saits::data::{synth_generate, SplitName, SynthKind, SynthSpec};

fn main() -> anyhow::Result<()> {
    let mut args = std::env::args().skip(1);
    let epochs: usize = args.next().map(|a| a.parse()).transpose()?.unwrap_or(40);
    let variants: Vec<Variant> = match args.next() {
        Some(list) => list.split(',').map(str::parse).collect::<Result<_, _>>()?,
        None => vec![Variant::Saits, Variant::SaitsNoDiag, Variant::Saits1Block, Variant::Transformer],
    };
    let data = synth_generate(&SynthSpec::new(SynthKind::SineMixture, 512, 24, 8, 0.1, 7))?;
    let run = RunConfig {
        preset: Some(Preset::Tiny),
        epochs: Some(epochs),
        seed: Some(1),
        ..RunConfig::default()
    };
    let table = ablate(&run, &data, &variants, SplitName::Test)?;
    print!("{}", table.to_markdown());
    Ok(())
}
