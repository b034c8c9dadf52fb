//! Train briefly, save a checkpoint, reload it and fill every gap of the test
//! split. Observed entries must come back bit-for-bit.
//!
//! ```text
//! cargo run --release -p saits --example impute -- [epochs]
//! ```

use saits::config::{SaitsConfig, TrainConfig};
use saits::data::{synth_generate, SynthKind, SynthSpec};
use saits::evaluate::metrics;
use saits::training::{train, Checkpoint};

fn main() -> anyhow::Result<()> {
    let epochs: usize = std::env::args().nth(1).map(|a| a.parse()).transpose()?.unwrap_or(30);
    let data = synth_generate(&SynthSpec::new(SynthKind::RandomWalk, 256, 24, 6, 0.2, 3))?;
    let outcome = train(
        &SaitsConfig::tiny(24, 6),
        &TrainConfig {
            max_epochs: epochs,
            seed: 3,
            ..TrainConfig::default()
        },
        &data,
    )?;

    let path = std::env::temp_dir().join("saits_impute_example.bin");
    outcome.best.save(&path)?;
    let model = Checkpoint::load(&path)?.model()?;
    println!("checkpoint {} ({} parameters)", path.display(), model.num_parameters());

    let test = &data.test;
    let (imputed, _) = model.impute(&test.x, &test.mask, 64)?;
    let kept = imputed
        .data()
        .iter()
        .zip(test.x.data())
        .zip(test.mask.data())
        .filter(|(_, &m)| m == 1.0)
        .all(|((a, b), _)| a.to_bits() == b.to_bits());
    let gaps = test.mask.numel() as f64 - test.mask.sum();
    println!("filled {gaps} gaps; observed values unchanged: {kept}");

    let holdout = test.holdout("test")?;
    let m = metrics(&imputed, &holdout.values, &holdout.mask)?;
    println!("test hold-out ({} values): MAE {:.4}  RMSE {:.4}", m.count, m.mae, m.rmse);

    let original = data.standardizer.inverse(&imputed);
    let row: Vec<String> = original.data()[..6].iter().map(|v| format!("{v:.3}")).collect();
    println!("first step of the first test sample, original units: [{}]", row.join(", "));
    Ok(())
}
