//! Train SAITS on a synthetic sine-mixture dataset and compare it with the
//! naive baselines on the validation hold-out.
//!
//! ```text
//! cargo run --release -p saits --example quickstart -- [epochs] [variant]
//! ```

use std::time::Instant;

use saits::config::{SaitsConfig, TrainConfig, Variant};
use saits::data::{synth_generate, SplitName, SynthKind, SynthSpec};
use saits::evaluate::{model_imputation, EvalReport};
use saits::training::train_with_progress;

fn main() -> anyhow::Result<()> {
    let mut args = std::env::args().skip(1);
    let epochs: usize = args.next().map(|a| a.parse()).transpose()?.unwrap_or(40);
    let variant: Variant = args.next().map(|a| a.parse()).transpose()?.unwrap_or(Variant::Saits);

    let data = synth_generate(&SynthSpec::new(SynthKind::SineMixture, 512, 24, 8, 0.1, 7))?;
    let config = SaitsConfig::tiny(24, 8).with_variant(variant);
    let train_cfg = TrainConfig {
        max_epochs: epochs,
        seed: 7,
        ..TrainConfig::default()
    };

    let start = Instant::now();
    let outcome = train_with_progress(&config, &train_cfg, &data, |row| {
        println!(
            "epoch {:>3}  loss {:.4}  val imputation MAE {:.4}  val reconstruction MAE {:.4}",
            row.epoch, row.train_loss, row.val_imputation_mae, row.val_reconstruction_mae
        );
    })?;
    println!(
        "{variant}: best validation MAE {:.4} at epoch {} ({} epochs, {:.1?})",
        outcome.best.best_val_mae,
        outcome.best.best_epoch,
        outcome.epochs_run,
        start.elapsed()
    );

    let mut report = EvalReport::with_baselines(&data)?;
    report.add_method(&data, &model_imputation(&outcome.model()?, &data, 256)?, variant.name())?;
    for row in report.rows.iter().filter(|r| r.split == SplitName::Val.name()) {
        println!("{:<22} val MAE {:.4}  RMSE {:.4}", row.method, row.mae, row.rmse);
    }
    Ok(())
}
