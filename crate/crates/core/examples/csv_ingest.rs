//! Read a long-format CSV with gaps, window it into samples and pack it as an
//! imputation dataset, then show what each split holds.
//!
//! ```text
//! cargo run --release -p saits --example csv_ingest -- [path.csv]
//! ```
//!
//! Without a path a small two-station file is written to a temp directory.

use std::fmt::Write as _;

use saits::data::{ingest_csv, window, CsvSchema, ImputationDataset, SplitSpec};

fn demo_csv() -> anyhow::Result<std::path::PathBuf> {
    let mut text = String::from("station,temp,humidity,wind\n");
    for station in ["north", "south"] {
        for hour in 0..120 {
            let t = hour as f64 / 24.0 * std::f64::consts::TAU;
            let temp = if hour % 17 == 3 { "NA".to_string() } else { format!("{:.2}", 12.0 + 6.0 * t.sin()) };
            let wind = if hour % 11 == 5 { "NaN".to_string() } else { format!("{:.2}", 3.0 + (t * 0.5).cos()) };
            writeln!(text, "{station},{temp},{:.1},{wind}", 60.0 + 15.0 * t.cos())?;
        }
    }
    let path = std::env::temp_dir().join("saits_demo_stations.csv");
    std::fs::write(&path, text)?;
    Ok(path)
}

fn main() -> anyhow::Result<()> {
    let path = match std::env::args().nth(1) {
        Some(p) => p.into(),
        None => demo_csv()?,
    };
    let schema = CsvSchema {
        sample_id_column: Some("station".into()),
        ..CsvSchema::default()
    };
    let raw = ingest_csv(&path, &schema)?;
    let missing = raw.rows.iter().flatten().filter(|v| v.is_none()).count();
    println!("{}: {} rows, features {:?}, {missing} missing cells", path.display(), raw.len(), raw.features);

    let samples = window(&raw, 24, 6)?;
    println!("{} windows of 24 steps", samples.len());

    let ds = ImputationDataset::from_samples(&samples, raw.features.clone(), &SplitSpec::default())?;
    for (name, split) in [("train", &ds.train), ("val", &ds.val), ("test", &ds.test)] {
        let held = split.holdout.as_ref().map_or(0.0, |h| h.mask.sum());
        println!(
            "{name:<5} {:>3} samples, {:>5} observed, {held:>4} held out",
            split.len(),
            split.mask.sum()
        );
    }
    for (f, (m, s)) in ds.standardizer.features.iter().zip(ds.standardizer.mean.iter().zip(&ds.standardizer.std)) {
        println!("{f:<9} mean {m:>7.3}  std {s:>6.3}");
    }
    Ok(())
}
