//! Command-line front end.
//!
//! Settings resolve in the order flag, environment variable (`SAITS_*`),
//! TOML config file, preset, built-in default. Every command writes its
//! effective configuration to `run_config.json` in the output directory.

use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context};
use clap::{ArgGroup, Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::{SaitsConfig, TrainConfig, Variant};
use crate::data::{
    ingest_csv, synth_generate, window, CsvSchema, ImputationDataset, SplitName, SplitSpec, SynthKind, SynthSpec,
};
use crate::evaluate::{model_imputation, AblationRow, AblationTable, EvalReport, ImputedSplits};
use crate::gradcheck::{corrupted_case, full_suite, run_cases};
use crate::training::{train_with_progress, Checkpoint, CurveRow};
use saits_tensor::{GradCheckOptions, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    /// The fixed SAITS-base hyper-parameters.
    SaitsBase,
    /// Desk-scale configuration.
    Tiny,
}

impl Preset {
    fn model(self, steps: usize, features: usize) -> SaitsConfig {
        match self {
            Preset::SaitsBase => SaitsConfig::saits_base(steps, features),
            Preset::Tiny => SaitsConfig::tiny(steps, features),
        }
    }
}

/// Flat key/value settings shared by flags, environment and config file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct RunConfig {
    pub preset: Option<Preset>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub variant: Option<Variant>,
    pub dataset: Option<PathBuf>,
    pub epochs: Option<usize>,
    pub patience: Option<usize>,
    pub batch: Option<usize>,
    pub lr: Option<f64>,
    #[serde(alias = "mit_rate")]
    pub mit_rate: Option<f64>,
    pub lambda: Option<f64>,
    pub holes: Option<f64>,
    // File-only architecture overrides.
    #[serde(alias = "n_layers")]
    pub n_layers: Option<usize>,
    #[serde(alias = "d_model")]
    pub d_model: Option<usize>,
    #[serde(alias = "d_ffn")]
    pub d_ffn: Option<usize>,
    #[serde(alias = "n_heads")]
    pub n_heads: Option<usize>,
    #[serde(alias = "d_k")]
    pub d_k: Option<usize>,
    #[serde(alias = "d_v")]
    pub d_v: Option<usize>,
    pub dropout: Option<f64>,
    #[serde(alias = "grad_clip")]
    pub grad_clip: Option<f64>,
}

macro_rules! overlay {
    ($hi:expr, $lo:expr, $($field:ident),*) => {
        RunConfig { $($field: $hi.$field.or($lo.$field)),* }
    };
}

impl RunConfig {
    pub fn from_toml_file(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    /// Fields of `self` win; gaps are filled from `lower`.
    pub fn over(self, lower: RunConfig) -> RunConfig {
        overlay!(
            self, lower, preset, seed, out, variant, dataset, epochs, patience, batch, lr, mit_rate, lambda, holes,
            n_layers, d_model, d_ffn, n_heads, d_k, d_v, dropout, grad_clip
        )
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    pub fn out(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from("saits-out"))
    }

    pub fn hole_fraction(&self) -> f64 {
        self.holes.unwrap_or(0.1)
    }

    pub fn dataset(&self) -> anyhow::Result<PathBuf> {
        self.dataset.clone().context("no dataset given (use --dataset or SAITS_DATASET)")
    }

    pub fn model_config(&self, steps: usize, features: usize) -> anyhow::Result<SaitsConfig> {
        let base = self.preset.unwrap_or(Preset::SaitsBase).model(steps, features);
        let cfg = SaitsConfig {
            n_layers: self.n_layers.unwrap_or(base.n_layers),
            d_model: self.d_model.unwrap_or(base.d_model),
            d_ffn: self.d_ffn.unwrap_or(base.d_ffn),
            n_heads: self.n_heads.unwrap_or(base.n_heads),
            d_k: self.d_k.unwrap_or(base.d_k),
            d_v: self.d_v.unwrap_or(base.d_v),
            dropout: self.dropout.unwrap_or(base.dropout),
            mit_weight: self.lambda.unwrap_or(base.mit_weight),
            mit_rate: self.mit_rate.unwrap_or(base.mit_rate),
            variant: self.variant.unwrap_or(base.variant),
            ..base
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train_config(&self) -> anyhow::Result<TrainConfig> {
        let d = TrainConfig::default();
        let cfg = TrainConfig {
            lr: self.lr.unwrap_or(d.lr),
            batch_size: self.batch.unwrap_or(d.batch_size),
            patience: self.patience.unwrap_or(d.patience),
            max_epochs: self.epochs.unwrap_or(d.max_epochs),
            seed: self.seed(),
            grad_clip: self.grad_clip.or(d.grad_clip),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Parser)]
#[command(name = "saits", version, about = "Self-attention imputation for multivariate time series")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// TOML file with flat keys mirroring the flag names.
    #[arg(long, global = true, env = "SAITS_CONFIG")]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, env = "SAITS_PRESET", value_enum)]
    pub preset: Option<Preset>,
    #[arg(long, global = true, env = "SAITS_SEED")]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, env = "SAITS_OUT")]
    pub out: Option<PathBuf>,
    #[arg(long, global = true, env = "SAITS_VARIANT")]
    pub variant: Option<Variant>,
    /// Packed dataset file.
    #[arg(long, global = true, env = "SAITS_DATASET")]
    pub dataset: Option<PathBuf>,
    /// Maximum number of epochs.
    #[arg(long, global = true, env = "SAITS_EPOCHS")]
    pub epochs: Option<usize>,
    #[arg(long, global = true, env = "SAITS_PATIENCE")]
    pub patience: Option<usize>,
    #[arg(long, global = true, env = "SAITS_BATCH")]
    pub batch: Option<usize>,
    #[arg(long, global = true, env = "SAITS_LR")]
    pub lr: Option<f64>,
    /// Fraction of observed values hidden per batch for the imputation loss.
    #[arg(long, global = true, env = "SAITS_MIT_RATE")]
    pub mit_rate: Option<f64>,
    /// Weight of the imputation loss.
    #[arg(long, global = true, env = "SAITS_LAMBDA")]
    pub lambda: Option<f64>,
    /// Fraction of observed val/test values held out for evaluation.
    #[arg(long, global = true, env = "SAITS_HOLES")]
    pub holes: Option<f64>,
}

impl GlobalArgs {
    fn as_run_config(&self) -> RunConfig {
        RunConfig {
            preset: self.preset,
            seed: self.seed,
            out: self.out.clone(),
            variant: self.variant,
            dataset: self.dataset.clone(),
            epochs: self.epochs,
            patience: self.patience,
            batch: self.batch,
            lr: self.lr,
            mit_rate: self.mit_rate,
            lambda: self.lambda,
            holes: self.holes,
            ..RunConfig::default()
        }
    }

    /// Flags and environment over the config file.
    pub fn resolve(&self) -> anyhow::Result<RunConfig> {
        let file = match &self.config {
            Some(p) => RunConfig::from_toml_file(p)?,
            None => RunConfig::default(),
        };
        Ok(self.as_run_config().over(file))
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build a packed dataset from a synthetic generator or a CSV file.
    #[command(group(ArgGroup::new("source").required(true).args(["kind", "csv"])))]
    Generate(GenerateArgs),
    /// Train a model; writes checkpoint.bin, curves.csv and report files.
    Train,
    /// Fill every gap of a dataset with a trained model.
    Impute {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Check that every observed value was copied bit-for-bit.
        #[arg(long)]
        verify: bool,
    },
    /// Score a model or an imputed file next to the Median and Last baselines.
    #[command(group(ArgGroup::new("method").args(["checkpoint", "imputed"])))]
    Evaluate {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        imputed: Option<PathBuf>,
    },
    /// Train several variants on the same data and seed and compare them.
    Ablate {
        #[arg(long, value_delimiter = ',', required = true)]
        variants: Vec<Variant>,
        /// Split whose hold-out is scored.
        #[arg(long, default_value = "val")]
        split: SplitName,
    },
    /// Finite-difference check of every operation and model loss.
    Gradcheck {
        /// Dropout rate; anything above 0 is refused.
        #[arg(long, default_value_t = 0.0)]
        dropout: f64,
        /// Add a case with a deliberately wrong backward rule.
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long, value_enum)]
    pub kind: Option<KindArg>,
    /// CSV file with a header row, one row per time step.
    #[arg(long)]
    pub csv: Option<PathBuf>,
    #[arg(long, short = 'n', default_value_t = 512)]
    pub n: usize,
    /// Time steps per sample.
    #[arg(long = "T", default_value_t = 24)]
    pub steps: usize,
    /// Features (synthetic data only).
    #[arg(long = "D", default_value_t = 8)]
    pub features: usize,
    /// Fraction of values removed at random (synthetic data only).
    #[arg(long, default_value_t = 0.1)]
    pub missing: f64,
    /// Window stride for CSV input.
    #[arg(long, default_value_t = 1)]
    pub stride: usize,
    /// Cell contents read as missing in CSV input.
    #[arg(long = "na", default_values_t = ["NA".to_string(), "NaN".to_string()])]
    pub na_tokens: Vec<String>,
    /// Column holding a sample identifier in CSV input.
    #[arg(long)]
    pub id_column: Option<String>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum KindArg {
    SineMixture,
    RandomWalk,
}

impl From<KindArg> for SynthKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::SineMixture => SynthKind::SineMixture,
            KindArg::RandomWalk => SynthKind::RandomWalk,
        }
    }
}

fn prepare_out(run: &RunConfig, command: &str, extra: serde_json::Value) -> anyhow::Result<PathBuf> {
    let out = run.out();
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let echo = json!({ "command": command, "settings": run, "resolved": extra });
    std::fs::write(out.join("run_config.json"), serde_json::to_string_pretty(&echo)?)?;
    Ok(out)
}

fn load_dataset(run: &RunConfig) -> anyhow::Result<ImputationDataset> {
    let path = run.dataset()?;
    ImputationDataset::load(&path).with_context(|| format!("loading dataset {}", path.display()))
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    let run = cli.global.resolve()?;
    match cli.command {
        Command::Generate(args) => cmd_generate(&run, &args),
        Command::Train => cmd_train(&run),
        Command::Impute { checkpoint, verify } => cmd_impute(&run, &checkpoint, verify),
        Command::Evaluate { checkpoint, imputed } => cmd_evaluate(&run, checkpoint.as_deref(), imputed.as_deref()),
        Command::Ablate { variants, split } => cmd_ablate(&run, &variants, split),
        Command::Gradcheck { dropout, inject_fault } => cmd_gradcheck(&run, dropout, inject_fault),
    }
}

fn cmd_generate(run: &RunConfig, args: &GenerateArgs) -> anyhow::Result<()> {
    let (ds, spec) = match (&args.kind, &args.csv) {
        (Some(kind), _) => {
            let spec = SynthSpec {
                hole_fraction: run.hole_fraction(),
                ..SynthSpec::new((*kind).into(), args.n, args.steps, args.features, args.missing, run.seed())
            };
            (synth_generate(&spec)?, json!({ "synthetic": spec }))
        }
        (None, Some(csv)) => {
            let schema = CsvSchema {
                na_tokens: args.na_tokens.clone(),
                sample_id_column: args.id_column.clone(),
                ..CsvSchema::default()
            };
            let raw = ingest_csv(csv, &schema)?;
            let samples = window(&raw, args.steps, args.stride)?;
            let split = SplitSpec {
                hole_fraction: run.hole_fraction(),
                seed: run.seed(),
                ..SplitSpec::default()
            };
            let mut ds = ImputationDataset::from_samples(&samples, raw.features.clone(), &split)?;
            let spec = json!({ "csv": csv, "schema": schema, "steps": args.steps, "stride": args.stride, "split": split });
            ds.source = spec.clone();
            (ds, spec)
        }
        (None, None) => bail!("either --kind or --csv is required"),
    };
    let out = prepare_out(run, "generate", spec)?;
    let path = out.join("dataset.bin");
    ds.save(&path)?;
    ImputationDataset::load(&path).context("re-reading the written dataset")?;
    println!(
        "wrote {} (train {}, val {}, test {} samples of [{}, {}])",
        path.display(),
        ds.train.len(),
        ds.val.len(),
        ds.test.len(),
        ds.n_steps(),
        ds.n_features()
    );
    Ok(())
}

fn print_epoch(row: &CurveRow) {
    if row.epoch == 1 || row.epoch.is_multiple_of(10) {
        eprintln!(
            "epoch {:>5}  loss {:.5}  val imputation MAE {:.5}  val reconstruction MAE {:.5}",
            row.epoch, row.train_loss, row.val_imputation_mae, row.val_reconstruction_mae
        );
    }
}

fn cmd_train(run: &RunConfig) -> anyhow::Result<()> {
    let ds = load_dataset(run)?;
    let model_cfg = run.model_config(ds.n_steps(), ds.n_features())?;
    let train_cfg = run.train_config()?;
    let out = prepare_out(run, "train", json!({ "model": model_cfg, "train": train_cfg }))?;

    let outcome = train_with_progress(&model_cfg, &train_cfg, &ds, print_epoch)?;
    let ckpt_path = out.join("checkpoint.bin");
    outcome.best.save(&ckpt_path)?;
    outcome.curve.write_csv(&out.join("curves.csv"))?;
    Checkpoint::load(&ckpt_path).context("re-reading the written checkpoint")?;

    let model = outcome.model()?;
    let mut report = EvalReport::with_baselines(&ds)?;
    report.add_method(&ds, &model_imputation(&model, &ds, train_cfg.batch_size)?, model_cfg.variant.name())?;
    report.seed = train_cfg.seed;
    report.config = json!({ "model": model_cfg, "train": train_cfg });
    report.write_csv(&out.join("report.csv"))?;
    report.write_json(&out.join("report.json"))?;
    println!(
        "{}: best validation MAE {:.5} at epoch {} of {}; artifacts in {}",
        model_cfg.variant,
        outcome.best.best_val_mae,
        outcome.best.best_epoch,
        outcome.epochs_run,
        out.display()
    );
    Ok(())
}

/// Positions observed in `input` whose bits differ in `output`.
pub fn observed_mismatches(input: &Tensor, mask: &Tensor, output: &Tensor) -> usize {
    input
        .data()
        .iter()
        .zip(output.data())
        .zip(mask.data())
        .filter(|((a, b), m)| **m == 1.0 && a.to_bits() != b.to_bits())
        .count()
}

fn cmd_impute(run: &RunConfig, checkpoint: &Path, verify: bool) -> anyhow::Result<()> {
    let ds = load_dataset(run)?;
    let ckpt = Checkpoint::load(checkpoint)?;
    ensure!(
        (ckpt.config.n_steps, ckpt.config.n_features) == (ds.n_steps(), ds.n_features()),
        "checkpoint expects [T, D] = [{}, {}] but the dataset has [{}, {}]",
        ckpt.config.n_steps,
        ckpt.config.n_features,
        ds.n_steps(),
        ds.n_features()
    );
    let model = ckpt.model()?;
    let out = prepare_out(run, "impute", json!({ "checkpoint": checkpoint, "model": ckpt.config }))?;
    let imputed = model_imputation(&model, &ds, 256)?;

    let mut result = ds.clone();
    let mut checked = 0usize;
    for name in SplitName::ALL {
        let split = result.split_mut(name);
        let filled = imputed.get(name).clone();
        if verify {
            let bad = observed_mismatches(&split.x, &split.mask, &filled);
            ensure!(bad == 0, "{bad} observed values changed in split `{}`", name.name());
            checked += split.mask.sum() as usize;
        }
        split.mask = Tensor::ones(filled.shape().to_vec());
        split.x = filled;
    }
    result.source = json!({ "imputed_from": ds.source, "checkpoint": checkpoint });
    let path = out.join("imputed.bin");
    result.save(&path)?;
    if verify {
        println!("verified {checked} observed values copied bit-for-bit");
    }
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_evaluate(run: &RunConfig, checkpoint: Option<&Path>, imputed: Option<&Path>) -> anyhow::Result<()> {
    let ds = load_dataset(run)?;
    let out = prepare_out(run, "evaluate", json!({ "checkpoint": checkpoint, "imputed": imputed }))?;
    let mut report = EvalReport::with_baselines(&ds)?;
    report.seed = run.seed();
    if let Some(path) = checkpoint {
        let ckpt = Checkpoint::load(path)?;
        let model = ckpt.model()?;
        report.add_method(&ds, &model_imputation(&model, &ds, 256)?, ckpt.config.variant.name())?;
        report.config = json!({ "model": ckpt.config, "train": ckpt.train });
    }
    if let Some(path) = imputed {
        let filled = ImputationDataset::load(path)?;
        for name in SplitName::ALL {
            ensure!(
                filled.split(name).x.shape() == ds.split(name).x.shape(),
                "imputed split `{}` does not match the dataset",
                name.name()
            );
        }
        let splits = ImputedSplits {
            train: filled.train.x,
            val: filled.val.x,
            test: filled.test.x,
        };
        let method = path.file_stem().map_or("imputed".into(), |s| s.to_string_lossy().into_owned());
        report.add_method(&ds, &splits, &method)?;
    }
    report.write_csv(&out.join("report.csv"))?;
    report.write_json(&out.join("report.json"))?;
    for r in &report.rows {
        println!("{:<24} {:<5} MAE {:.5}  RMSE {:.5}  positions {}", r.method, r.split, r.mae, r.rmse, r.positions);
    }
    Ok(())
}

/// Train each variant with identical data and seed and score the hold-out
/// of `split`.
pub fn ablate(
    run: &RunConfig,
    ds: &ImputationDataset,
    variants: &[Variant],
    split: SplitName,
) -> anyhow::Result<AblationTable> {
    ensure!(variants.len() >= 2, "an ablation needs at least two variants");
    let train_cfg = run.train_config()?;
    let mut table = AblationTable {
        split: split.name().to_string(),
        rows: Vec::new(),
    };
    for &variant in variants {
        let cfg = RunConfig {
            variant: Some(variant),
            ..run.clone()
        }
        .model_config(ds.n_steps(), ds.n_features())?;
        eprintln!("training {variant}");
        let outcome = train_with_progress(&cfg, &train_cfg, ds, print_epoch)?;
        let imputed = model_imputation(&outcome.model()?, ds, train_cfg.batch_size)?;
        let rec = crate::evaluate::evaluate_method(imputed.get(split), ds.split(split), &ds.standardizer, variant.name(), split)?;
        table.rows.push(AblationRow {
            variant: variant.name().to_string(),
            mae: rec.mae,
            rmse: rec.rmse,
            mre: rec.mre,
            epochs: outcome.epochs_run,
        });
    }
    Ok(table)
}

fn cmd_ablate(run: &RunConfig, variants: &[Variant], split: SplitName) -> anyhow::Result<()> {
    let ds = load_dataset(run)?;
    let out = prepare_out(run, "ablate", json!({ "variants": variants, "split": split.name() }))?;
    let table = ablate(run, &ds, variants, split)?;
    table.write_csv(&out.join("ablation.csv"))?;
    let md = table.to_markdown();
    std::fs::write(out.join("ablation.md"), &md)?;
    print!("{md}");
    Ok(())
}

fn cmd_gradcheck(run: &RunConfig, dropout: f64, inject_fault: bool) -> anyhow::Result<()> {
    let config = SaitsConfig {
        dropout,
        ..SaitsConfig::gradcheck(4, 3)
    };
    prepare_out(run, "gradcheck", json!({ "model": config }))?;
    let mut cases = full_suite(&config, run.seed())?;
    if inject_fault {
        cases.push(corrupted_case());
    }
    let report = run_cases(&cases, GradCheckOptions::default())?;
    for c in &report.cases {
        let status = if c.report.passed() { "ok" } else { "FAIL" };
        println!("{status:<5} {:<48} max rel error {:.3e}", c.name, c.report.max_rel_error);
        for f in c.report.failures.iter().take(5) {
            println!(
                "      input {} element {}: analytic {:.6e} numeric {:.6e}",
                f.input, f.element, f.analytic, f.numeric
            );
        }
    }
    println!(
        "{} elements checked, max relative error {:.3e}",
        report.checked(),
        report.max_rel_error()
    );
    ensure!(report.passed(), "gradient check failed");
    Ok(())
}
