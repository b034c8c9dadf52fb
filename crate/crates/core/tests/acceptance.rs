//! Acceptance checks. Runs as a plain binary (`harness = false`) so every
//! criterion prints a PASS/FAIL line even when all of them pass.

use std::path::Path;
use std::time::Instant;

use clap::Parser;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use saits::cli::{run, Cli};
use saits::data::{sample_observed, synth_generate, ImputationDataset, SplitName, SynthKind, SynthSpec};
use saits::evaluate::{baseline_last, baseline_median, evaluate_method, metrics, model_imputation, ImputedSplits};
use saits::gradcheck::{corrupted_case, layer_cases, model_cases, op_cases, run_cases};
use saits::nn::Ctx;
use saits::tensor::{GradCheckOptions, Tape, Tensor};
use saits::training::{apply_mit_mask, train, Checkpoint, TrainOutcome};
use saits::{SaitsConfig, SaitsModel, TrainConfig, Variant};

const SEEDS: [u64; 3] = [1, 2, 3];
const EPOCHS: usize = 200;

struct Verdict {
    passed: bool,
    detail: String,
}

fn verdict(passed: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        passed,
        detail: detail.into(),
    }
}

type Check = anyhow::Result<Verdict>;

fn dataset() -> anyhow::Result<ImputationDataset> {
    Ok(synth_generate(&SynthSpec::new(SynthKind::SineMixture, 512, 24, 8, 0.1, 7))?)
}

fn tiny(ds: &ImputationDataset, variant: Variant) -> SaitsConfig {
    SaitsConfig::tiny(ds.n_steps(), ds.n_features()).with_variant(variant)
}

fn protocol(seed: u64) -> TrainConfig {
    TrainConfig {
        max_epochs: EPOCHS,
        seed,
        ..TrainConfig::default()
    }
}

fn random_batch(rng: &mut ChaCha8Rng, b: usize, t: usize, d: usize) -> (Tensor, Tensor) {
    let mask = Tensor::from_fn(vec![b, t, d], |_| if rng.gen_bool(0.7) { 1.0 } else { 0.0 });
    let scale = 10f64.powi(rng.gen_range(-3..4));
    let x = Tensor::from_fn(vec![b, t, d], |_| rng.gen_range(-1.0..1.0) * scale);
    let x = x.zip_map(&mask, |v, m| v * m).expect("same shape");
    (x, mask)
}

fn parameter_count() -> Check {
    let model = SaitsModel::new(SaitsConfig::saits_base(48, 37), 0)?;
    let n = model.num_parameters();
    let rel = (n as f64 - 1.38e6).abs() / 1.38e6;
    Ok(verdict(rel < 0.01, format!("{n} parameters, {:.3}% from 1.38M", rel * 100.0)))
}

fn gradient_suite() -> Check {
    let start = Instant::now();
    let mut cases = op_cases(11);
    cases.extend(layer_cases(11));
    cases.extend(model_cases(&SaitsConfig::tiny(4, 3), &[Variant::Saits], 11)?);
    cases.extend(model_cases(&SaitsConfig::gradcheck(4, 3), &Variant::ALL, 11)?);
    let report = run_cases(&cases, GradCheckOptions::default())?;
    let control = corrupted_case().run(GradCheckOptions::default())?;
    let secs = start.elapsed().as_secs_f64();
    Ok(verdict(
        report.passed() && !control.report.passed() && secs < 60.0,
        format!(
            "{} cases, {} elements, max rel error {:.2e}, negative control {}, {secs:.1} s",
            report.cases.len(),
            report.checked(),
            report.max_rel_error(),
            if control.report.passed() { "missed" } else { "caught" },
        ),
    ))
}

fn diagonal_mask() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (t, d) = (12, 5);
    let config = SaitsConfig {
        n_layers: 2,
        ..SaitsConfig::tiny(t, d)
    };
    let mut worst_diag = 0.0f64;
    let mut worst_row = 0.0f64;
    let mut layers = 0;
    for i in 0..100 {
        let model = SaitsModel::new(config.clone(), i)?;
        let (x, m) = random_batch(&mut rng, 2, t, d);
        let tape = Tape::new();
        let cx = Ctx::eval(&tape, model.params().bind_frozen(&tape));
        let out = model.forward(&cx, &x, &m)?;
        layers = out.layer_weights.len();
        for w in &out.layer_weights {
            let w = w.value();
            for row in w.data().chunks(t).enumerate() {
                let (r, vals) = row;
                worst_diag = worst_diag.max(vals[r % t]);
                worst_row = worst_row.max((vals.iter().sum::<f64>() - 1.0).abs());
            }
        }
    }
    Ok(verdict(
        worst_diag < 1e-8 && worst_row < 1e-9 && layers == 4,
        format!("{layers} DMSA layers per input, max diagonal weight {worst_diag:.1e}, max |row sum - 1| {worst_row:.1e}"),
    ))
}

fn replacement() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (t, d) = (10, 4);
    let models = Variant::ALL
        .iter()
        .map(|&v| SaitsModel::new(SaitsConfig::tiny(t, d).with_variant(v), 5))
        .collect::<saits::Result<Vec<_>>>()?;
    let mut mismatches = 0usize;
    let mut checked = 0usize;
    for _ in 0..100 {
        let (x, m) = random_batch(&mut rng, 3, t, d);
        for model in &models {
            let (imputed, _) = model.impute(&x, &m, 3)?;
            for ((a, b), k) in imputed.data().iter().zip(x.data()).zip(m.data()) {
                if *k == 1.0 {
                    checked += 1;
                    mismatches += usize::from(a.to_bits() != b.to_bits());
                }
            }
        }
    }
    Ok(verdict(
        mismatches == 0,
        format!("{checked} observed positions over 100 batches x 10 variants, {mismatches} differ"),
    ))
}

fn final_scores(outcome: &TrainOutcome) -> (f64, f64) {
    let last = outcome.curve.last().expect("at least one epoch");
    (last.val_imputation_mae, last.val_reconstruction_mae)
}

fn ort_signature(ds: &ImputationDataset) -> Check {
    let start = Instant::now();
    let full = TrainConfig {
        patience: EPOCHS,
        ..protocol(SEEDS[0])
    };
    let joint = train(&tiny(ds, Variant::Transformer), &full, ds)?;
    let ort = train(&tiny(ds, Variant::TransformerOrtOnly), &full, ds)?;
    let (j_imp, j_rec) = final_scores(&joint);
    let (o_imp, o_rec) = final_scores(&ort);
    let ratio = o_imp / j_imp;
    Ok(verdict(
        ratio >= 1.2 && o_rec <= j_rec,
        format!(
            "after {} epochs: imputation MAE ORT-only {o_imp:.4} vs joint {j_imp:.4} (x{ratio:.2}); \
             reconstruction MAE ORT-only {o_rec:.4} vs joint {j_rec:.4}; {:.0} s",
            ort.epochs_run,
            start.elapsed().as_secs_f64()
        ),
    ))
}

fn holdout_mae(imputed: &ImputedSplits, ds: &ImputationDataset, split: SplitName) -> anyhow::Result<f64> {
    Ok(evaluate_method(imputed.get(split), ds.split(split), &ds.standardizer, "", split)?.mae)
}

struct SeedRuns {
    saits: Vec<TrainOutcome>,
    no_diag: Vec<TrainOutcome>,
    ort_only: Vec<TrainOutcome>,
}

fn seed_runs(ds: &ImputationDataset) -> anyhow::Result<SeedRuns> {
    let runs = |v| {
        SEEDS
            .iter()
            .map(|&s| train(&tiny(ds, v), &protocol(s), ds))
            .collect::<saits::Result<Vec<_>>>()
    };
    Ok(SeedRuns {
        saits: runs(Variant::Saits)?,
        no_diag: runs(Variant::SaitsNoDiag)?,
        ort_only: runs(Variant::TransformerOrtOnly)?,
    })
}

fn baseline_dominance(ds: &ImputationDataset, runs: &SeedRuns) -> Check {
    let median = holdout_mae(&baseline_median(ds)?, ds, SplitName::Val)?;
    let last = holdout_mae(&baseline_last(ds)?, ds, SplitName::Val)?;
    let mut wins = 0;
    let mut per_seed = Vec::new();
    for (seed, (s, o)) in SEEDS.iter().zip(runs.saits.iter().zip(&runs.ort_only)) {
        let saits = holdout_mae(&model_imputation(&s.model()?, ds, 128)?, ds, SplitName::Val)?;
        let ort = holdout_mae(&model_imputation(&o.model()?, ds, 128)?, ds, SplitName::Val)?;
        let win = saits < median && saits < last && saits < ort;
        wins += usize::from(win);
        per_seed.push(format!("seed {seed}: SAITS {saits:.4} ORT-only {ort:.4}"));
    }
    Ok(verdict(
        wins * 2 > SEEDS.len(),
        format!(
            "median {median:.4}, last {last:.4}; {}; SAITS below all three in {wins}/{} seeds",
            per_seed.join(", "),
            SEEDS.len()
        ),
    ))
}

fn ablation_direction(ds: &ImputationDataset, runs: &SeedRuns) -> Check {
    let mean_test = |outcomes: &[TrainOutcome]| -> anyhow::Result<f64> {
        let mut total = 0.0;
        for o in outcomes {
            total += holdout_mae(&model_imputation(&o.model()?, ds, 128)?, ds, SplitName::Test)?;
        }
        Ok(total / outcomes.len() as f64)
    };
    let with = mean_test(&runs.saits)?;
    let without = mean_test(&runs.no_diag)?;
    Ok(verdict(
        with <= without,
        format!("mean test hold-out MAE: saits {with:.4}, saits_no_diag {without:.4}"),
    ))
}

fn metric_oracles() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst = 0.0f64;
    let mut ordered = true;
    for _ in 0..1000 {
        let n = rng.gen_range(1..60);
        let est: Vec<f64> = (0..n).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let tgt: Vec<f64> = (0..n).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let mut msk: Vec<f64> = (0..n).map(|_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 }).collect();
        msk[rng.gen_range(0..n)] = 1.0;
        let (mut abs, mut sq, mut scale, mut count) = (0.0, 0.0, 0.0, 0.0);
        for i in 0..n {
            if msk[i] == 1.0 {
                let e = est[i] - tgt[i];
                abs += e.abs();
                sq += e * e;
                scale += tgt[i].abs();
                count += 1.0;
            }
        }
        let (mae, mse) = (abs / count, sq / count);
        let (rmse, mre) = (mse.sqrt(), abs / scale);
        let got = metrics(
            &Tensor::new([n], est)?,
            &Tensor::new([n], tgt)?,
            &Tensor::new([n], msk)?,
        )?;
        let got_mre = got.mre.unwrap_or(f64::NAN);
        for (a, b) in [(got.mae, mae), (got.rmse, rmse), (got.mse, mse), (got_mre, mre)] {
            worst = worst.max((a - b).abs());
        }
        ordered &= got.rmse >= got.mae;
    }
    Ok(verdict(
        worst < 1e-12 && ordered,
        format!("1000 instances, max abs difference {worst:.1e}, RMSE >= MAE {}", if ordered { "always" } else { "violated" }),
    ))
}

fn masking_algebra() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut failures = 0usize;
    for _ in 0..10_000 {
        let n = rng.gen_range(1..40);
        let density = rng.gen_range(0.05..1.0);
        let mut m: Vec<f64> = (0..n).map(|_| if rng.gen_bool(density) { 1.0 } else { 0.0 }).collect();
        m[rng.gen_range(0..n)] = 1.0;
        let rate = rng.gen_range(0.001..0.999);
        let observed = m.iter().sum::<f64>();
        let x = Tensor::from_fn(vec![n], |_| rng.gen_range(-1.0..1.0));
        let m = Tensor::new([n], m)?;
        let b = apply_mit_mask(&x, &m, rate, &mut rng)?;
        let size = b.indicating.sum();
        let expected = (rate * observed).round().max(1.0);
        let ok = b
            .indicating
            .data()
            .iter()
            .zip(b.m_hat.data())
            .zip(m.data())
            .all(|((i, h), k)| i + h == *k && i * h == 0.0 && (*i == 0.0 || *k == 1.0))
            && size == expected;
        failures += usize::from(!ok);
        // The sampler alone, through the same rule.
        let picked = sample_observed(&m, rate, &mut rng)?;
        failures += usize::from(picked.len() as f64 != expected || picked.iter().any(|&p| m.data()[p] != 1.0));
    }
    Ok(verdict(failures == 0, format!("10000 draws, {failures} violations")))
}

fn cli(dir: &Path, args: &[&str]) -> anyhow::Result<()> {
    let out = dir.to_str().expect("utf-8 temp path");
    let mut argv = vec!["saits", "--out", out];
    argv.extend_from_slice(args);
    run(Cli::try_parse_from(argv)?)
}

fn determinism() -> Check {
    let root = tempfile::tempdir()?;
    let data = root.path().join("data");
    cli(&data, &["generate", "--kind", "sine-mixture", "-n", "96", "--T", "12", "--D", "4", "--seed", "5"])?;
    let ds_path = data.join("dataset.bin");
    let ds_arg = ds_path.to_str().expect("utf-8 temp path");
    let train_args = ["--dataset", ds_arg, "--preset", "tiny", "--epochs", "6", "--seed", "3", "train"];
    let (a, b) = (root.path().join("a"), root.path().join("b"));
    cli(&a, &train_args)?;
    cli(&b, &train_args)?;
    let same = |name: &str| -> anyhow::Result<bool> { Ok(std::fs::read(a.join(name))? == std::fs::read(b.join(name))?) };
    let curves = same("curves.csv")?;
    let checkpoints = same("checkpoint.bin")?;

    let ds = ImputationDataset::load(&ds_path)?;
    let outcome = train(
        &tiny(&ds, Variant::Saits),
        &TrainConfig {
            max_epochs: 3,
            seed: 4,
            ..TrainConfig::default()
        },
        &ds,
    )?;
    let before = outcome.model()?.impute(&ds.test.x, &ds.test.mask, 32)?;
    let path = root.path().join("roundtrip.bin");
    outcome.best.save(&path)?;
    let after = Checkpoint::load(&path)?.model()?.impute(&ds.test.x, &ds.test.mask, 32)?;
    let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    let reload = bits(&before.0) == bits(&after.0) && bits(&before.1) == bits(&after.1);
    Ok(verdict(
        curves && checkpoints && reload,
        format!("curves.csv identical: {curves}, checkpoint.bin identical: {checkpoints}, reload forward identical: {reload}"),
    ))
}

fn report(results: &mut Vec<bool>, id: usize, name: &str, check: Check) {
    let v = check.unwrap_or_else(|e| verdict(false, format!("error: {e:#}")));
    println!("[{}] {id:>2}. {name}: {}", if v.passed { "PASS" } else { "FAIL" }, v.detail);
    results.push(v.passed);
}

fn main() {
    let start = Instant::now();
    let mut results = Vec::new();
    report(&mut results, 1, "parameter count", parameter_count());
    report(&mut results, 2, "gradient suite", gradient_suite());
    report(&mut results, 3, "diagonal mask", diagonal_mask());
    report(&mut results, 4, "replacement", replacement());
    let trained = dataset().and_then(|ds| {
        let runs = seed_runs(&ds)?;
        Ok((ds, runs))
    });
    match &trained {
        Ok((ds, runs)) => {
            report(&mut results, 5, "ORT-only signature", ort_signature(ds));
            report(&mut results, 6, "baseline dominance", baseline_dominance(ds, runs));
            report(&mut results, 7, "diagonal-mask ablation", ablation_direction(ds, runs));
        }
        Err(e) => {
            for (id, name) in [(5, "ORT-only signature"), (6, "baseline dominance"), (7, "diagonal-mask ablation")] {
                report(&mut results, id, name, Err(anyhow::anyhow!("{e:#}")));
            }
        }
    }
    report(&mut results, 8, "metric oracles", metric_oracles());
    report(&mut results, 9, "masking algebra", masking_algebra());
    report(&mut results, 10, "determinism", determinism());
    let passed = results.iter().filter(|&&p| p).count();
    println!(
        "acceptance: {passed}/{} criteria passed in {:.0} s",
        results.len(),
        start.elapsed().as_secs_f64()
    );
    if passed != results.len() {
        std::process::exit(1);
    }
}
