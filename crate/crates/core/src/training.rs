//! Joint-optimization training: per-batch artificial masking, Adam,
//! validation, early stopping, curve logging and checkpoints.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;
use saits_tensor::{Tape, Tensor};

use crate::config::{Objective, SaitsConfig, TrainConfig};
use crate::container::{self, CHECKPOINT_MAGIC};
use crate::data::{sample_observed, ImputationDataset, Split};
use crate::error::{Result, SaitsError};
use crate::model::{joint_loss, SaitsModel};
use crate::nn::{Ctx, ParamStore};

/// Values and masks of one batch.
///
/// `x`/`m` are the batch as stored; `x_hat`/`m_hat` are what the model sees
/// after artificial masking; `indicating` marks exactly the artificially
/// masked positions.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleBatch {
    pub x: Tensor,
    pub m: Tensor,
    pub x_hat: Tensor,
    pub m_hat: Tensor,
    pub indicating: Tensor,
}

/// Hide `round(rate · #observed)` observed entries, chosen uniformly.
pub fn apply_mit_mask(x: &Tensor, m: &Tensor, rate: f64, rng: &mut ChaCha8Rng) -> Result<SampleBatch> {
    if !(rate > 0.0 && rate < 1.0) {
        return Err(SaitsError::Config(format!("mit rate must lie in (0, 1), got {rate}")));
    }
    let picked = sample_observed(m, rate, rng)?;
    let mut m_hat = m.clone();
    let mut indicating = Tensor::zeros(m.shape().to_vec());
    for i in picked {
        m_hat.data_mut()[i] = 0.0;
        indicating.data_mut()[i] = 1.0;
    }
    let x_hat = x.zip_map(&m_hat, |v, k| if k == 1.0 { v } else { 0.0 })?;
    Ok(SampleBatch {
        x: x.clone(),
        m: m.clone(),
        x_hat,
        m_hat,
        indicating,
    })
}

/// The batch as-is, with nothing artificially hidden.
pub fn unmasked_batch(x: &Tensor, m: &Tensor) -> Result<SampleBatch> {
    Ok(SampleBatch {
        x: x.clone(),
        m: m.clone(),
        x_hat: x.zip_map(m, |v, k| if k == 1.0 { v } else { 0.0 })?,
        m_hat: m.clone(),
        indicating: Tensor::zeros(m.shape().to_vec()),
    })
}

/// Adam with bias correction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    #[serde(skip)]
    pub m: Vec<Tensor>,
    #[serde(skip)]
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(lr: f64, params: &ParamStore) -> Self {
        let zeros = || params.iter().map(|(_, t)| Tensor::zeros(t.shape().to_vec())).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One update. Gradients are checked for finiteness before anything
    /// changes.
    pub fn update(&mut self, params: &mut ParamStore, grads: &[Tensor]) -> Result<()> {
        assert_eq!(grads.len(), params.len(), "one gradient per parameter");
        if let Some((name, _)) = params.iter().zip(grads).find(|(_, g)| !g.all_finite()).map(|(p, _)| p) {
            return Err(SaitsError::NonFiniteGradient(name.to_string()));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        for (((p, g), m), v) in params.values_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((w, &g), m), v) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *w -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_imputation_mae: f64,
    pub val_reconstruction_mae: f64,
}

/// Per-epoch training curve.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CurveLog {
    pub rows: Vec<CurveRow>,
}

impl CurveLog {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn last(&self) -> Option<&CurveRow> {
        self.rows.last()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for row in &self.rows {
            w.serialize(row)?;
        }
        w.flush().map_err(|e| SaitsError::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let rows = r.deserialize().collect::<std::result::Result<_, _>>()?;
        Ok(Self { rows })
    }
}

/// Validation metrics of one epoch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ValidationScores {
    /// MAE of `X̂_c` against the hold-out.
    pub imputation_mae: f64,
    /// MAE of the final representation against observed inputs.
    pub reconstruction_mae: f64,
}

pub fn validate(model: &SaitsModel, split: &Split, batch: usize) -> Result<ValidationScores> {
    let holdout = split.holdout("val")?;
    let (imputed, combined) = model.impute(&split.x, &split.mask, batch)?;
    let masked_abs = |est: &Tensor, target: &Tensor, mask: &Tensor| -> Result<f64> {
        let mut num = 0.0;
        let mut den = 0.0;
        for ((e, t), m) in est.data().iter().zip(target.data()).zip(mask.data()) {
            num += (e - t).abs() * m;
            den += m;
        }
        if den == 0.0 {
            return Err(saits_tensor::TensorError::EmptyMask.into());
        }
        Ok(num / den)
    };
    Ok(ValidationScores {
        imputation_mae: masked_abs(&imputed, &holdout.values, &holdout.mask)?,
        reconstruction_mae: masked_abs(&combined, &split.x, &split.mask)?,
    })
}

/// Model, optimizer and loop state; the unit saved to disk.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: SaitsConfig,
    pub train: TrainConfig,
    pub params: ParamStore,
    pub adam: Adam,
    pub rng: ChaCha8Rng,
    pub epoch: usize,
    pub best_val_mae: f64,
    pub best_epoch: usize,
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    kind: String,
    config: SaitsConfig,
    train: TrainConfig,
    adam: Adam,
    rng: ChaCha8Rng,
    epoch: usize,
    best_val_mae: f64,
    best_epoch: usize,
}

impl Checkpoint {
    pub fn model(&self) -> Result<SaitsModel> {
        SaitsModel::from_params(self.config.clone(), self.params.clone())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = CheckpointMeta {
            kind: "checkpoint".into(),
            config: self.config.clone(),
            train: self.train.clone(),
            adam: self.adam.clone(),
            rng: self.rng.clone(),
            epoch: self.epoch,
            best_val_mae: self.best_val_mae,
            best_epoch: self.best_epoch,
        };
        let mut names = Vec::new();
        for (name, _) in self.params.iter() {
            names.push(format!("param.{name}"));
        }
        for (name, _) in self.params.iter() {
            names.push(format!("adam.m.{name}"));
        }
        for (name, _) in self.params.iter() {
            names.push(format!("adam.v.{name}"));
        }
        let tensors: Vec<&Tensor> = self
            .params
            .iter()
            .map(|(_, t)| t)
            .chain(&self.adam.m)
            .chain(&self.adam.v)
            .collect();
        let refs: Vec<(&str, &Tensor)> = names.iter().map(String::as_str).zip(tensors).collect();
        container::write(path, CHECKPOINT_MAGIC, serde_json::to_value(meta)?, &refs)
    }

    /// Load and check every tensor against the architecture the stored
    /// configuration describes.
    pub fn load(path: &Path) -> Result<Self> {
        let c = container::read(path, CHECKPOINT_MAGIC)?;
        let meta: CheckpointMeta = serde_json::from_value(c.meta)
            .map_err(|e| SaitsError::Container(format!("bad checkpoint header: {e}")))?;
        let mut params = ParamStore::new();
        let mut m = Vec::new();
        let mut v = Vec::new();
        for (name, t) in c.tensors {
            if let Some(p) = name.strip_prefix("param.") {
                params.register(p, t);
            } else if name.starts_with("adam.m.") {
                m.push(t);
            } else if name.starts_with("adam.v.") {
                v.push(t);
            } else {
                return Err(SaitsError::Manifest(format!("unexpected tensor `{name}`")));
            }
        }
        // Rebuilding the model validates names and shapes.
        let model = SaitsModel::from_params(meta.config.clone(), params)?;
        let shapes_match = |moments: &[Tensor]| {
            moments.len() == model.params().len()
                && moments
                    .iter()
                    .zip(model.params().iter())
                    .all(|(a, (_, b))| a.shape() == b.shape())
        };
        if !shapes_match(&m) || !shapes_match(&v) {
            return Err(SaitsError::Manifest("optimizer moments do not mirror parameters".into()));
        }
        let mut adam = meta.adam;
        adam.m = m;
        adam.v = v;
        Ok(Self {
            config: meta.config,
            train: meta.train,
            params: model.params().clone(),
            adam,
            rng: meta.rng,
            epoch: meta.epoch,
            best_val_mae: meta.best_val_mae,
            best_epoch: meta.best_epoch,
        })
    }
}

/// Result of a completed training run.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// State at the best validation epoch.
    pub best: Checkpoint,
    pub curve: CurveLog,
    pub epochs_run: usize,
    pub stopped_early: bool,
}

impl TrainOutcome {
    pub fn model(&self) -> Result<SaitsModel> {
        self.best.model()
    }
}

/// Gradients of one batch's loss, in parameter order. Returns the loss.
pub fn batch_gradients(
    model: &SaitsModel,
    batch: &SampleBatch,
    dropout_seed: Option<u64>,
) -> Result<(f64, Vec<Tensor>)> {
    let cfg = model.config();
    let tape = Tape::new();
    let params = model.params().bind(&tape);
    let cx = match dropout_seed {
        Some(seed) => Ctx::train(&tape, params.clone(), ChaCha8Rng::seed_from_u64(seed)),
        None => Ctx::eval(&tape, params.clone()),
    };
    let out = model.forward(&cx, &batch.x_hat, &batch.m_hat)?;
    let objective = cfg.variant.objective();
    let loss = joint_loss(&out, &batch.x, &batch.m_hat, &batch.indicating, cfg.mit_weight, objective)?;
    let value = loss.total.value().item();
    if !value.is_finite() {
        return Ok((value, Vec::new()));
    }
    tape.backward(loss.total)?;
    let grads = params
        .iter()
        .map(|p| p.grad().unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();
    Ok((value, grads))
}

fn clip_gradients(grads: &mut [Tensor], max_norm: f64) {
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
}

pub fn train(config: &SaitsConfig, train_cfg: &TrainConfig, dataset: &ImputationDataset) -> Result<TrainOutcome> {
    train_with_progress(config, train_cfg, dataset, |_| {})
}

/// Train with a callback invoked after every epoch's validation.
pub fn train_with_progress(
    config: &SaitsConfig,
    train_cfg: &TrainConfig,
    dataset: &ImputationDataset,
    mut on_epoch: impl FnMut(&CurveRow),
) -> Result<TrainOutcome> {
    config.validate()?;
    train_cfg.validate()?;
    if (dataset.n_steps(), dataset.n_features()) != (config.n_steps, config.n_features) {
        return Err(SaitsError::InputShape {
            got: dataset.train.x.shape().to_vec(),
            steps: config.n_steps,
            features: config.n_features,
        });
    }
    dataset.val.holdout("val")?;

    let mut model = SaitsModel::new(config.clone(), train_cfg.seed)?;
    let mut adam = Adam::new(train_cfg.lr, model.params());
    let mut rng = ChaCha8Rng::seed_from_u64(train_cfg.seed);
    rng.set_stream(1);
    let objective = config.variant.objective();
    let train = &dataset.train;
    let n = train.len();

    let snapshot = |model: &SaitsModel, adam: &Adam, rng: &ChaCha8Rng, epoch: usize, best: f64, best_epoch: usize| Checkpoint {
        config: config.clone(),
        train: train_cfg.clone(),
        params: model.params().clone(),
        adam: adam.clone(),
        rng: rng.clone(),
        epoch,
        best_val_mae: best,
        best_epoch,
    };

    let mut curve = CurveLog::default();
    let mut best: Option<Checkpoint> = None;
    let mut best_mae = f64::INFINITY;
    let mut streak = 0usize;
    let mut stopped_early = false;
    let mut order: Vec<usize> = (0..n).collect();

    for epoch in 1..=train_cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(train_cfg.batch_size) {
            let x = train.x.select0(chunk)?;
            let m = train.mask.select0(chunk)?;
            let batch = match objective {
                Objective::OrtOnly => unmasked_batch(&x, &m)?,
                _ => apply_mit_mask(&x, &m, config.mit_rate, &mut rng)?,
            };
            let dropout_seed = rng.gen::<u64>();
            let (loss, mut grads) = batch_gradients(&model, &batch, Some(dropout_seed))?;
            if !loss.is_finite() {
                return Err(SaitsError::Diverged {
                    epoch,
                    loss,
                    last_good: best.map(Box::new),
                });
            }
            if let Some(c) = train_cfg.grad_clip {
                clip_gradients(&mut grads, c);
            }
            adam.update(model.params_mut(), &grads)?;
            loss_sum += loss;
            batches += 1;
        }

        let scores = validate(&model, &dataset.val, train_cfg.batch_size.max(256))?;
        let row = CurveRow {
            epoch,
            train_loss: loss_sum / batches as f64,
            val_imputation_mae: scores.imputation_mae,
            val_reconstruction_mae: scores.reconstruction_mae,
        };
        on_epoch(&row);
        curve.rows.push(row);

        if scores.imputation_mae < best_mae {
            best_mae = scores.imputation_mae;
            streak = 0;
            best = Some(snapshot(&model, &adam, &rng, epoch, best_mae, epoch));
        } else {
            streak += 1;
        }
        if streak >= train_cfg.patience {
            stopped_early = epoch < train_cfg.max_epochs;
            break;
        }
    }

    let epochs_run = curve.len();
    let best = match best {
        Some(b) => b,
        // Every epoch was non-finite on validation; keep the final state.
        None => snapshot(&model, &adam, &rng, epochs_run, best_mae, epochs_run),
    };
    Ok(TrainOutcome {
        best,
        curve,
        epochs_run,
        stopped_early,
    })
}

/// Configuration echo written next to run artifacts.
pub fn run_echo(config: &SaitsConfig, train_cfg: &TrainConfig) -> serde_json::Value {
    json!({ "model": config, "train": train_cfg })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Variant;
    use crate::data::{synth_generate, SynthKind, SynthSpec};

    #[test]
    fn mit_mask_partition() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::from_fn([10, 10, 10], |i| i as f64);
        let m = Tensor::ones([10, 10, 10]);
        let b = apply_mit_mask(&x, &m, 0.2, &mut rng).unwrap();
        assert_eq!(b.indicating.sum(), 200.0);
        for i in 0..1000 {
            assert_eq!(b.m_hat.data()[i] + b.indicating.data()[i], m.data()[i]);
            assert_eq!(b.m_hat.data()[i] * b.indicating.data()[i], 0.0);
            assert_eq!(b.x_hat.data()[i] * (1.0 - b.m_hat.data()[i]), 0.0);
        }
        assert!(apply_mit_mask(&x, &Tensor::zeros([10, 10, 10]), 0.2, &mut rng).is_err());
        assert!(apply_mit_mask(&x, &m, 0.0, &mut rng).is_err());
    }

    #[test]
    fn adam_first_step() {
        let mut store = ParamStore::new();
        store.register("w", Tensor::scalar(0.0));
        let mut adam = Adam::new(1e-3, &store);
        adam.update(&mut store, &[Tensor::scalar(1.0)]).unwrap();
        assert!((store.by_name("w").unwrap().item() + 1e-3).abs() < 1e-9);
        let before = store.clone();
        adam.update(&mut store, &[Tensor::scalar(0.0)]).unwrap();
        // Momentum keeps moving the parameter after one non-zero step.
        assert_ne!(before, store);
    }

    #[test]
    fn adam_zero_gradient_from_start_is_a_no_op() {
        let mut store = ParamStore::new();
        store.register("w", Tensor::from_fn([3], |i| i as f64));
        let before = store.clone();
        let mut adam = Adam::new(1e-3, &store);
        for _ in 0..5 {
            adam.update(&mut store, &[Tensor::zeros([3])]).unwrap();
        }
        assert_eq!(store, before);
    }

    #[test]
    fn adam_rejects_nan_naming_parameter() {
        let mut store = ParamStore::new();
        store.register("a", Tensor::scalar(0.0));
        store.register("b.weight", Tensor::scalar(0.0));
        let mut adam = Adam::new(1e-3, &store);
        let err = adam
            .update(&mut store, &[Tensor::scalar(0.0), Tensor::scalar(f64::NAN)])
            .unwrap_err();
        assert!(matches!(err, SaitsError::NonFiniteGradient(ref n) if n == "b.weight"));
        assert_eq!(store.by_name("a").unwrap().item(), 0.0);
    }

    fn tiny_setup() -> (SaitsConfig, TrainConfig, ImputationDataset) {
        let ds = synth_generate(&SynthSpec::new(SynthKind::SineMixture, 40, 6, 2, 0.1, 3)).unwrap();
        let cfg = SaitsConfig {
            d_model: 8,
            d_ffn: 8,
            d_k: 4,
            d_v: 4,
            ..SaitsConfig::tiny(6, 2)
        };
        let tc = TrainConfig {
            batch_size: 8,
            max_epochs: 3,
            patience: 5,
            seed: 2,
            ..TrainConfig::default()
        };
        (cfg, tc, ds)
    }

    #[test]
    fn patience_zero_runs_one_epoch() {
        let (cfg, tc, ds) = tiny_setup();
        let out = train(&cfg, &TrainConfig { patience: 0, ..tc }, &ds).unwrap();
        assert_eq!(out.epochs_run, 1);
        assert_eq!(out.curve.len(), 1);
    }

    #[test]
    fn curve_has_one_row_per_epoch_and_is_reproducible() {
        let (cfg, tc, ds) = tiny_setup();
        let a = train(&cfg, &tc, &ds).unwrap();
        let b = train(&cfg, &tc, &ds).unwrap();
        assert_eq!(a.curve.len(), a.epochs_run);
        assert_eq!(a.curve, b.curve);
        assert_eq!(a.best, b.best);
    }

    #[test]
    fn checkpoint_roundtrip_and_manifest_check() {
        let (cfg, tc, ds) = tiny_setup();
        let out = train(&cfg, &TrainConfig { max_epochs: 1, ..tc }, &ds).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.bin");
        out.best.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, out.best);

        let bad = Checkpoint {
            config: cfg.clone().with_variant(Variant::SaitsR2),
            ..out.best.clone()
        };
        bad.save(&path).unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(SaitsError::Manifest(_))));
    }

    #[test]
    fn curve_csv_roundtrip() {
        let log = CurveLog {
            rows: vec![CurveRow {
                epoch: 1,
                train_loss: 0.5,
                val_imputation_mae: 0.25,
                val_reconstruction_mae: 0.125,
            }],
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("curves.csv");
        log.write_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("epoch,train_loss,val_imputation_mae,val_reconstruction_mae\n"));
        assert_eq!(CurveLog::read_csv(&path).unwrap(), log);
    }
}
