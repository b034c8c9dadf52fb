//! Dataset ingestion, windowing, splitting, evaluation hole punching,
//! standardization and synthetic generators.
//!
//! Tensors handed to the model are `[n, T, D]` with a matching `{0, 1}`
//! mask; values at unobserved positions are stored as 0 after
//! standardization.

use std::io::Read;
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use serde_json::json;
use saits_tensor::Tensor;

use crate::container::{self, DATASET_MAGIC};
use crate::error::{Result, SaitsError};

/// Time-ordered records with explicit absence.
#[derive(Clone, Debug, PartialEq)]
pub struct RawSeries {
    pub features: Vec<String>,
    pub rows: Vec<Vec<Option<f64>>>,
    /// Sample identifier per row for pre-segmented data.
    pub sample_ids: Option<Vec<String>>,
}

impl RawSeries {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Consecutive runs of rows sharing a sample identifier, or the whole
    /// series when there is no identifier column.
    fn segments(&self) -> Vec<std::ops::Range<usize>> {
        let Some(ids) = &self.sample_ids else {
            return vec![0..self.rows.len()];
        };
        let mut out = Vec::new();
        let mut start = 0;
        for i in 1..=ids.len() {
            if i == ids.len() || ids[i] != ids[start] {
                out.push(start..i);
                start = i;
            }
        }
        out
    }
}

/// How to read a CSV file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CsvSchema {
    /// Cell contents treated as missing besides the empty string.
    pub na_tokens: Vec<String>,
    /// Column holding a sample identifier; excluded from the features.
    pub sample_id_column: Option<String>,
    pub delimiter: u8,
}

impl Default for CsvSchema {
    fn default() -> Self {
        Self {
            na_tokens: vec!["NA".into(), "NaN".into()],
            sample_id_column: None,
            delimiter: b',',
        }
    }
}

pub fn ingest_csv(path: &Path, schema: &CsvSchema) -> Result<RawSeries> {
    let file = std::fs::File::open(path).map_err(|e| SaitsError::io(path, e))?;
    parse_csv(file, schema)
}

pub fn parse_csv<R: Read>(reader: R, schema: &CsvSchema) -> Result<RawSeries> {
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(schema.delimiter)
        .flexible(true)
        .from_reader(reader);
    let header = rdr.headers()?.clone();
    if header.is_empty() || header.iter().all(|h| h.trim().is_empty()) {
        return Err(SaitsError::Parse {
            line: 1,
            message: "missing header row".into(),
        });
    }
    let id_col = match &schema.sample_id_column {
        Some(name) => Some(header.iter().position(|h| h.trim() == name).ok_or_else(|| {
            SaitsError::Parse {
                line: 1,
                message: format!("sample-id column `{name}` not in header"),
            }
        })?),
        None => None,
    };
    let features: Vec<String> = header
        .iter()
        .enumerate()
        .filter(|(i, _)| Some(*i) != id_col)
        .map(|(_, h)| h.trim().to_string())
        .collect();
    if features.is_empty() {
        return Err(SaitsError::Parse {
            line: 1,
            message: "no feature columns".into(),
        });
    }

    let mut rows = Vec::new();
    let mut ids = id_col.map(|_| Vec::new());
    for record in rdr.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        if record.len() != header.len() {
            return Err(SaitsError::Parse {
                line,
                message: format!("expected {} fields, found {}", header.len(), record.len()),
            });
        }
        let mut row = Vec::with_capacity(features.len());
        for (i, cell) in record.iter().enumerate() {
            if Some(i) == id_col {
                ids.as_mut().expect("id column").push(cell.trim().to_string());
                continue;
            }
            let cell = cell.trim();
            if cell.is_empty() || schema.na_tokens.iter().any(|t| t == cell) {
                row.push(None);
                continue;
            }
            match cell.parse::<f64>() {
                Ok(v) if v.is_finite() => row.push(Some(v)),
                _ => {
                    return Err(SaitsError::Parse {
                        line,
                        message: format!("`{cell}` in column `{}` is not a finite number", &header[i]),
                    })
                }
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(SaitsError::Parse {
            line: 2,
            message: "no data rows".into(),
        });
    }
    Ok(RawSeries {
        features,
        rows,
        sample_ids: ids,
    })
}

/// Values and observation mask of a set of samples, `[n, T, D]` each.
/// Values are 0 wherever the mask is 0.
#[derive(Clone, Debug, PartialEq)]
pub struct Samples {
    pub x: Tensor,
    pub mask: Tensor,
}

impl Samples {
    pub fn len(&self) -> usize {
        self.x.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn select(&self, rows: &[usize]) -> Result<Self> {
        Ok(Self {
            x: self.x.select0(rows)?,
            mask: self.mask.select0(rows)?,
        })
    }
}

/// Cut `T`-step windows every `stride` rows. With sample identifiers each
/// sample is windowed separately.
pub fn window(raw: &RawSeries, steps: usize, stride: usize) -> Result<Samples> {
    if steps == 0 || stride == 0 {
        return Err(SaitsError::Config("window length and stride must be positive".into()));
    }
    let d = raw.features.len();
    let mut x = Vec::new();
    let mut mask = Vec::new();
    let mut n = 0;
    let mut shortest = usize::MAX;
    for seg in raw.segments() {
        shortest = shortest.min(seg.len());
        if seg.len() < steps {
            continue;
        }
        for start in (seg.start..=seg.end - steps).step_by(stride) {
            for row in &raw.rows[start..start + steps] {
                for v in row {
                    x.push(v.unwrap_or(0.0));
                    mask.push(v.is_some() as u8 as f64);
                }
            }
            n += 1;
        }
    }
    if n == 0 {
        return Err(SaitsError::SeriesTooShort { len: shortest, steps });
    }
    Ok(Samples {
        x: Tensor::new([n, steps, d], x)?,
        mask: Tensor::new([n, steps, d], mask)?,
    })
}

/// `round(rate · n)` with halves rounded away from zero, at least 1 when
/// both `rate` and `n` are positive.
pub fn mcar_count(rate: f64, n: usize) -> usize {
    if rate <= 0.0 || n == 0 {
        return 0;
    }
    ((rate * n as f64).round() as usize).clamp(1, n)
}

/// Flat indices of `mcar_count(rate, #observed)` entries drawn uniformly
/// without replacement from the positions where `mask` is 1.
pub fn sample_observed(mask: &Tensor, rate: f64, rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
    let observed: Vec<usize> = mask
        .data()
        .iter()
        .enumerate()
        .filter(|(_, &m)| m == 1.0)
        .map(|(i, _)| i)
        .collect();
    if observed.is_empty() {
        return Err(SaitsError::NoObservations);
    }
    let k = mcar_count(rate, observed.len());
    let mut picked: Vec<usize> = index::sample(rng, observed.len(), k)
        .into_iter()
        .map(|i| observed[i])
        .collect();
    picked.sort_unstable();
    Ok(picked)
}

/// Ground truth removed from a split for evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct Holdout {
    /// True values at held-out positions, 0 elsewhere.
    pub values: Tensor,
    /// 1 exactly at held-out positions.
    pub mask: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    /// Working values, 0 where `mask` is 0.
    pub x: Tensor,
    pub mask: Tensor,
    pub holdout: Option<Holdout>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.x.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn holdout(&self, name: &str) -> Result<&Holdout> {
        self.holdout
            .as_ref()
            .ok_or_else(|| SaitsError::MissingHoldout(name.to_string()))
    }

    /// The split with its held-out values put back.
    pub fn restored(&self) -> Split {
        let Some(h) = &self.holdout else {
            return self.clone();
        };
        let x = self.x.zip_map(&h.values, |a, b| a + b).expect("same shape");
        let mask = self.mask.zip_map(&h.mask, |a, b| a + b).expect("same shape");
        Split { x, mask, holdout: None }
    }
}

/// Move `fraction` of the observed entries of `samples` into a hold-out.
pub fn punch_eval_holes(samples: &Samples, fraction: f64, rng: &mut ChaCha8Rng) -> Result<Split> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(SaitsError::Config(format!(
            "hole fraction must lie in (0, 1), got {fraction}"
        )));
    }
    let picked = sample_observed(&samples.mask, fraction, rng)?;
    let mut x = samples.x.clone();
    let mut mask = samples.mask.clone();
    let mut values = Tensor::zeros(samples.x.shape().to_vec());
    let mut hmask = Tensor::zeros(samples.x.shape().to_vec());
    for i in picked {
        values.data_mut()[i] = x.data()[i];
        hmask.data_mut()[i] = 1.0;
        x.data_mut()[i] = 0.0;
        mask.data_mut()[i] = 0.0;
    }
    Ok(Split {
        x,
        mask,
        holdout: Some(Holdout { values, mask: hmask }),
    })
}

/// Per-feature mean and population standard deviation of observed
/// training values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub features: Vec<String>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(x: &Tensor, mask: &Tensor, features: &[String]) -> Result<Self> {
        let d = features.len();
        let mut count = vec![0usize; d];
        let mut sum = vec![0.0; d];
        for (i, (&v, &m)) in x.data().iter().zip(mask.data()).enumerate() {
            if m == 1.0 {
                count[i % d] += 1;
                sum[i % d] += v;
            }
        }
        if let Some(j) = (0..d).find(|&j| count[j] < 2) {
            return Err(SaitsError::UnobservedFeature(features[j].clone()));
        }
        let mean: Vec<f64> = (0..d).map(|j| sum[j] / count[j] as f64).collect();
        let mut sq = vec![0.0; d];
        for (i, (&v, &m)) in x.data().iter().zip(mask.data()).enumerate() {
            if m == 1.0 {
                let dev = v - mean[i % d];
                sq[i % d] += dev * dev;
            }
        }
        let std: Vec<f64> = (0..d).map(|j| (sq[j] / count[j] as f64).sqrt()).collect();
        let flat: Vec<String> = (0..d)
            .filter(|&j| !(std[j] > 1e-12 * mean[j].abs().max(1.0)))
            .map(|j| features[j].clone())
            .collect();
        if !flat.is_empty() {
            return Err(SaitsError::ZeroVariance(flat));
        }
        Ok(Self {
            features: features.to_vec(),
            mean,
            std,
        })
    }

    /// Standardize values at `mask == 1`, zero elsewhere.
    pub fn transform(&self, x: &Tensor, mask: &Tensor) -> Tensor {
        let d = self.mean.len();
        let mut out = x.clone();
        for (i, (v, &m)) in out.data_mut().iter_mut().zip(mask.data()).enumerate() {
            *v = if m == 1.0 {
                (*v - self.mean[i % d]) / self.std[i % d]
            } else {
                0.0
            };
        }
        out
    }

    /// Map standardized values back to original units everywhere.
    pub fn inverse(&self, x: &Tensor) -> Tensor {
        let d = self.mean.len();
        let mut out = x.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v = *v * self.std[i % d] + self.mean[i % d];
        }
        out
    }
}

/// Split proportions and hole fraction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub test_fraction: f64,
    /// Fraction of the non-test samples used for validation.
    pub val_fraction: f64,
    pub hole_fraction: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            test_fraction: 0.2,
            val_fraction: 0.2,
            hole_fraction: 0.1,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitName {
    Train,
    Val,
    Test,
}

impl SplitName {
    pub const ALL: [SplitName; 3] = [SplitName::Train, SplitName::Val, SplitName::Test];

    pub fn name(self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::Val => "val",
            SplitName::Test => "test",
        }
    }
}

impl std::str::FromStr for SplitName {
    type Err = SaitsError;

    fn from_str(s: &str) -> Result<Self> {
        SplitName::ALL
            .into_iter()
            .find(|n| n.name() == s)
            .ok_or_else(|| SaitsError::Config(format!("unknown split `{s}`")))
    }
}

/// Standardized train/val/test splits; val and test carry hold-outs.
#[derive(Clone, Debug, PartialEq)]
pub struct ImputationDataset {
    pub train: Split,
    pub val: Split,
    pub test: Split,
    pub standardizer: Standardizer,
    /// Provenance echoed into the packed file.
    pub source: serde_json::Value,
}

impl ImputationDataset {
    /// Shuffle samples into splits, punch hold-outs in val and test, then
    /// standardize everything with train statistics.
    pub fn from_samples(samples: &Samples, features: Vec<String>, spec: &SplitSpec) -> Result<Self> {
        let n = samples.len();
        let n_test = (spec.test_fraction * n as f64).round() as usize;
        let n_val = (spec.val_fraction * (n - n_test) as f64).round() as usize;
        if n_test == 0 || n_val == 0 || n_test + n_val >= n {
            return Err(SaitsError::Config(format!(
                "{n} samples cannot fill train/val/test splits"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(2);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let (test_idx, rest) = order.split_at(n_test);
        let (val_idx, train_idx) = rest.split_at(n_val);

        let train = samples.select(train_idx)?;
        let mut holes = ChaCha8Rng::seed_from_u64(spec.seed);
        holes.set_stream(3);
        let val = punch_eval_holes(&samples.select(val_idx)?, spec.hole_fraction, &mut holes)?;
        let test = punch_eval_holes(&samples.select(test_idx)?, spec.hole_fraction, &mut holes)?;

        let standardizer = Standardizer::fit(&train.x, &train.mask, &features)?;
        let scale = |s: Split| -> Split {
            let x = standardizer.transform(&s.x, &s.mask);
            let holdout = s.holdout.map(|h| Holdout {
                values: standardizer.transform(&h.values, &h.mask),
                mask: h.mask,
            });
            Split { x, mask: s.mask, holdout }
        };
        Ok(Self {
            train: scale(Split {
                x: train.x,
                mask: train.mask,
                holdout: None,
            }),
            val: scale(val),
            test: scale(test),
            standardizer,
            source: json!({ "split": spec }),
        })
    }

    pub fn split(&self, name: SplitName) -> &Split {
        match name {
            SplitName::Train => &self.train,
            SplitName::Val => &self.val,
            SplitName::Test => &self.test,
        }
    }

    pub fn split_mut(&mut self, name: SplitName) -> &mut Split {
        match name {
            SplitName::Train => &mut self.train,
            SplitName::Val => &mut self.val,
            SplitName::Test => &mut self.test,
        }
    }

    pub fn n_steps(&self) -> usize {
        self.train.x.shape()[1]
    }

    pub fn n_features(&self) -> usize {
        self.train.x.shape()[2]
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = json!({
            "kind": "dataset",
            "n_steps": self.n_steps(),
            "n_features": self.n_features(),
            "standardizer": self.standardizer,
            "source": self.source,
        });
        let mut tensors: Vec<(String, &Tensor)> = Vec::new();
        for name in SplitName::ALL {
            let s = self.split(name);
            tensors.push((format!("{}.x", name.name()), &s.x));
            tensors.push((format!("{}.mask", name.name()), &s.mask));
            if let Some(h) = &s.holdout {
                tensors.push((format!("{}.holdout_values", name.name()), &h.values));
                tensors.push((format!("{}.holdout_mask", name.name()), &h.mask));
            }
        }
        let refs: Vec<(&str, &Tensor)> = tensors.iter().map(|(n, t)| (n.as_str(), *t)).collect();
        container::write(path, DATASET_MAGIC, meta, &refs)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut c = container::read(path, DATASET_MAGIC)?;
        let standardizer: Standardizer = serde_json::from_value(c.meta["standardizer"].clone())?;
        let mut take = |name: SplitName| -> Result<Split> {
            let p = name.name();
            let x = c.take(&format!("{p}.x"))?;
            let mask = c.take(&format!("{p}.mask"))?;
            let holdout = match (
                c.take_optional(&format!("{p}.holdout_values")),
                c.take_optional(&format!("{p}.holdout_mask")),
            ) {
                (Some(values), Some(mask)) => Some(Holdout { values, mask }),
                (None, None) => None,
                _ => {
                    return Err(SaitsError::Container(format!(
                        "split `{p}` has half of a hold-out"
                    )))
                }
            };
            if x.rank() != 3 || mask.shape() != x.shape() {
                return Err(SaitsError::Container(format!("split `{p}` has inconsistent shapes")));
            }
            Ok(Split { x, mask, holdout })
        };
        let train = take(SplitName::Train)?;
        let val = take(SplitName::Val)?;
        let test = take(SplitName::Test)?;
        if val.x.shape()[1..] != train.x.shape()[1..] || test.x.shape()[1..] != train.x.shape()[1..] {
            return Err(SaitsError::Container("splits disagree on [T, D]".into()));
        }
        Ok(Self {
            train,
            val,
            test,
            standardizer,
            source: c.meta["source"].clone(),
        })
    }
}

/// Synthetic families.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthKind {
    /// Features are mixtures of two per-sample latent sinusoids.
    SineMixture,
    /// Random walks with cross-feature correlated increments.
    RandomWalk,
}

impl std::str::FromStr for SynthKind {
    type Err = SaitsError;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "sine_mixture" => Ok(SynthKind::SineMixture),
            "random_walk" => Ok(SynthKind::RandomWalk),
            _ => Err(SaitsError::Config(format!("unknown synthetic kind `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub kind: SynthKind,
    pub n: usize,
    pub n_steps: usize,
    pub n_features: usize,
    /// Fraction of all entries removed at random before splitting.
    pub missing_rate: f64,
    pub hole_fraction: f64,
    pub seed: u64,
}

impl SynthSpec {
    pub fn new(kind: SynthKind, n: usize, n_steps: usize, n_features: usize, missing_rate: f64, seed: u64) -> Self {
        Self {
            kind,
            n,
            n_steps,
            n_features,
            missing_rate,
            hole_fraction: 0.1,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.n_steps == 0 || self.n_features == 0 {
            return Err(SaitsError::Config("n, T and D must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.missing_rate) {
            return Err(SaitsError::Config(format!(
                "missing rate must lie in [0, 1), got {}",
                self.missing_rate
            )));
        }
        if !(self.hole_fraction > 0.0 && self.hole_fraction < 1.0) {
            return Err(SaitsError::Config(format!(
                "hole fraction must lie in (0, 1), got {}",
                self.hole_fraction
            )));
        }
        Ok(())
    }
}

const LATENT: usize = 2;
const NOISE: f64 = 0.1;

/// Complete samples (mask all ones) in original units.
pub fn synth_samples(spec: &SynthSpec) -> Result<Samples> {
    spec.validate()?;
    let (n, t, d) = (spec.n, spec.n_steps, spec.n_features);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let normal = |rng: &mut ChaCha8Rng| -> f64 { rng.sample(StandardNormal) };
    // Dataset-level loadings tie every feature to the shared latents.
    let loadings: Vec<f64> = (0..d * LATENT).map(|_| normal(&mut rng)).collect();
    let offsets: Vec<f64> = (0..d).map(|_| normal(&mut rng)).collect();
    let mut x = Vec::with_capacity(n * t * d);
    match spec.kind {
        SynthKind::SineMixture => {
            let base = std::f64::consts::TAU / t as f64;
            let shifts: Vec<f64> = (0..d * LATENT).map(|_| rng.gen_range(-0.5..0.5)).collect();
            for _ in 0..n {
                let waves: Vec<(f64, f64, f64)> = (0..LATENT)
                    .map(|_| {
                        (
                            rng.gen_range(0.5..2.0),
                            base * rng.gen_range(0.5..3.0),
                            rng.gen_range(0.0..std::f64::consts::TAU),
                        )
                    })
                    .collect();
                for step in 0..t {
                    for f in 0..d {
                        let mut v = offsets[f];
                        for (k, &(amp, omega, phase)) in waves.iter().enumerate() {
                            v += loadings[f * LATENT + k]
                                * amp
                                * (omega * step as f64 + phase + shifts[f * LATENT + k]).sin();
                        }
                        x.push(v + NOISE * normal(&mut rng));
                    }
                }
            }
        }
        SynthKind::RandomWalk => {
            for _ in 0..n {
                let mut level: Vec<f64> = offsets.iter().map(|o| o + normal(&mut rng)).collect();
                for _ in 0..t {
                    let shocks: Vec<f64> = (0..LATENT).map(|_| normal(&mut rng)).collect();
                    for f in 0..d {
                        let common: f64 = (0..LATENT).map(|k| loadings[f * LATENT + k] * shocks[k]).sum();
                        level[f] += 0.3 * common + 0.3 * normal(&mut rng);
                        x.push(level[f]);
                    }
                }
            }
        }
    }
    Ok(Samples {
        x: Tensor::new([n, t, d], x)?,
        mask: Tensor::ones([n, t, d]),
    })
}

/// Remove `rate` of all entries completely at random.
pub fn apply_mcar(samples: &Samples, rate: f64, rng: &mut ChaCha8Rng) -> Result<Samples> {
    let mut out = samples.clone();
    if rate == 0.0 {
        return Ok(out);
    }
    for i in sample_observed(&samples.mask, rate, rng)? {
        out.x.data_mut()[i] = 0.0;
        out.mask.data_mut()[i] = 0.0;
    }
    Ok(out)
}

pub fn feature_names(d: usize) -> Vec<String> {
    (0..d).map(|j| format!("f{j}")).collect()
}

/// Generate, thin out, split and standardize a synthetic dataset.
pub fn synth_generate(spec: &SynthSpec) -> Result<ImputationDataset> {
    let complete = synth_samples(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(1);
    let samples = apply_mcar(&complete, spec.missing_rate, &mut rng)?;
    let split = SplitSpec {
        hole_fraction: spec.hole_fraction,
        seed: spec.seed,
        ..SplitSpec::default()
    };
    let mut ds = ImputationDataset::from_samples(&samples, feature_names(spec.n_features), &split)?;
    ds.source = json!({ "synthetic": spec, "split": split });
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_with_blank_cell() {
        let raw = parse_csv("a,b\n1,\n2,3\n".as_bytes(), &CsvSchema::default()).unwrap();
        assert_eq!(raw.features, ["a", "b"]);
        assert_eq!(raw.rows, vec![vec![Some(1.0), None], vec![Some(2.0), Some(3.0)]]);
    }

    #[test]
    fn csv_errors() {
        assert!(parse_csv("".as_bytes(), &CsvSchema::default()).is_err());
        match parse_csv("a,b\n1,2\n3\n".as_bytes(), &CsvSchema::default()) {
            Err(SaitsError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        match parse_csv("a\n1\nx\n".as_bytes(), &CsvSchema::default()) {
            Err(SaitsError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn csv_na_token() {
        let schema = CsvSchema {
            na_tokens: vec!["NaN".into()],
            ..CsvSchema::default()
        };
        let raw = parse_csv("a\nNaN\n4\n".as_bytes(), &schema).unwrap();
        assert_eq!(raw.rows, vec![vec![None], vec![Some(4.0)]]);
        let strict = CsvSchema {
            na_tokens: vec![],
            ..CsvSchema::default()
        };
        assert!(parse_csv("a\nNaN\n".as_bytes(), &strict).is_err());
    }

    fn series(len: usize) -> RawSeries {
        RawSeries {
            features: vec!["a".into()],
            rows: (0..len).map(|i| vec![Some(i as f64)]).collect(),
            sample_ids: None,
        }
    }

    #[test]
    fn window_counts() {
        assert_eq!(window(&series(100), 100, 1).unwrap().len(), 1);
        assert_eq!(window(&series(48), 24, 12).unwrap().len(), 3);
        let one = window(&series(24), 24, 5).unwrap();
        assert_eq!(one.x.data(), series(24).rows.iter().map(|r| r[0].unwrap()).collect::<Vec<_>>());
        assert!(matches!(
            window(&series(10), 24, 1),
            Err(SaitsError::SeriesTooShort { len: 10, steps: 24 })
        ));
    }

    #[test]
    fn window_respects_sample_ids() {
        let mut raw = series(6);
        raw.sample_ids = Some(["p", "p", "p", "q", "q", "q"].map(String::from).to_vec());
        let w = window(&raw, 2, 1).unwrap();
        assert_eq!(w.len(), 4);
        assert_eq!(w.x.data(), &[0.0, 1.0, 1.0, 2.0, 3.0, 4.0, 4.0, 5.0]);
    }

    #[test]
    fn mcar_counts_round_half_away() {
        assert_eq!(mcar_count(0.2, 1000), 200);
        assert_eq!(mcar_count(0.1, 1000), 100);
        assert_eq!(mcar_count(0.5, 5), 3);
        assert_eq!(mcar_count(0.01, 3), 1);
        assert_eq!(mcar_count(0.0, 3), 0);
    }

    #[test]
    fn holes_partition_and_restore() {
        let samples = Samples {
            x: Tensor::from_fn([10, 10, 10], |i| i as f64 + 0.5),
            mask: Tensor::ones([10, 10, 10]),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let split = punch_eval_holes(&samples, 0.10, &mut rng).unwrap();
        let h = split.holdout.as_ref().unwrap();
        assert_eq!(h.mask.sum(), 100.0);
        assert!(h.mask.data().iter().zip(split.mask.data()).all(|(a, b)| a * b == 0.0));
        let back = split.restored();
        assert_eq!(back.x, samples.x);
        assert_eq!(back.mask, samples.mask);
    }

    #[test]
    fn standardizer_statistics() {
        let x = Tensor::new([1, 4, 2], vec![1.0, 5.0, 2.0, 5.0, 3.0, 5.0, 9.0, 5.0]).unwrap();
        let m = Tensor::new([1, 4, 2], vec![1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 0.0, 1.0]).unwrap();
        let names = vec!["a".to_string(), "b".to_string()];
        assert_eq!(
            Standardizer::fit(&x, &m, &names).unwrap_err().to_string(),
            SaitsError::ZeroVariance(vec!["b".into()]).to_string()
        );
        let x = Tensor::from_fn([3, 5, 2], |i| (i as f64 * 1.3).sin() * 4.0 + 7.0);
        let m = Tensor::from_fn([3, 5, 2], |i| (i % 7 != 3) as u8 as f64);
        let s = Standardizer::fit(&x, &m, &names).unwrap();
        let z = s.transform(&x, &m);
        for f in 0..2 {
            let vals: Vec<f64> = (0..30).filter(|i| i % 2 == f && m.data()[*i] == 1.0).map(|i| z.data()[i]).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-9 && (var.sqrt() - 1.0).abs() < 1e-9);
        }
        let back = s.inverse(&z);
        for i in 0..30 {
            if m.data()[i] == 1.0 {
                assert!((back.data()[i] - x.data()[i]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn synthetic_generation_is_seeded() {
        let spec = SynthSpec::new(SynthKind::SineMixture, 40, 8, 3, 0.1, 5);
        let a = synth_generate(&spec).unwrap();
        let b = synth_generate(&spec).unwrap();
        assert_eq!(a, b);
        let c = synth_generate(&SynthSpec { seed: 6, ..spec.clone() }).unwrap();
        assert_ne!(a.train.x, c.train.x);
        assert!(synth_generate(&SynthSpec { missing_rate: 1.5, ..spec }).is_err());
    }

    #[test]
    fn zero_missing_rate_keeps_everything_observed() {
        let spec = SynthSpec::new(SynthKind::RandomWalk, 30, 6, 2, 0.0, 1);
        let s = synth_samples(&spec).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(apply_mcar(&s, 0.0, &mut rng).unwrap().mask, Tensor::ones([30, 6, 2]));
        let ds = synth_generate(&spec).unwrap();
        assert_eq!(ds.train.mask.sum() as usize, ds.train.mask.numel());
        let val = ds.val.restored();
        assert_eq!(val.mask.sum() as usize, val.mask.numel());
    }

    #[test]
    fn split_sizes_and_packing() {
        let spec = SynthSpec::new(SynthKind::SineMixture, 512, 4, 2, 0.1, 9);
        let ds = synth_generate(&spec).unwrap();
        assert_eq!((ds.train.len(), ds.val.len(), ds.test.len()), (328, 82, 102));
        for s in [&ds.train, &ds.val, &ds.test] {
            assert!(s.x.data().iter().zip(s.mask.data()).all(|(x, m)| *m == 1.0 || *x == 0.0));
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.bin");
        ds.save(&path).unwrap();
        assert_eq!(ImputationDataset::load(&path).unwrap(), ds);
    }
}
