//! Masked error metrics, the Median and Last baselines, and report
//! assembly.

use std::path::Path;

use serde::{Deserialize, Serialize};
use saits_tensor::Tensor;

use crate::data::{ImputationDataset, Split, SplitName, Standardizer};
use crate::error::{Result, SaitsError};
use crate::model::SaitsModel;

/// Error statistics over the positions selected by a mask.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mae: f64,
    pub rmse: f64,
    /// `None` when the masked targets sum to zero in absolute value.
    pub mre: Option<f64>,
    pub mse: f64,
    pub count: usize,
}

pub fn metrics(estimation: &Tensor, target: &Tensor, mask: &Tensor) -> Result<Metrics> {
    if estimation.shape() != target.shape() || target.shape() != mask.shape() {
        return Err(saits_tensor::TensorError::ShapeMismatch {
            op: "metrics",
            lhs: estimation.shape().to_vec(),
            rhs: target.shape().to_vec(),
        }
        .into());
    }
    let mut abs = 0.0;
    let mut sq = 0.0;
    let mut scale = 0.0;
    let mut weight = 0.0;
    for ((e, t), m) in estimation.data().iter().zip(target.data()).zip(mask.data()) {
        let err = (e - t) * m;
        abs += err.abs();
        sq += err * err;
        scale += (t * m).abs();
        weight += m;
    }
    if weight == 0.0 {
        return Err(saits_tensor::TensorError::EmptyMask.into());
    }
    let mse = sq / weight;
    Ok(Metrics {
        mae: abs / weight,
        rmse: mse.sqrt(),
        mre: (scale > 0.0).then(|| abs / scale),
        mse,
        count: weight as usize,
    })
}

/// Median with the mean of the two middle values for even counts.
pub fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    Some(if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    })
}

/// Imputed working tensors of every split.
#[derive(Clone, Debug, PartialEq)]
pub struct ImputedSplits {
    pub train: Tensor,
    pub val: Tensor,
    pub test: Tensor,
}

impl ImputedSplits {
    pub fn get(&self, name: SplitName) -> &Tensor {
        match name {
            SplitName::Train => &self.train,
            SplitName::Val => &self.val,
            SplitName::Test => &self.test,
        }
    }

    fn build(ds: &ImputationDataset, mut f: impl FnMut(&Split) -> Result<Tensor>) -> Result<Self> {
        Ok(Self {
            train: f(&ds.train)?,
            val: f(&ds.val)?,
            test: f(&ds.test)?,
        })
    }
}

/// Per-feature medians of the observed training values.
pub fn feature_medians(ds: &ImputationDataset) -> Result<Vec<f64>> {
    let d = ds.n_features();
    let mut columns = vec![Vec::new(); d];
    for (i, (&v, &m)) in ds.train.x.data().iter().zip(ds.train.mask.data()).enumerate() {
        if m == 1.0 {
            columns[i % d].push(v);
        }
    }
    columns
        .iter_mut()
        .enumerate()
        .map(|(j, c)| {
            median(c).ok_or_else(|| SaitsError::UnobservedFeature(ds.standardizer.features[j].clone()))
        })
        .collect()
}

/// Fill every unobserved entry of feature `d` with the training median of `d`.
pub fn baseline_median(ds: &ImputationDataset) -> Result<ImputedSplits> {
    let medians = feature_medians(ds)?;
    let d = medians.len();
    ImputedSplits::build(ds, |s| {
        Ok(Tensor::from_fn(s.x.shape().to_vec(), |i| {
            if s.mask.data()[i] == 1.0 {
                s.x.data()[i]
            } else {
                medians[i % d]
            }
        }))
    })
}

/// Forward-fill each feature within each sample; positions before the
/// first observation get 0.
pub fn last_observation_fill(x: &Tensor, mask: &Tensor) -> Tensor {
    let (n, t, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut out = x.clone();
    for s in 0..n {
        for f in 0..d {
            let mut last = 0.0;
            for step in 0..t {
                let i = (s * t + step) * d + f;
                if mask.data()[i] == 1.0 {
                    last = x.data()[i];
                } else {
                    out.data_mut()[i] = last;
                }
            }
        }
    }
    out
}

pub fn baseline_last(ds: &ImputationDataset) -> Result<ImputedSplits> {
    ImputedSplits::build(ds, |s| Ok(last_observation_fill(&s.x, &s.mask)))
}

/// `X̂_c` of a trained model on every split.
pub fn model_imputation(model: &SaitsModel, ds: &ImputationDataset, batch: usize) -> Result<ImputedSplits> {
    ImputedSplits::build(ds, |s| Ok(model.impute(&s.x, &s.mask, batch)?.0))
}

/// One report row: a method scored on one split's hold-out.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub method: String,
    pub split: String,
    pub positions: usize,
    pub mae: f64,
    pub rmse: f64,
    pub mre: Option<f64>,
    pub mse: f64,
    pub mae_orig: f64,
    pub rmse_orig: f64,
    pub mre_orig: Option<f64>,
    pub mse_orig: f64,
}

/// Score `imputed` at the hold-out positions of `split`, in standardized
/// and original units.
pub fn evaluate_method(
    imputed: &Tensor,
    split: &Split,
    standardizer: &Standardizer,
    method: &str,
    split_name: SplitName,
) -> Result<EvalRecord> {
    let holdout = split.holdout(split_name.name())?;
    if imputed.shape() != split.x.shape() {
        return Err(SaitsError::InputShape {
            got: imputed.shape().to_vec(),
            steps: split.x.shape()[1],
            features: split.x.shape()[2],
        });
    }
    let std = metrics(imputed, &holdout.values, &holdout.mask)?;
    let orig = metrics(
        &standardizer.inverse(imputed),
        &standardizer.inverse(&holdout.values),
        &holdout.mask,
    )?;
    Ok(EvalRecord {
        method: method.to_string(),
        split: split_name.name().to_string(),
        positions: std.count,
        mae: std.mae,
        rmse: std.rmse,
        mre: std.mre,
        mse: std.mse,
        mae_orig: orig.mae,
        rmse_orig: orig.rmse,
        mre_orig: orig.mre,
        mse_orig: orig.mse,
    })
}

/// Rows for every method on every split that carries a hold-out.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRecord>,
    pub seed: u64,
    /// Effective configuration of the run that produced the report.
    pub config: serde_json::Value,
}

impl EvalReport {
    pub fn add_method(&mut self, ds: &ImputationDataset, imputed: &ImputedSplits, method: &str) -> Result<()> {
        for name in [SplitName::Val, SplitName::Test] {
            let split = ds.split(name);
            if split.holdout.is_some() {
                self.rows
                    .push(evaluate_method(imputed.get(name), split, &ds.standardizer, method, name)?);
            }
        }
        Ok(())
    }

    pub fn find(&self, method: &str, split: SplitName) -> Option<&EvalRecord> {
        self.rows
            .iter()
            .find(|r| r.method == method && r.split == split.name())
    }

    /// Median and Last rows for `ds`.
    pub fn with_baselines(ds: &ImputationDataset) -> Result<Self> {
        let mut report = Self::default();
        report.add_method(ds, &baseline_median(ds)?, "median")?;
        report.add_method(ds, &baseline_last(ds)?, "last")?;
        Ok(report)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for row in &self.rows {
            w.serialize(row)?;
        }
        w.flush().map_err(|e| SaitsError::io(path, e))
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| SaitsError::io(path, e))
    }
}

/// One row of an ablation comparison.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub mae: f64,
    pub rmse: f64,
    pub mre: Option<f64>,
    pub epochs: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub split: String,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for row in &self.rows {
            w.serialize(row)?;
        }
        w.flush().map_err(|e| SaitsError::io(path, e))
    }

    pub fn to_markdown(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |v| format!("{v:.4}"));
        let mut s = format!("Hold-out errors on the `{}` split\n\n", self.split);
        s.push_str("| Variant | MAE | RMSE | MRE | Epochs |\n|---|---|---|---|---|\n");
        for r in &self.rows {
            s.push_str(&format!(
                "| {} | {:.4} | {:.4} | {} | {} |\n",
                r.variant,
                r.mae,
                r.rmse,
                fmt(r.mre),
                r.epochs
            ));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_generate, SynthKind, SynthSpec};

    fn t(v: &[f64]) -> Tensor {
        Tensor::new([v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn metric_examples() {
        let m = metrics(&t(&[1.0, 2.0]), &t(&[1.0, 2.0]), &t(&[1.0, 1.0])).unwrap();
        assert_eq!((m.mae, m.rmse, m.mse, m.mre), (0.0, 0.0, 0.0, Some(0.0)));
        let m = metrics(&t(&[2.0, 0.0]), &t(&[0.0, 0.0]), &t(&[1.0, 0.0])).unwrap();
        assert_eq!((m.mae, m.rmse, m.mse, m.mre, m.count), (2.0, 2.0, 4.0, None, 1));
        assert!(metrics(&t(&[1.0]), &t(&[1.0]), &t(&[0.0])).is_err());
    }

    #[test]
    fn median_conventions() {
        assert_eq!(median(&mut [1.0, 100.0, 2.0]), Some(2.0));
        assert_eq!(median(&mut [3.0, 1.0]), Some(2.0));
        assert_eq!(median(&mut []), None);
    }

    #[test]
    fn last_fill_examples() {
        let x = Tensor::new([1, 4, 1], vec![0.0, 5.0, 0.0, 0.0]).unwrap();
        let m = Tensor::new([1, 4, 1], vec![0.0, 1.0, 0.0, 0.0]).unwrap();
        assert_eq!(last_observation_fill(&x, &m).data(), &[0.0, 5.0, 5.0, 5.0]);
        let full = Tensor::from_fn([2, 3, 2], |i| i as f64);
        assert_eq!(last_observation_fill(&full, &Tensor::ones([2, 3, 2])), full);
        assert_eq!(
            last_observation_fill(&Tensor::zeros([1, 3, 1]), &Tensor::zeros([1, 3, 1])),
            Tensor::zeros([1, 3, 1])
        );
    }

    #[test]
    fn report_covers_methods_times_splits() {
        let ds = synth_generate(&SynthSpec::new(SynthKind::RandomWalk, 60, 12, 3, 0.1, 2)).unwrap();
        let report = EvalReport::with_baselines(&ds).unwrap();
        assert_eq!(report.rows.len(), 4);
        let val = report.find("median", SplitName::Val).unwrap();
        assert_eq!(val.positions, ds.val.holdout.as_ref().unwrap().mask.sum() as usize);
        assert!(val.rmse >= val.mae);
        let again = EvalReport::with_baselines(&ds).unwrap();
        assert_eq!(report, again);
    }

    #[test]
    fn median_fill_keeps_observed_values() {
        let ds = synth_generate(&SynthSpec::new(SynthKind::SineMixture, 40, 6, 2, 0.0, 2)).unwrap();
        let filled = baseline_median(&ds).unwrap();
        // Training split has no gaps when the missing rate is zero.
        assert_eq!(filled.train, ds.train.x);
    }
}
