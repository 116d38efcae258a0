use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::WindowSet;
use crate::error::{config_err, shape_err, Error, Result};
use crate::model::{ParameterSet, TGraphormer};
use crate::numerics::Tensor;
use crate::scalar::Scalar;

/// Horizons reported by default.
pub const STANDARD_HORIZONS: [usize; 3] = [3, 6, 12];

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mae: f64,
    pub rmse: f64,
    /// Percent.
    pub mape: f64,
}

/// Masked error sums; entries whose truth is zero are skipped.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ErrorSums {
    pub abs: f64,
    pub sq: f64,
    pub rel: f64,
    pub count: usize,
}

impl ErrorSums {
    pub fn add(&mut self, pred: f64, truth: f64) {
        if truth == 0.0 {
            return;
        }
        let e = pred - truth;
        self.abs += e.abs();
        self.sq += e * e;
        self.rel += e.abs() / truth.abs();
        self.count += 1;
    }

    pub fn merge(&mut self, other: &ErrorSums) {
        self.abs += other.abs;
        self.sq += other.sq;
        self.rel += other.rel;
        self.count += other.count;
    }

    pub fn finish(&self) -> Result<Metrics> {
        if self.count == 0 {
            return Err(config_err!("no nonzero ground-truth entries to score"));
        }
        let n = self.count as f64;
        Ok(Metrics { mae: self.abs / n, rmse: (self.sq / n).sqrt(), mape: 100.0 * self.rel / n })
    }
}

/// MAE, RMSE and MAPE over entries with nonzero truth.
pub fn masked_metrics(pred: &[f64], truth: &[f64]) -> Result<Metrics> {
    if pred.len() != truth.len() {
        return Err(shape_err!("prediction has {} entries, truth {}", pred.len(), truth.len()));
    }
    let mut s = ErrorSums::default();
    pred.iter().zip(truth).for_each(|(&p, &t)| s.add(p, t));
    s.finish()
}

/// First `h` horizon steps of a `T x N x C` tensor.
pub fn horizon_slice(pred: &Tensor<f64>, h: usize) -> Result<Tensor<f64>> {
    let t = pred.shape().first().copied().unwrap_or(0);
    if h == 0 || h > t {
        return Err(config_err!("horizon {h} outside 1..={t}"));
    }
    let per_step = pred.numel() / t;
    let mut shape = pred.shape().to_vec();
    shape[0] = h;
    Tensor::new(shape, pred.data()[..h * per_step].to_vec())
}

/// Horizons to report for a model forecasting `t` steps: the standard ones
/// that fit, plus `t` itself.
pub fn report_horizons(t: usize) -> Vec<usize> {
    let mut hs: Vec<usize> = STANDARD_HORIZONS.iter().copied().filter(|&h| h <= t).collect();
    if hs.last() != Some(&t) {
        hs.push(t);
    }
    hs
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HorizonMetrics {
    pub horizon: usize,
    #[serde(flatten)]
    pub metrics: Metrics,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub horizons: Vec<HorizonMetrics>,
}

impl MetricsReport {
    /// Builds the report from per-step error sums; horizon `h` pools steps `0..h`.
    pub fn from_step_sums(steps: &[ErrorSums]) -> Result<Self> {
        let mut horizons = Vec::new();
        for h in report_horizons(steps.len()) {
            let mut pooled = ErrorSums::default();
            steps[..h].iter().for_each(|s| pooled.merge(s));
            horizons.push(HorizonMetrics { horizon: h, metrics: pooled.finish()? });
        }
        Ok(Self { horizons })
    }

    pub fn at(&self, horizon: usize) -> Option<Metrics> {
        self.horizons.iter().find(|m| m.horizon == horizon).map(|m| m.metrics)
    }

    /// Metrics at the longest reported horizon.
    pub fn last(&self) -> Metrics {
        self.horizons.last().map(|m| m.metrics).unwrap_or_default()
    }

    pub fn mean_mae(&self) -> f64 {
        self.horizons.iter().map(|m| m.metrics.mae).sum::<f64>() / self.horizons.len().max(1) as f64
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["horizon", "mae", "rmse", "mape"])?;
        for m in &self.horizons {
            w.serialize((m.horizon, m.metrics.mae, m.metrics.rmse, m.metrics.mape))?;
        }
        w.flush()?;
        Ok(())
    }

    /// Writes `<stem>.json` and `<stem>.csv`.
    pub fn write(&self, stem: &Path) -> Result<()> {
        if let Some(dir) = stem.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(stem.with_extension("json"), serde_json::to_string_pretty(self)? + "\n")?;
        self.write_csv(std::fs::File::create(stem.with_extension("csv"))?)
    }
}

/// Adds every `(pred, truth)` pair of a `T x N` forecast into per-step sums.
fn accumulate(steps: &mut [ErrorSums], pred: &[f64], truth: &[f64]) {
    let n = pred.len() / steps.len();
    for (t, s) in steps.iter_mut().enumerate() {
        for k in t * n..(t + 1) * n {
            s.add(pred[k], truth[k]);
        }
    }
}

/// Scores the model on the first `limit` windows (all when `None`).
/// Forecasts run in parallel; sums are reduced in window order.
pub fn evaluate<S: Scalar>(
    model: &TGraphormer,
    params: &ParameterSet<S>,
    windows: &WindowSet,
    limit: Option<usize>,
) -> Result<MetricsReport> {
    let count = limit.map_or(windows.len(), |l| l.min(windows.len()));
    let preds: Vec<Result<Vec<f64>>> = (0..count)
        .into_par_iter()
        .map(|i| {
            let out = model.predict(params, &windows.sample(i).x)?;
            Ok(out.data().iter().map(|v| v.as_f64()).collect())
        })
        .collect();
    let mut steps = vec![ErrorSums::default(); windows.horizon()];
    for (i, p) in preds.into_iter().enumerate() {
        let p = p?;
        if p.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite forecast for window {i}")));
        }
        accumulate(&mut steps, &p, windows.sample(i).y.data());
    }
    MetricsReport::from_step_sums(&steps)
}

/// Repeats the last observed reading over the whole horizon.
pub fn persistence_report(windows: &WindowSet) -> Result<MetricsReport> {
    let mut steps = vec![ErrorSums::default(); windows.horizon()];
    for i in 0..windows.len() {
        let last = windows.last_observed(i);
        let pred: Vec<f64> = (0..windows.horizon()).flat_map(|_| last.iter().copied()).collect();
        accumulate(&mut steps, &pred, windows.sample(i).y.data());
    }
    MetricsReport::from_step_sums(&steps)
}
