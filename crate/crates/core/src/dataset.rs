//! Sensor time series ingestion, splitting, normalization, imputation and
//! sliding windows.
//!
//! A reading of exactly zero is a missing value: it is imputed in the
//! training split and masked out of losses and metrics everywhere.

use std::io::{Read, Write};
use std::path::Path;

use chrono::{DateTime, NaiveDateTime, Timelike};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{config_err, shape_err, Error, Result};
use crate::io::Container;
use crate::numerics::Tensor;

const MINUTES_PER_DAY: u32 = 24 * 60;
const TIMESTAMP_FORMAT: &str = "%Y-%m-%dT%H:%M:%S";

/// `L x N` readings at a constant sampling interval.
#[derive(Clone, Debug, PartialEq)]
pub struct RawSeries {
    values: Vec<f64>,
    num_nodes: usize,
    timestamps: Vec<NaiveDateTime>,
    interval_minutes: u32,
}

impl RawSeries {
    pub fn new(values: Vec<f64>, num_nodes: usize, timestamps: Vec<NaiveDateTime>) -> Result<Self> {
        if num_nodes == 0 || values.len() != timestamps.len() * num_nodes {
            return Err(shape_err!(
                "{} values for {} timestamps and {} nodes",
                values.len(),
                timestamps.len(),
                num_nodes
            ));
        }
        if timestamps.len() < 2 {
            return Err(config_err!("a series needs at least two timestamps"));
        }
        let step = timestamps[1] - timestamps[0];
        if step.num_seconds() <= 0 || step.num_seconds() % 60 != 0 {
            return Err(config_err!("sampling interval must be a positive whole number of minutes"));
        }
        if let Some(w) = timestamps.windows(2).position(|w| w[1] - w[0] != step) {
            return Err(config_err!("irregular sampling at row {}", w + 1));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::Format(format!("non-finite reading {v}")));
        }
        Ok(Self { values, num_nodes, timestamps, interval_minutes: (step.num_seconds() / 60) as u32 })
    }

    /// Regular series starting at `start`.
    pub fn regular(values: Vec<f64>, num_nodes: usize, start: NaiveDateTime, interval_minutes: u32) -> Result<Self> {
        let len = values.len() / num_nodes.max(1);
        let step = chrono::Duration::minutes(interval_minutes as i64);
        let timestamps = (0..len).map(|i| start + step * i as i32).collect();
        Self::new(values, num_nodes, timestamps)
    }

    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn interval_minutes(&self) -> u32 {
        self.interval_minutes
    }

    pub fn timestamps(&self) -> &[NaiveDateTime] {
        &self.timestamps
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.values[t * self.num_nodes..(t + 1) * self.num_nodes]
    }

    pub fn get(&self, t: usize, node: usize) -> f64 {
        self.values[t * self.num_nodes + node]
    }

    /// Rows `start..end`. Slices keep the parent's sampling interval even
    /// when they are a single row long.
    pub fn slice(&self, start: usize, end: usize) -> RawSeries {
        let n = self.num_nodes;
        RawSeries {
            values: self.values[start * n..end * n].to_vec(),
            num_nodes: n,
            timestamps: self.timestamps[start..end].to_vec(),
            interval_minutes: self.interval_minutes,
        }
    }

    fn with_values(&self, values: Vec<f64>) -> RawSeries {
        RawSeries { values, ..self.clone() }
    }

    /// Population standard deviation of all readings.
    pub fn std(&self) -> f64 {
        let n = self.values.len() as f64;
        let mean = self.values.iter().sum::<f64>() / n;
        (self.values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
    }
}

fn parse_timestamp(s: &str) -> Result<NaiveDateTime> {
    if let Ok(dt) = DateTime::parse_from_rfc3339(s) {
        return Ok(dt.naive_local());
    }
    for fmt in [TIMESTAMP_FORMAT, "%Y-%m-%d %H:%M:%S", "%Y-%m-%dT%H:%M", "%Y-%m-%d %H:%M"] {
        if let Ok(t) = NaiveDateTime::parse_from_str(s, fmt) {
            return Ok(t);
        }
    }
    Err(Error::Format(format!("unrecognized timestamp `{s}`")))
}

/// Reads a CSV whose first column is an ISO-8601 timestamp and whose
/// remaining columns are one reading per sensor.
pub fn read_series_csv<R: Read>(reader: R) -> Result<RawSeries> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let num_nodes = rdr.headers()?.len().saturating_sub(1);
    let mut values = Vec::new();
    let mut timestamps = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        if rec.len() != num_nodes + 1 {
            return Err(Error::Format(format!("row with {} fields, expected {}", rec.len(), num_nodes + 1)));
        }
        timestamps.push(parse_timestamp(&rec[0])?);
        for field in rec.iter().skip(1) {
            values.push(field.parse::<f64>().map_err(|_| Error::Format(format!("bad reading `{field}`")))?);
        }
    }
    RawSeries::new(values, num_nodes, timestamps)
}

pub fn write_series_csv<W: Write>(out: W, series: &RawSeries) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["timestamp".to_string()];
    header.extend((0..series.num_nodes).map(|i| format!("s{i}")));
    w.write_record(&header)?;
    for t in 0..series.len() {
        let mut rec = vec![series.timestamps[t].format(TIMESTAMP_FORMAT).to_string()];
        rec.extend(series.row(t).iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Series in the binary container: tensor `values` of shape `L x N`, with
/// `start` and `interval_minutes` in the manifest.
pub fn write_series_container(stem: &Path, series: &RawSeries) -> Result<()> {
    let mut c = Container::new(json!({
        "kind": "series",
        "start": series.timestamps[0].format(TIMESTAMP_FORMAT).to_string(),
        "interval_minutes": series.interval_minutes,
    }));
    c.push("values", vec![series.len(), series.num_nodes], series.values.clone());
    c.write(stem)
}

pub fn read_series_container(stem: &Path) -> Result<RawSeries> {
    let c = Container::read(stem)?;
    let (shape, values) = c.require("values")?;
    if shape.len() != 2 {
        return Err(Error::Format("series tensor must be L x N".into()));
    }
    let start = c.meta["start"].as_str().ok_or_else(|| Error::Format("manifest lacks `start`".into()))?;
    let interval = c.meta["interval_minutes"]
        .as_u64()
        .ok_or_else(|| Error::Format("manifest lacks `interval_minutes`".into()))?;
    RawSeries::regular(values.to_vec(), shape[1], parse_timestamp(start)?, interval as u32)
}

/// Chronological split fractions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl SplitSpec {
    /// 70/10/20, used for METR-LA and PEMS-BAY.
    pub const TRAFFIC_SPEED: SplitSpec = SplitSpec { train: 0.7, val: 0.1, test: 0.2 };
    /// 60/20/20, used for PEMS03/04/08.
    pub const TRAFFIC_FLOW: SplitSpec = SplitSpec { train: 0.6, val: 0.2, test: 0.2 };

    pub fn validate(&self) -> Result<()> {
        if [self.train, self.val, self.test].iter().any(|&f| !(f > 0.0)) {
            return Err(config_err!("split fractions must all be positive"));
        }
        if (self.train + self.val + self.test - 1.0).abs() > 1e-9 {
            return Err(config_err!("split fractions must sum to 1"));
        }
        Ok(())
    }

    /// Row counts for a series of `len` rows; the test split takes the remainder.
    /// Boundaries are floored after a 1e-9 nudge so that e.g. `10 * (0.7 + 0.1)`
    /// lands on 8 rather than 7.999...
    pub fn lengths(&self, len: usize) -> (usize, usize, usize) {
        let boundary = |f: f64| ((len as f64 * f + 1e-9).floor() as usize).min(len);
        let a = boundary(self.train);
        let b = boundary(self.train + self.val);
        (a, b - a, len - b)
    }
}

/// Contiguous train, validation and test slices in time order. Every slice
/// must have at least `min_len` rows.
pub fn chronological_split(
    series: &RawSeries,
    spec: &SplitSpec,
    min_len: usize,
) -> Result<(RawSeries, RawSeries, RawSeries)> {
    spec.validate()?;
    let (a, b, c) = spec.lengths(series.len());
    for (name, n) in [("train", a), ("validation", b), ("test", c)] {
        if n < min_len.max(1) {
            return Err(config_err!("{name} split has {n} rows, need at least {}", min_len.max(1)));
        }
    }
    Ok((series.slice(0, a), series.slice(a, a + b), series.slice(a + b, a + b + c)))
}

/// Z-score statistics of the training readings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: f64,
    pub std: f64,
}

impl Normalizer {
    pub fn fit(train: &RawSeries) -> Result<Self> {
        if train.values.is_empty() {
            return Err(config_err!("cannot fit a normalizer on an empty series"));
        }
        let n = train.values.len() as f64;
        let mean = train.values.iter().sum::<f64>() / n;
        let std = (train.values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        if !(std > 0.0) {
            return Err(config_err!("training readings have zero variance"));
        }
        Ok(Self { mean, std })
    }

    pub fn apply(&self, x: f64) -> f64 {
        (x - self.mean) / self.std
    }

    pub fn invert(&self, z: f64) -> f64 {
        z * self.std + self.mean
    }

    pub fn apply_series(&self, s: &RawSeries) -> RawSeries {
        s.with_values(s.values.iter().map(|&v| self.apply(v)).collect())
    }
}

pub fn slots_per_day(interval_minutes: u32) -> Result<usize> {
    if interval_minutes == 0 || MINUTES_PER_DAY % interval_minutes != 0 {
        return Err(config_err!("sampling interval of {interval_minutes} min does not divide a day"));
    }
    Ok((MINUTES_PER_DAY / interval_minutes) as usize)
}

/// Time-of-day slot of every timestamp.
pub fn time_of_day_slots(timestamps: &[NaiveDateTime], interval_minutes: u32) -> Result<Vec<usize>> {
    let per_day = slots_per_day(interval_minutes)?;
    Ok(timestamps
        .iter()
        .map(|t| {
            let minutes = t.hour() * 60 + t.minute();
            (minutes / interval_minutes) as usize % per_day
        })
        .collect())
}

/// One-hot `L x slots_per_day` time-of-day matrix.
pub fn time_of_day_features(timestamps: &[NaiveDateTime], interval_minutes: u32) -> Result<Tensor<f64>> {
    let per_day = slots_per_day(interval_minutes)?;
    let slots = time_of_day_slots(timestamps, interval_minutes)?;
    let mut data = vec![0.0; slots.len() * per_day];
    for (t, &s) in slots.iter().enumerate() {
        data[t * per_day + s] = 1.0;
    }
    Tensor::new(vec![slots.len(), per_day], data)
}

/// Replaces each zero reading by the mean nonzero reading of the same
/// sensor at the same time-of-day slot, falling back to the sensor's
/// overall nonzero mean, and leaving the zero when the sensor has none.
pub fn impute_historical_average(train: &RawSeries) -> Result<RawSeries> {
    let n = train.num_nodes;
    let per_day = slots_per_day(train.interval_minutes)?;
    let slots = time_of_day_slots(&train.timestamps, train.interval_minutes)?;
    let mut slot_sum = vec![0.0; per_day * n];
    let mut slot_cnt = vec![0usize; per_day * n];
    let mut all_sum = vec![0.0; n];
    let mut all_cnt = vec![0usize; n];
    for (t, &s) in slots.iter().enumerate() {
        for (i, &v) in train.row(t).iter().enumerate() {
            if v != 0.0 {
                slot_sum[s * n + i] += v;
                slot_cnt[s * n + i] += 1;
                all_sum[i] += v;
                all_cnt[i] += 1;
            }
        }
    }
    let mut values = train.values.clone();
    for (t, &s) in slots.iter().enumerate() {
        for i in 0..n {
            let v = &mut values[t * n + i];
            if *v != 0.0 {
                continue;
            }
            if slot_cnt[s * n + i] > 0 {
                *v = slot_sum[s * n + i] / slot_cnt[s * n + i] as f64;
            } else if all_cnt[i] > 0 {
                *v = all_sum[i] / all_cnt[i] as f64;
            }
        }
    }
    Ok(train.with_values(values))
}

/// One `(X, Y)` training instance.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowedSample {
    /// `T' x N x C`: normalized reading followed by the time-of-day one-hot.
    pub x: Tensor<f64>,
    /// `T x N x 1` in original units; zero marks a missing target.
    pub y: Tensor<f64>,
    /// Series row of the last context step.
    pub anchor: usize,
}

impl WindowedSample {
    /// Mask of present (nonzero) targets.
    pub fn target_mask(&self) -> Vec<bool> {
        self.y.data().iter().map(|&v| v != 0.0).collect()
    }
}

/// Sliding windows over one split, materialized on demand.
///
/// A materialized sample is `T' * N * (1 + slots_per_day)` values, so the
/// set stores the split once and builds samples by index.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowSet {
    inputs: Vec<f64>,
    targets: Vec<f64>,
    slots: Vec<usize>,
    num_nodes: usize,
    slots_per_day: usize,
    context: usize,
    horizon: usize,
    normalizer: Normalizer,
}

/// Windows over `split` with context `context` (T') and horizon `horizon` (T).
pub fn make_windows(split: &RawSeries, context: usize, horizon: usize, normalizer: &Normalizer) -> Result<WindowSet> {
    WindowSet::build(split, split, context, horizon, normalizer)
}

impl WindowSet {
    /// `inputs` feeds the context channel (normalized here), `targets` the
    /// horizon. They differ only for an imputed training split, whose
    /// targets keep their missing entries.
    pub fn build(
        inputs: &RawSeries,
        targets: &RawSeries,
        context: usize,
        horizon: usize,
        normalizer: &Normalizer,
    ) -> Result<Self> {
        if inputs.len() != targets.len() || inputs.num_nodes != targets.num_nodes {
            return Err(shape_err!("input and target series differ in shape"));
        }
        if context == 0 || horizon == 0 {
            return Err(config_err!("context and horizon must be positive"));
        }
        if inputs.len() < context + horizon {
            return Err(config_err!(
                "split of {} rows is shorter than context + horizon = {}",
                inputs.len(),
                context + horizon
            ));
        }
        Ok(Self {
            inputs: inputs.values.iter().map(|&v| normalizer.apply(v)).collect(),
            targets: targets.values.clone(),
            slots: time_of_day_slots(&inputs.timestamps, inputs.interval_minutes)?,
            num_nodes: inputs.num_nodes,
            slots_per_day: slots_per_day(inputs.interval_minutes)?,
            context,
            horizon,
            normalizer: *normalizer,
        })
    }

    pub fn len(&self) -> usize {
        self.slots.len() + 1 - self.context - self.horizon
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn context(&self) -> usize {
        self.context
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    /// Input channels `C`.
    pub fn channels(&self) -> usize {
        1 + self.slots_per_day
    }

    pub fn normalizer(&self) -> Normalizer {
        self.normalizer
    }

    pub fn series_len(&self) -> usize {
        self.slots.len()
    }

    /// Series row of the last context step of window `i`.
    pub fn anchor(&self, i: usize) -> usize {
        i + self.context - 1
    }

    pub fn sample(&self, i: usize) -> WindowedSample {
        assert!(i < self.len(), "window {i} of {}", self.len());
        let (n, c) = (self.num_nodes, self.channels());
        let anchor = self.anchor(i);
        let first = anchor + 1 - self.context;
        let mut x = vec![0.0; self.context * n * c];
        for (k, t) in (first..=anchor).enumerate() {
            for node in 0..n {
                let base = (k * n + node) * c;
                x[base] = self.inputs[t * n + node];
                x[base + 1 + self.slots[t]] = 1.0;
            }
        }
        let y = self.targets[(anchor + 1) * n..(anchor + 1 + self.horizon) * n].to_vec();
        WindowedSample {
            x: Tensor::new(vec![self.context, n, c], x).expect("window shape"),
            y: Tensor::new(vec![self.horizon, n, 1], y).expect("window shape"),
            anchor,
        }
    }

    /// Latest nonzero raw reading per node within the context of window
    /// `i`; zero when the node reported nothing in the window.
    pub fn last_observed(&self, i: usize) -> Vec<f64> {
        let n = self.num_nodes;
        let anchor = self.anchor(i);
        (0..n)
            .map(|node| {
                (anchor + 1 - self.context..=anchor)
                    .rev()
                    .map(|t| self.targets[t * n + node])
                    .find(|&v| v != 0.0)
                    .unwrap_or(0.0)
            })
            .collect()
    }

    /// Normalized context readings of window `i` as `T' x N`.
    pub fn context_readings(&self, i: usize) -> &[f64] {
        let first = self.anchor(i) + 1 - self.context;
        &self.inputs[first * self.num_nodes..(self.anchor(i) + 1) * self.num_nodes]
    }

    pub fn save(&self, stem: &Path, split_name: &str, seed: u64) -> Result<()> {
        let n = self.num_nodes;
        let mut c = Container::new(json!({
            "kind": "windows",
            "split": split_name,
            "context": self.context,
            "horizon": self.horizon,
            "channels": self.channels(),
            "slots_per_day": self.slots_per_day,
            "num_nodes": n,
            "num_windows": self.len(),
            "normalizer": { "mean": self.normalizer.mean, "std": self.normalizer.std },
            "seed": seed,
        }));
        let rows = self.slots.len();
        c.push("inputs", vec![rows, n], self.inputs.clone());
        c.push("targets", vec![rows, n], self.targets.clone());
        c.push("slots", vec![rows], self.slots.iter().map(|&s| s as f64).collect());
        c.write(stem)
    }

    pub fn load(stem: &Path) -> Result<Self> {
        let c = Container::read(stem)?;
        let field = |k: &str| {
            c.meta[k].as_u64().map(|v| v as usize).ok_or_else(|| Error::Format(format!("manifest lacks `{k}`")))
        };
        let norm: Normalizer = serde_json::from_value(c.meta["normalizer"].clone())?;
        let (shape, inputs) = c.require("inputs")?;
        let (_, targets) = c.require("targets")?;
        let (_, slots) = c.require("slots")?;
        let set = Self {
            inputs: inputs.to_vec(),
            targets: targets.to_vec(),
            slots: slots.iter().map(|&s| s as usize).collect(),
            num_nodes: shape[1],
            slots_per_day: field("slots_per_day")?,
            context: field("context")?,
            horizon: field("horizon")?,
            normalizer: norm,
        };
        if set.targets.len() != set.inputs.len() || set.slots.len() * set.num_nodes != set.inputs.len() {
            return Err(Error::Format("window archive tensors disagree in shape".into()));
        }
        Ok(set)
    }
}

/// Order in which training windows are visited in `epoch`.
pub fn shuffled_order(len: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut rng);
    order
}
