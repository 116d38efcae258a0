use std::path::{Path, PathBuf};

use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::optim::{adamw_step, clip_global_norm, layer_lr_scales, lr_at, OptimizerState};
use crate::dataset::{shuffled_order, Normalizer, WindowSet};
use crate::error::{config_err, Error, Result};
use crate::eval::{evaluate, MetricsReport};
use crate::io::Container;
use crate::model::{GraphMaxima, ModelConfig, ParameterSet, Pass, TGraphormer};
use crate::numerics::{Tape, Tensor};
use crate::scalar::Scalar;

/// Validation score used to pick the best checkpoint.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectBy {
    /// MAE at the longest horizon.
    #[default]
    LastHorizon,
    /// MAE averaged over the reported horizons.
    MeanOverHorizons,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub base_lr: f64,
    pub weight_decay: f64,
    /// Global gradient-norm cap; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub huber_delta: f64,
    pub layer_decay: f64,
    pub batch_size: usize,
    pub grad_accum_steps: usize,
    pub dropout: f64,
    pub seed: u64,
    /// Stops after this many optimizer steps; the schedule spans the shortened run.
    pub max_steps: Option<usize>,
    pub select_by: SelectBy,
    /// Scores only the first windows of the validation split.
    pub val_limit: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            warmup_epochs: 1,
            base_lr: 1e-3,
            weight_decay: 0.05,
            clip_norm: Some(1.0),
            huber_delta: 1.5,
            layer_decay: 0.9,
            batch_size: 8,
            grad_accum_steps: 1,
            dropout: 0.1,
            seed: 0,
            max_steps: None,
            select_by: SelectBy::LastHorizon,
            val_limit: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.grad_accum_steps == 0 {
            return Err(config_err!("epochs, batch_size and grad_accum_steps must be positive"));
        }
        if self.warmup_epochs >= self.epochs {
            return Err(config_err!("warmup_epochs ({}) must be below epochs ({})", self.warmup_epochs, self.epochs));
        }
        if !(self.base_lr > 0.0) || !(self.huber_delta > 0.0) || self.weight_decay < 0.0 {
            return Err(config_err!("base_lr and huber_delta must be positive, weight_decay nonnegative"));
        }
        if !(self.layer_decay > 0.0 && self.layer_decay <= 1.0) {
            return Err(config_err!("layer_decay {} outside (0, 1]", self.layer_decay));
        }
        if self.clip_norm.is_some_and(|c| !(c > 0.0)) {
            return Err(config_err!("clip_norm must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(config_err!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.max_steps == Some(0) {
            return Err(config_err!("max_steps must be positive"));
        }
        Ok(())
    }

    pub fn effective_batch(&self) -> usize {
        self.batch_size * self.grad_accum_steps
    }

    /// `(steps per epoch, total optimizer steps)` for `windows` training windows.
    pub fn plan(&self, windows: usize) -> (usize, usize) {
        let per_epoch = windows.div_ceil(self.effective_batch());
        let planned = per_epoch * self.epochs;
        (per_epoch, self.max_steps.map_or(planned, |m| m.min(planned)))
    }

    /// Learning rate for optimizer step `step` of `total`.
    pub fn lr_at_step(&self, step: usize, total: usize) -> f64 {
        let epoch = step as f64 / total as f64 * self.epochs as f64;
        lr_at(epoch, self.warmup_epochs as f64, self.epochs as f64, self.base_lr)
    }

    fn score(&self, report: &MetricsReport) -> f64 {
        match self.select_by {
            SelectBy::LastHorizon => report.last().mae,
            SelectBy::MeanOverHorizons => report.mean_mae(),
        }
    }
}

/// One row of the training log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_mae: f64,
    pub val_rmse: f64,
    pub val_mape: f64,
    pub lr: f64,
}

pub fn write_log_csv(path: &Path, rows: &[EpochLog]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["epoch", "train_loss", "val_mae", "val_rmse", "val_mape", "lr"])?;
    for r in rows {
        w.serialize((r.epoch, r.train_loss, r.val_mae, r.val_rmse, r.val_mape, r.lr))?;
    }
    w.flush()?;
    Ok(())
}

/// Everything needed to evaluate a trained model or continue training it.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<S> {
    pub params: ParameterSet<S>,
    pub optimizer: OptimizerState<S>,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub maxima: GraphMaxima,
    pub normalizer: Normalizer,
    /// Completed epochs.
    pub epoch: usize,
    pub val: MetricsReport,
    /// Lowest validation score seen so far.
    pub best_score: Option<f64>,
    pub logs: Vec<EpochLog>,
}

const PARAM: &str = "param/";
const MOMENT1: &str = "adam_m/";
const MOMENT2: &str = "adam_v/";

impl<S: Scalar> Checkpoint<S> {
    /// Writes `<stem>.bin` and `<stem>.json`.
    pub fn save(&self, stem: &Path) -> Result<()> {
        let meta = json!({
            "kind": "checkpoint",
            "model": self.model,
            "train": self.train,
            "maxima": self.maxima,
            "normalizer": self.normalizer,
            "epoch": self.epoch,
            "step": self.optimizer.step,
            "val": self.val,
            "best_score": self.best_score,
            "logs": self.logs,
        });
        let mut c = Container::new(meta);
        let f64s = |t: &Tensor<S>| t.data().iter().map(|v| v.as_f64()).collect::<Vec<_>>();
        for (prefix, tensors) in
            [(PARAM, self.params.tensors()), (MOMENT1, &self.optimizer.m[..]), (MOMENT2, &self.optimizer.v[..])]
        {
            for (spec, t) in self.params.specs().iter().zip(tensors) {
                c.push(format!("{prefix}{}", spec.name), spec.shape.clone(), f64s(t));
            }
        }
        c.write(stem)
    }

    pub fn load(stem: &Path) -> Result<Self> {
        let c = Container::read(stem)?;
        if c.meta["kind"] != "checkpoint" {
            return Err(Error::Format(format!("{} is not a checkpoint", stem.display())));
        }
        let field = |k: &str| c.meta.get(k).cloned().ok_or_else(|| Error::Format(format!("checkpoint lacks `{k}`")));
        let model: ModelConfig = serde_json::from_value(field("model")?)?;
        let maxima: GraphMaxima = serde_json::from_value(field("maxima")?)?;
        let part = |prefix: &str| Container {
            tensors: c
                .tensors
                .iter()
                .filter_map(|(n, s, d)| n.strip_prefix(prefix).map(|n| (n.to_string(), s.clone(), d.clone())))
                .collect(),
            meta: serde_json::Value::Null,
        };
        let params = ParameterSet::<S>::from_container(&part(PARAM), &model, &maxima)?;
        let m = ParameterSet::<S>::from_container(&part(MOMENT1), &model, &maxima)?;
        let v = ParameterSet::<S>::from_container(&part(MOMENT2), &model, &maxima)?;
        Ok(Self {
            params,
            optimizer: OptimizerState {
                m: m.tensors().to_vec(),
                v: v.tensors().to_vec(),
                step: serde_json::from_value(field("step")?)?,
            },
            model,
            train: serde_json::from_value(field("train")?)?,
            maxima,
            normalizer: serde_json::from_value(field("normalizer")?)?,
            epoch: serde_json::from_value(field("epoch")?)?,
            val: serde_json::from_value(field("val")?)?,
            best_score: serde_json::from_value(field("best_score")?)?,
            logs: serde_json::from_value(field("logs")?)?,
        })
    }
}

/// Where the trainer writes `best`, `last` and `log.csv` as it goes.
pub struct TrainOutput {
    pub dir: PathBuf,
}

impl TrainOutput {
    pub fn best(&self) -> PathBuf {
        self.dir.join("best")
    }

    pub fn last(&self) -> PathBuf {
        self.dir.join("last")
    }

    pub fn log(&self) -> PathBuf {
        self.dir.join("log.csv")
    }
}

pub struct TrainOutcome<S> {
    pub best: Checkpoint<S>,
    pub last: Checkpoint<S>,
}

/// Per-sample result: Huber sum, masked count and gradients.
type SampleGrad<S> = (f64, usize, Vec<Option<Tensor<S>>>);

/// Random source for dropout in one sample of one optimizer step.
fn dropout_rng(seed: u64, step: u64, slot: usize) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&step.to_le_bytes());
    key[16..24].copy_from_slice(&(slot as u64).to_le_bytes());
    key[24..].copy_from_slice(b"dropout\0");
    ChaCha8Rng::from_seed(key)
}

fn sample_gradient<S: Scalar>(
    model: &TGraphormer,
    params: &ParameterSet<S>,
    windows: &WindowSet,
    index: usize,
    delta: f64,
    mut rng: ChaCha8Rng,
) -> Result<SampleGrad<S>> {
    let sample = windows.sample(index);
    let mask = sample.target_mask();
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Ok((0.0, 0, vec![None; params.len()]));
    }
    let target: Vec<S> = sample.y.data().iter().map(|&v| S::lit(v)).collect();
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, params, true);
    let mut pass = Pass { training: true, rng: Some(&mut rng), trace: None };
    let out = model.forward(&mut tape, &bound, &sample.x, &mut pass)?;
    let loss = tape.huber_sum(out, &target, &mask, S::lit(delta))?;
    let value = tape.value(loss).item().as_f64();
    tape.backward(loss)?;
    let grads = bound.vars().iter().map(|&v| tape.take_grad(v)).collect();
    Ok((value, count, grads))
}

/// Trains from scratch, or from `resume`, and returns the best and final checkpoints.
pub fn train<S: Scalar>(
    model: &TGraphormer,
    cfg: &TrainConfig,
    train_set: &WindowSet,
    val_set: &WindowSet,
    resume: Option<Checkpoint<S>>,
    output: Option<&TrainOutput>,
) -> Result<TrainOutcome<S>> {
    train_until(model, cfg, train_set, val_set, resume, output, None)
}

/// Like [`train`], but returns once `stop_epoch` epochs have completed.
/// The schedule still spans the whole plan, so resuming the returned
/// checkpoint finishes the same run.
pub fn train_until<S: Scalar>(
    model: &TGraphormer,
    cfg: &TrainConfig,
    train_set: &WindowSet,
    val_set: &WindowSet,
    resume: Option<Checkpoint<S>>,
    output: Option<&TrainOutput>,
    stop_epoch: Option<usize>,
) -> Result<TrainOutcome<S>> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(config_err!("training and validation splits need at least one window"));
    }
    let net = model.with_dropout(cfg.dropout)?;
    let layers = model.config().layers;
    let (per_epoch, total) = cfg.plan(train_set.len());
    let epochs_to_run = total.div_ceil(per_epoch);
    let stop = stop_epoch.map_or(epochs_to_run, |s| s.min(epochs_to_run));

    let mut last = None;
    let (mut params, mut opt, start_epoch, mut best_score, mut logs, mut best) = match resume {
        Some(ck) => {
            if ck.model != *model.config() || ck.maxima != model.maxima() {
                return Err(config_err!("checkpoint was trained with a different model or graph"));
            }
            let best = match output.map(TrainOutput::best) {
                Some(p) if crate::io::json_path(&p).exists() => Checkpoint::<S>::load(&p)?,
                _ => ck.clone(),
            };
            last = Some(ck.clone());
            (ck.params, ck.optimizer, ck.epoch, ck.best_score, ck.logs, Some(best))
        }
        None => {
            let params = model.init_parameters::<S>(cfg.seed);
            let opt = OptimizerState::new(&params);
            (params, opt, 0, None, Vec::new(), None)
        }
    };
    let scales = layer_lr_scales(&params, layers, cfg.layer_decay);
    let mut step = opt.step as usize;

    for epoch in start_epoch..stop {
        let order = shuffled_order(train_set.len(), cfg.seed, epoch as u64);
        let (mut loss_sum, mut loss_count) = (0.0, 0usize);
        let mut lr = 0.0;
        for chunk in order.chunks(cfg.effective_batch()) {
            if step >= total {
                break;
            }
            lr = cfg.lr_at_step(step, total);
            let mut acc: Vec<Tensor<S>> = params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
            let (mut batch_loss, mut batch_count) = (0.0, 0usize);
            let mut slot = 0;
            for micro in chunk.chunks(cfg.batch_size) {
                let results: Vec<Result<SampleGrad<S>>> = micro
                    .par_iter()
                    .enumerate()
                    .map(|(k, &i)| {
                        let rng = dropout_rng(cfg.seed, step as u64, slot + k);
                        sample_gradient(&net, &params, train_set, i, cfg.huber_delta, rng)
                    })
                    .collect();
                slot += micro.len();
                for r in results {
                    let (l, c, grads) = r?;
                    batch_loss += l;
                    batch_count += c;
                    for (a, g) in acc.iter_mut().zip(grads) {
                        if let Some(g) = g {
                            a.data_mut().iter_mut().zip(g.data()).for_each(|(x, &y)| *x += y);
                        }
                    }
                }
            }
            if !batch_loss.is_finite() {
                return Err(Error::Numeric(format!("loss became {batch_loss} at step {step} (epoch {epoch})")));
            }
            if batch_count == 0 {
                step += 1;
                continue;
            }
            let inv = S::lit(1.0 / batch_count as f64);
            acc.iter_mut().for_each(|g| g.data_mut().iter_mut().for_each(|v| *v *= inv));
            clip_global_norm(&mut acc, cfg.clip_norm)
                .map_err(|e| Error::Numeric(format!("step {step} (epoch {epoch}): {e}")))?;
            adamw_step(&mut params, &acc, &mut opt, lr, &scales, cfg.weight_decay)?;
            loss_sum += batch_loss;
            loss_count += batch_count;
            step += 1;
        }

        let val = evaluate(model, &params, val_set, cfg.val_limit)?;
        let score = cfg.score(&val);
        if !score.is_finite() {
            return Err(Error::Numeric(format!("validation MAE is {score} after epoch {epoch}")));
        }
        let vm = val.last();
        let row = EpochLog {
            epoch,
            train_loss: loss_sum / loss_count.max(1) as f64,
            val_mae: vm.mae,
            val_rmse: vm.rmse,
            val_mape: vm.mape,
            lr,
        };
        info!(
            "epoch {epoch}: train loss {:.4}, val MAE {:.4}, lr {:.3e}, step {step}/{total}",
            row.train_loss, row.val_mae, row.lr
        );
        logs.push(row);
        let improved = best_score.is_none_or(|b| score < b);
        if improved {
            best_score = Some(score);
        }
        let ck = Checkpoint {
            params: params.clone(),
            optimizer: opt.clone(),
            model: model.config().clone(),
            train: cfg.clone(),
            maxima: model.maxima(),
            normalizer: model.normalizer(),
            epoch: epoch + 1,
            val,
            best_score,
            logs: logs.clone(),
        };
        if let Some(out) = output {
            std::fs::create_dir_all(&out.dir)?;
            if improved {
                ck.save(&out.best())?;
            }
            ck.save(&out.last())?;
            write_log_csv(&out.log(), &logs)?;
        }
        if improved {
            best = Some(ck.clone());
        }
        last = Some(ck);
    }
    match (best, last) {
        (Some(best), Some(last)) => Ok(TrainOutcome { best, last }),
        _ => Err(config_err!("no training epochs were run")),
    }
}
