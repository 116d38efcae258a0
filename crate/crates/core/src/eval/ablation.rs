use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::metrics::{evaluate, MetricsReport};
use crate::error::{config_err, Error, Result};
use crate::model::{ModelConfig, TGraphormer, TokenMode};
use crate::pipeline::Prepared;
use crate::scalar::Scalar;
use crate::training::{train, Checkpoint, TrainConfig, TrainOutput};

/// Single-component changes to a base configuration.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    NoPositional,
    NoCentrality,
    NoSpatial,
    TokenCls,
    TokenGraph,
    TokenNone,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::NoPositional,
        Variant::NoCentrality,
        Variant::NoSpatial,
        Variant::TokenCls,
        Variant::TokenGraph,
        Variant::TokenNone,
    ];

    pub fn id(self) -> &'static str {
        match self {
            Variant::NoPositional => "no_positional",
            Variant::NoCentrality => "no_centrality",
            Variant::NoSpatial => "no_spatial",
            Variant::TokenCls => "token_cls",
            Variant::TokenGraph => "token_graph",
            Variant::TokenNone => "token_none",
        }
    }

    pub fn apply(self, base: &ModelConfig) -> ModelConfig {
        let mut cfg = base.clone();
        match self {
            Variant::NoPositional => cfg.encodings.use_positional = false,
            Variant::NoCentrality => cfg.encodings.use_centrality = false,
            Variant::NoSpatial => cfg.encodings.use_spatial_bias = false,
            Variant::TokenCls => cfg.token_mode = TokenMode::Cls,
            Variant::TokenGraph => cfg.token_mode = TokenMode::Graph,
            Variant::TokenNone => cfg.token_mode = TokenMode::None,
        }
        cfg
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL.into_iter().find(|v| v.id() == s).ok_or_else(|| {
            let ids: Vec<&str> = Variant::ALL.iter().map(|v| v.id()).collect();
            config_err!("unknown ablation variant `{s}`; expected one of {}", ids.join(", "))
        })
    }
}

/// Relative change `(variant - base) / base` at one horizon.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelativeChange {
    pub horizon: usize,
    pub mae: f64,
    pub rmse: f64,
    pub mape: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub variant: Variant,
    pub base: MetricsReport,
    pub report: MetricsReport,
    pub relative: Vec<RelativeChange>,
}

pub fn relative_change(base: &MetricsReport, variant: &MetricsReport) -> Vec<RelativeChange> {
    let rel = |v: f64, b: f64| (v - b) / b;
    base.horizons
        .iter()
        .filter_map(|b| {
            variant.at(b.horizon).map(|v| RelativeChange {
                horizon: b.horizon,
                mae: rel(v.mae, b.metrics.mae),
                rmse: rel(v.rmse, b.metrics.rmse),
                mape: rel(v.mape, b.metrics.mape),
            })
        })
        .collect()
}

/// Trains `cfg` on the prepared splits and scores the best checkpoint on the test split.
pub fn train_and_test<S: Scalar>(
    cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    data: &Prepared,
    output: Option<&TrainOutput>,
) -> Result<(Checkpoint<S>, MetricsReport)> {
    let model = TGraphormer::new(cfg.clone(), &data.degrees, &data.spd, data.manifest.normalizer)?;
    let outcome = train::<S>(&model, train_cfg, &data.train, &data.val, None, output)?;
    let report = evaluate(&model, &outcome.best.params, &data.test, None)?;
    Ok((outcome.best, report))
}

/// Retrains from scratch with `variant` applied (same seed as the base) and
/// compares its test report with `base`, training the base first when absent.
pub fn run_ablation<S: Scalar>(
    base_cfg: &ModelConfig,
    variant: Variant,
    train_cfg: &TrainConfig,
    data: &Prepared,
    base: Option<MetricsReport>,
) -> Result<AblationReport> {
    let base = match base {
        Some(b) => b,
        None => train_and_test::<S>(base_cfg, train_cfg, data, None)?.1,
    };
    let (_, report) = train_and_test::<S>(&variant.apply(base_cfg), train_cfg, data, None)?;
    let relative = relative_change(&base, &report);
    Ok(AblationReport { variant, base, report, relative })
}
