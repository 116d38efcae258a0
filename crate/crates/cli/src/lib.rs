//! Command implementations behind the `st-graphormer` binary.
//!
//! Every command reads one JSON [`RunConfig`] and writes under its output
//! directory:
//!
//! ```text
//! <out>/data/       series.csv, distances.csv      (synth)
//! <out>/prepared/   manifest, graph, split archives (prepare)
//! <out>/train/      best, last, log.csv            (train)
//! <out>/eval/       <split>.json, <split>.csv      (eval)
//! <out>/attend/     node_node.csv, time_time.csv   (attend)
//! <out>/ablate/     <variant>/..., <variant>.json  (ablate)
//! ```

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use st_graphormer::dataset::{read_series_csv, write_series_csv, SplitSpec};
use st_graphormer::eval::{
    attention_heatmaps, evaluate, persistence_report, relative_change, train_and_test, AblationReport,
    MetricsReport, Variant,
};
use st_graphormer::graphprep::{read_distance_csv, read_id_map, GraphSpec};
use st_graphormer::model::{AttentionTrace, EncodingFlags, ModelConfig, Preset, TGraphormer, TokenMode};
use st_graphormer::pipeline::{prepare, Prepared};
use st_graphormer::synth::{generate, SynthConfig};
use st_graphormer::training::{train, Checkpoint, TrainConfig, TrainOutput};
use st_graphormer::{Error, Result, Scalar};

/// Scalar type for model math.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Series CSV: timestamp column plus one column per sensor.
    pub series: Option<PathBuf>,
    /// Distance CSV with `from,to,dist` columns.
    pub distances: Option<PathBuf>,
    /// Optional sensor id list mapping labels in `distances` to columns.
    pub ids: Option<PathBuf>,
}

/// Preset plus optional overrides.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub preset: Preset,
    pub d_model: Option<usize>,
    pub layers: Option<usize>,
    pub heads: Option<usize>,
    pub ffn_ratio: Option<usize>,
    pub token_mode: TokenMode,
    pub encodings: EncodingFlags,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            preset: Preset::Micro,
            d_model: None,
            layers: None,
            heads: None,
            ffn_ratio: None,
            token_mode: TokenMode::Cls,
            encodings: EncodingFlags::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub synth: SynthConfig,
    /// Distance cutoff; every listed pair is kept when absent.
    pub kappa: Option<f64>,
    pub directed: bool,
    pub split: SplitSpec,
    pub context: usize,
    pub horizon: usize,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub precision: Precision,
    pub output: PathBuf,
    /// Overrides `train.seed`.
    pub seed: Option<u64>,
    /// Split scored by `eval` and traced by `attend`.
    pub eval_split: String,
    /// Windows traced by `attend`.
    pub num_samples: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: DataConfig::default(),
            synth: SynthConfig::default(),
            kappa: None,
            directed: true,
            split: SplitSpec::TRAFFIC_SPEED,
            context: 12,
            horizon: 12,
            model: ModelSection::default(),
            train: TrainConfig::default(),
            precision: Precision::F64,
            output: PathBuf::from("run"),
            seed: None,
            eval_split: "test".into(),
            num_samples: 16,
        }
    }
}

fn config_error(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

impl RunConfig {
    /// Reads a config; relative paths inside it resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| config_error(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| config_error(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut cfg.output);
        for p in [&mut cfg.data.series, &mut cfg.data.distances, &mut cfg.data.ids].into_iter().flatten() {
            resolve(p);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.horizon != self.context {
            return Err(config_error(format!(
                "horizon T = {} must equal context T' = {}: each context token predicts one horizon step",
                self.horizon, self.context
            )));
        }
        if self.num_samples == 0 {
            return Err(config_error("num_samples must be positive"));
        }
        if let Some(k) = self.kappa {
            if !(k >= 0.0) {
                return Err(config_error(format!("kappa must be nonnegative, got {k}")));
            }
        }
        self.split.validate()?;
        self.train.validate()?;
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig { seed: self.seed.unwrap_or(self.train.seed), ..self.train.clone() }
    }

    /// Model configuration for the prepared data; dropout follows `train.dropout`.
    pub fn model_config(&self, prep: &Prepared, ablate: Option<Variant>) -> Result<ModelConfig> {
        let m = &self.model;
        let mut cfg = ModelConfig::from_preset(m.preset, self.context, self.horizon, prep.manifest.num_nodes, prep.manifest.channels);
        cfg.d_model = m.d_model.unwrap_or(cfg.d_model);
        cfg.layers = m.layers.unwrap_or(cfg.layers);
        cfg.heads = m.heads.unwrap_or(cfg.heads);
        cfg.ffn_ratio = m.ffn_ratio.unwrap_or(cfg.ffn_ratio);
        cfg.token_mode = m.token_mode;
        cfg.encodings = m.encodings;
        cfg.dropout = self.train.dropout;
        cfg.directed = prep.manifest.directed;
        if prep.manifest.context != self.context || prep.manifest.horizon != self.horizon {
            return Err(config_error("prepared windows were built with a different context or horizon; rerun prepare"));
        }
        let cfg = ablate.map_or(cfg.clone(), |v| v.apply(&cfg));
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn data_dir(&self) -> PathBuf {
        self.output.join("data")
    }

    pub fn prepared_dir(&self) -> PathBuf {
        self.output.join("prepared")
    }

    pub fn train_output(&self) -> TrainOutput {
        TrainOutput { dir: self.output.join("train") }
    }

    fn series_path(&self) -> PathBuf {
        self.data.series.clone().unwrap_or_else(|| self.data_dir().join("series.csv"))
    }

    fn distances_path(&self) -> PathBuf {
        self.data.distances.clone().unwrap_or_else(|| self.data_dir().join("distances.csv"))
    }
}

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| config_error(format!("cannot open {}: {e}", path.display())))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

/// Writes the synthetic series and distance table where `prepare` looks for them.
pub fn cmd_synth(cfg: &RunConfig) -> Result<()> {
    let d = generate(&cfg.synth)?;
    write_series_csv(create(&cfg.series_path())?, &d.series)?;
    let mut w = csv::Writer::from_writer(create(&cfg.distances_path())?);
    w.write_record(["from", "to", "dist"])?;
    for e in &d.edges {
        w.serialize((e.from, e.to, e.dist))?;
    }
    w.flush()?;
    log::info!("wrote {} readings over {} sensors to {}", d.series.len(), d.series.num_nodes(), cfg.data_dir().display());
    Ok(())
}

pub fn cmd_prepare(cfg: &RunConfig) -> Result<Prepared> {
    let series = read_series_csv(open(&cfg.series_path())?)?;
    let ids = match &cfg.data.ids {
        Some(p) => Some(read_id_map(open(p)?)?),
        None => None,
    };
    let edges = read_distance_csv(open(&cfg.distances_path())?, ids.as_ref())?;
    let graph = GraphSpec::new(series.num_nodes(), cfg.directed, edges, cfg.kappa.unwrap_or(f64::MAX))?;
    let prep = prepare(&series, &graph, &cfg.split, cfg.context, cfg.horizon, cfg.train_config().seed)?;
    prep.save(&cfg.prepared_dir())?;
    log::info!(
        "prepared {} sensors, {} edges, C = {}, windows {:?}",
        prep.manifest.num_nodes,
        prep.manifest.edges,
        prep.manifest.channels,
        prep.manifest.windows
    );
    Ok(prep)
}

fn load_prepared(cfg: &RunConfig) -> Result<Prepared> {
    Prepared::load(&cfg.prepared_dir())
}

/// Accepts `dir/best`, `dir/best.json` or `dir/best.bin`.
pub fn checkpoint_stem(path: &Path) -> PathBuf {
    match path.extension().and_then(|e| e.to_str()) {
        Some("json" | "bin") => path.with_extension(""),
        _ => path.to_path_buf(),
    }
}

fn build_model(cfg: &ModelConfig, prep: &Prepared) -> Result<TGraphormer> {
    TGraphormer::new(cfg.clone(), &prep.degrees, &prep.spd, prep.manifest.normalizer)
}

fn train_typed<S: Scalar>(cfg: &RunConfig, ablate: Option<Variant>, resume: Option<&Path>) -> Result<()> {
    let prep = load_prepared(cfg)?;
    let model = build_model(&cfg.model_config(&prep, ablate)?, &prep)?;
    let resume = resume.map(|p| Checkpoint::<S>::load(&checkpoint_stem(p))).transpose()?;
    let out = cfg.train_output();
    let res = train::<S>(&model, &cfg.train_config(), &prep.train, &prep.val, resume, Some(&out))?;
    log::info!("best validation MAE {:.4} after epoch {}", res.best.val.last().mae, res.best.epoch);
    Ok(())
}

pub fn cmd_train(cfg: &RunConfig, ablate: Option<Variant>, resume: Option<&Path>) -> Result<()> {
    match cfg.precision {
        Precision::F32 => train_typed::<f32>(cfg, ablate, resume),
        Precision::F64 => train_typed::<f64>(cfg, ablate, resume),
    }
}

fn load_for_eval<S: Scalar>(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<(Prepared, TGraphormer, Checkpoint<S>)> {
    let prep = load_prepared(cfg)?;
    let path = checkpoint.map_or_else(|| cfg.train_output().best(), checkpoint_stem);
    let ck = Checkpoint::<S>::load(&path)?;
    if ck.model.num_nodes != prep.manifest.num_nodes
        || ck.model.in_channels != prep.manifest.channels
        || ck.model.context != prep.manifest.context
        || ck.maxima != prep.manifest.maxima
    {
        return Err(Error::Shape(format!("checkpoint {} does not match the prepared archives", path.display())));
    }
    let model = build_model(&ck.model, &prep)?;
    Ok((prep, model, ck))
}

fn eval_typed<S: Scalar>(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<MetricsReport> {
    let (prep, model, ck) = load_for_eval::<S>(cfg, checkpoint)?;
    let report = evaluate(&model, &ck.params, prep.split(&cfg.eval_split)?, None)?;
    report.write(&cfg.output.join("eval").join(&cfg.eval_split))?;
    let persistence = persistence_report(prep.split(&cfg.eval_split)?)?;
    persistence.write(&cfg.output.join("eval").join(format!("{}_persistence", cfg.eval_split)))?;
    for h in &report.horizons {
        log::info!(
            "{} horizon {}: MAE {:.4} RMSE {:.4} MAPE {:.2}%",
            cfg.eval_split,
            h.horizon,
            h.metrics.mae,
            h.metrics.rmse,
            h.metrics.mape
        );
    }
    Ok(report)
}

pub fn cmd_eval(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<MetricsReport> {
    match cfg.precision {
        Precision::F32 => eval_typed::<f32>(cfg, checkpoint),
        Precision::F64 => eval_typed::<f64>(cfg, checkpoint),
    }
}

fn attend_typed<S: Scalar>(cfg: &RunConfig, checkpoint: Option<&Path>, per_layer: bool) -> Result<()> {
    let (prep, model, ck) = load_for_eval::<S>(cfg, checkpoint)?;
    let windows = prep.split(&cfg.eval_split)?;
    let count = cfg.num_samples.min(windows.len());
    let mut traces = Vec::with_capacity(count);
    for i in 0..count {
        let mut trace = AttentionTrace::default();
        model.predict_traced(&ck.params, &windows.sample(i).x, Some(&mut trace))?;
        traces.push(trace);
    }
    let bundle = attention_heatmaps(&traces, model.layout(), per_layer)?;
    bundle.write(&cfg.output.join("attend"))?;
    log::info!("aggregated attention over {count} {} windows", cfg.eval_split);
    Ok(())
}

pub fn cmd_attend(cfg: &RunConfig, checkpoint: Option<&Path>, per_layer: bool) -> Result<()> {
    match cfg.precision {
        Precision::F32 => attend_typed::<f32>(cfg, checkpoint, per_layer),
        Precision::F64 => attend_typed::<f64>(cfg, checkpoint, per_layer),
    }
}

fn ablate_typed<S: Scalar>(cfg: &RunConfig, variants: &[Variant]) -> Result<Vec<AblationReport>> {
    let prep = load_prepared(cfg)?;
    let tc = cfg.train_config();
    let dir = cfg.output.join("ablate");
    let base_cfg = cfg.model_config(&prep, None)?;
    let base_out = TrainOutput { dir: dir.join("base") };
    let (_, base) = train_and_test::<S>(&base_cfg, &tc, &prep, Some(&base_out))?;
    base.write(&base_out.dir.join("test"))?;
    let mut reports = Vec::new();
    for &v in variants {
        let out = TrainOutput { dir: dir.join(v.id()) };
        let (_, report) = train_and_test::<S>(&v.apply(&base_cfg), &tc, &prep, Some(&out))?;
        report.write(&out.dir.join("test"))?;
        let rep = AblationReport { variant: v, relative: relative_change(&base, &report), base: base.clone(), report };
        std::fs::write(dir.join(format!("{}.json", v.id())), serde_json::to_string_pretty(&rep)? + "\n")?;
        if let Some(r) = rep.relative.last() {
            log::info!("{}: MAE change {:+.1}% at horizon {}", v.id(), 100.0 * r.mae, r.horizon);
        }
        reports.push(rep);
    }
    Ok(reports)
}

/// Trains the base model and each variant (all when `only` is `None`) and
/// writes one comparison per variant.
pub fn cmd_ablate(cfg: &RunConfig, only: Option<Variant>) -> Result<Vec<AblationReport>> {
    let variants: Vec<Variant> = only.map_or_else(|| Variant::ALL.to_vec(), |v| vec![v]);
    match cfg.precision {
        Precision::F32 => ablate_typed::<f32>(cfg, &variants),
        Precision::F64 => ablate_typed::<f64>(cfg, &variants),
    }
}

/// Process exit code for a failed command.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Numeric(_) => 3,
        _ => 2,
    }
}
