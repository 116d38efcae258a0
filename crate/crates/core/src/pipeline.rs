//! Raw series + sensor graph to normalized window archives.

use std::io::BufWriter;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::{
    chronological_split, impute_historical_average, make_windows, slots_per_day, Normalizer, RawSeries, SplitSpec,
    WindowSet,
};
use crate::error::{config_err, shape_err, Error, Result};
use crate::graphprep::{
    build_adjacency, compute_degrees, compute_spd, write_matrix_csv, write_spd_csv, DegreeVector, GraphSpec, SpdMatrix,
    WeightedAdjacency,
};
use crate::io::Container;
use crate::model::GraphMaxima;

/// Summary written next to the prepared artifacts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrepManifest {
    pub num_nodes: usize,
    pub directed: bool,
    pub kappa: f64,
    pub sigma: f64,
    pub edges: usize,
    pub context: usize,
    pub horizon: usize,
    /// Input channels: reading plus time-of-day one-hot.
    pub channels: usize,
    pub interval_minutes: u32,
    pub normalizer: Normalizer,
    pub maxima: GraphMaxima,
    pub split_rows: [usize; 3],
    pub windows: [usize; 3],
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct Prepared {
    pub manifest: PrepManifest,
    pub adjacency: WeightedAdjacency,
    pub degrees: DegreeVector,
    pub spd: SpdMatrix,
    pub train: WindowSet,
    pub val: WindowSet,
    pub test: WindowSet,
}

pub fn prepare(
    series: &RawSeries,
    graph: &GraphSpec,
    split: &SplitSpec,
    context: usize,
    horizon: usize,
    seed: u64,
) -> Result<Prepared> {
    if graph.num_nodes != series.num_nodes() {
        return Err(shape_err!("graph has {} nodes, series {}", graph.num_nodes, series.num_nodes()));
    }
    let adjacency = build_adjacency(graph)?;
    let degrees = compute_degrees(&adjacency);
    let spd = compute_spd(&adjacency);
    if adjacency.edge_count() == 0 {
        log::warn!("kappa {} keeps no edges; every sensor pair is unreachable", graph.kappa);
    }

    let (train_raw, val_raw, test_raw) = chronological_split(series, split, context + horizon)?;
    let imputed = impute_historical_average(&train_raw)?;
    let normalizer = Normalizer::fit(&imputed)?;
    let train = WindowSet::build(&imputed, &train_raw, context, horizon, &normalizer)?;
    let val = make_windows(&val_raw, context, horizon, &normalizer)?;
    let test = make_windows(&test_raw, context, horizon, &normalizer)?;

    let manifest = PrepManifest {
        num_nodes: graph.num_nodes,
        directed: graph.directed,
        kappa: graph.kappa,
        sigma: graph.sigma,
        edges: adjacency.edge_count(),
        context,
        horizon,
        channels: 1 + slots_per_day(series.interval_minutes())?,
        interval_minutes: series.interval_minutes(),
        normalizer,
        maxima: GraphMaxima::from_graph(&degrees, &spd),
        split_rows: [train_raw.len(), val_raw.len(), test_raw.len()],
        windows: [train.len(), val.len(), test.len()],
        seed,
    };
    Ok(Prepared { manifest, adjacency, degrees, spd, train, val, test })
}

pub const SPLITS: [&str; 3] = ["train", "val", "test"];

fn manifest_path(dir: &Path) -> PathBuf {
    dir.join("manifest.json")
}

impl Prepared {
    pub fn split(&self, name: &str) -> Result<&WindowSet> {
        match name {
            "train" => Ok(&self.train),
            "val" => Ok(&self.val),
            "test" => Ok(&self.test),
            other => Err(config_err!("unknown split `{other}`; expected train, val or test")),
        }
    }

    /// Writes the manifest, graph artifacts (binary and CSV) and one
    /// archive per split. Output depends only on the inputs.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let n = self.manifest.num_nodes;
        std::fs::write(manifest_path(dir), serde_json::to_string_pretty(&self.manifest)? + "\n")?;

        let mut graph = Container::new(serde_json::json!({ "kind": "graph", "num_nodes": n }));
        graph.push("adjacency", vec![n, n], self.adjacency.as_slice().to_vec());
        graph.write(&dir.join("graph"))?;

        let create = |name: &str| -> Result<BufWriter<std::fs::File>> {
            Ok(BufWriter::new(std::fs::File::create(dir.join(name))?))
        };
        write_matrix_csv(create("adjacency.csv")?, n, self.adjacency.as_slice())?;
        write_spd_csv(create("spd.csv")?, &self.spd)?;
        let mut deg = csv::Writer::from_writer(create("degrees.csv")?);
        deg.write_record(["node", "in_degree", "out_degree"])?;
        for i in 0..n {
            deg.serialize((i, self.degrees.in_deg[i], self.degrees.out_deg[i]))?;
        }
        deg.flush()?;

        for (name, set) in SPLITS.iter().zip([&self.train, &self.val, &self.test]) {
            set.save(&dir.join(name), name, self.manifest.seed)?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(manifest_path(dir))
            .map_err(|e| config_err!("cannot read {}: {e}; run `prepare` first", manifest_path(dir).display()))?;
        let manifest: PrepManifest = serde_json::from_str(&text)?;
        let graph = Container::read(&dir.join("graph"))?;
        let (shape, w) = graph.require("adjacency")?;
        if shape != [manifest.num_nodes, manifest.num_nodes] {
            return Err(Error::Format("adjacency shape disagrees with the manifest".into()));
        }
        let adjacency = WeightedAdjacency::from_dense(manifest.num_nodes, w.to_vec())?;
        let degrees = compute_degrees(&adjacency);
        let spd = compute_spd(&adjacency);
        let mut sets = SPLITS.iter().map(|s| WindowSet::load(&dir.join(s)));
        let (train, val, test) = (sets.next().expect("3")?, sets.next().expect("3")?, sets.next().expect("3")?);
        for set in [&train, &val, &test] {
            if set.num_nodes() != manifest.num_nodes
                || set.context() != manifest.context
                || set.horizon() != manifest.horizon
                || set.channels() != manifest.channels
            {
                return Err(Error::Format("window archive disagrees with the manifest".into()));
            }
        }
        Ok(Self { manifest, adjacency, degrees, spd, train, val, test })
    }
}
