//! Time-independent structure of the sensor graph: kernel adjacency,
//! degrees, hop distances, and the token-pair bias bucket table.

use std::collections::{HashMap, VecDeque};
use std::io::{Read, Write};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, shape_err, Error, Result};
use crate::model::layout::{Token, TokenLayout};

/// Hop count sentinel for pairs with no connecting path.
pub const UNREACHABLE: u32 = u32::MAX;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub from: usize,
    pub to: usize,
    pub dist: f64,
}

/// Sensor network description before kernelization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphSpec {
    pub num_nodes: usize,
    pub directed: bool,
    pub edges: Vec<Edge>,
    /// Distance threshold beyond which no edge is kept.
    pub kappa: f64,
    /// Population standard deviation of the listed distances.
    pub sigma: f64,
}

impl GraphSpec {
    /// Builds a spec with `sigma` computed from `edges`.
    pub fn new(num_nodes: usize, directed: bool, edges: Vec<Edge>, kappa: f64) -> Result<Self> {
        let sigma = distance_std(&edges)?;
        let spec = Self { num_nodes, directed, edges, kappa, sigma };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_nodes == 0 {
            return Err(config_err!("graph has no nodes"));
        }
        if !(self.kappa >= 0.0) || !self.kappa.is_finite() {
            return Err(config_err!("kappa must be a finite nonnegative number, got {}", self.kappa));
        }
        for e in &self.edges {
            if e.from >= self.num_nodes || e.to >= self.num_nodes {
                return Err(config_err!("edge {}->{} outside 0..{}", e.from, e.to, self.num_nodes));
            }
            if !e.dist.is_finite() {
                return Err(config_err!("non-finite distance on edge {}->{}", e.from, e.to));
            }
            if e.dist < 0.0 {
                return Err(config_err!("negative distance on edge {}->{}", e.from, e.to));
            }
        }
        let sigma = distance_std(&self.edges)?;
        if (sigma - self.sigma).abs() > 1e-9 * sigma.max(1.0) {
            return Err(config_err!("sigma {} does not match distance std {}", self.sigma, sigma));
        }
        Ok(())
    }
}

fn distance_std(edges: &[Edge]) -> Result<f64> {
    if let Some(e) = edges.iter().find(|e| !e.dist.is_finite()) {
        return Err(config_err!("non-finite distance on edge {}->{}", e.from, e.to));
    }
    if edges.is_empty() {
        return Err(config_err!("no distances provided"));
    }
    let n = edges.len() as f64;
    let mean = edges.iter().map(|e| e.dist).sum::<f64>() / n;
    let var = edges.iter().map(|e| (e.dist - mean).powi(2)).sum::<f64>() / n;
    let sigma = var.sqrt();
    if sigma == 0.0 {
        return Err(config_err!("all distances are identical; kernel width would be zero"));
    }
    Ok(sigma)
}

/// Reads `from,to,dist` rows. With `ids`, endpoint labels are looked up in
/// that mapping; otherwise they must be 0-based integers.
pub fn read_distance_csv<R: Read>(reader: R, ids: Option<&HashMap<String, usize>>) -> Result<Vec<Edge>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| {
        headers.iter().position(|h| h == name).ok_or_else(|| Error::Format(format!("missing `{name}` column")))
    };
    let (cf, ct, cd) = (col("from")?, col("to")?, col("dist")?);
    let resolve = |s: &str| -> Result<usize> {
        match ids {
            Some(map) => map.get(s).copied().ok_or_else(|| Error::Format(format!("unknown sensor id `{s}`"))),
            None => s.parse().map_err(|_| Error::Format(format!("bad node index `{s}`"))),
        }
    };
    let mut edges = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let dist: f64 = rec[cd].parse().map_err(|_| Error::Format(format!("bad distance `{}`", &rec[cd])))?;
        edges.push(Edge { from: resolve(&rec[cf])?, to: resolve(&rec[ct])?, dist });
    }
    Ok(edges)
}

/// Reads a single-column `id` file; row order defines the node index.
pub fn read_id_map<R: Read>(reader: R) -> Result<HashMap<String, usize>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let mut map = HashMap::new();
    for (i, rec) in rdr.records().enumerate() {
        let id = rec?.get(0).unwrap_or_default().to_string();
        if map.insert(id.clone(), i).is_some() {
            return Err(Error::Format(format!("duplicate sensor id `{id}`")));
        }
    }
    Ok(map)
}

/// Dense `N x N` kernel weights in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightedAdjacency {
    n: usize,
    w: Vec<f64>,
}

impl WeightedAdjacency {
    pub fn from_dense(n: usize, w: Vec<f64>) -> Result<Self> {
        if w.len() != n * n {
            return Err(shape_err!("adjacency of {} entries for {} nodes", w.len(), n));
        }
        if w.iter().any(|&x| !(0.0..=1.0).contains(&x)) {
            return Err(config_err!("adjacency entries must lie in [0, 1]"));
        }
        Ok(Self { n, w })
    }

    pub fn num_nodes(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.w[i * self.n + j]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.w
    }

    fn has_edge(&self, i: usize, j: usize) -> bool {
        i != j && self.get(i, j) > 0.0
    }

    pub fn edge_count(&self) -> usize {
        (0..self.n).flat_map(|i| (0..self.n).map(move |j| (i, j))).filter(|&(i, j)| self.has_edge(i, j)).count()
    }
}

/// Thresholded Gaussian kernel `exp(-d^2 / sigma^2)` for `d <= kappa`.
///
/// Undirected specs write each listed pair in both directions. A pair
/// listed more than once keeps its shortest distance.
pub fn build_adjacency(spec: &GraphSpec) -> Result<WeightedAdjacency> {
    spec.validate()?;
    let n = spec.num_nodes;
    let mut dist = vec![f64::INFINITY; n * n];
    for e in &spec.edges {
        let mut set = |i: usize, j: usize| {
            let slot = &mut dist[i * n + j];
            *slot = slot.min(e.dist);
        };
        set(e.from, e.to);
        if !spec.directed {
            set(e.to, e.from);
        }
    }
    let s2 = spec.sigma * spec.sigma;
    let w = dist.iter().map(|&d| if d <= spec.kappa { (-d * d / s2).exp() } else { 0.0 }).collect();
    Ok(WeightedAdjacency { n, w })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DegreeVector {
    pub in_deg: Vec<usize>,
    pub out_deg: Vec<usize>,
    pub max_in: usize,
    pub max_out: usize,
}

/// Degrees of the binarized adjacency with self-loops excluded.
pub fn compute_degrees(w: &WeightedAdjacency) -> DegreeVector {
    let n = w.n;
    let mut in_deg = vec![0; n];
    let mut out_deg = vec![0; n];
    for i in 0..n {
        for j in 0..n {
            if w.has_edge(i, j) {
                out_deg[i] += 1;
                in_deg[j] += 1;
            }
        }
    }
    let max_in = in_deg.iter().copied().max().unwrap_or(0);
    let max_out = out_deg.iter().copied().max().unwrap_or(0);
    DegreeVector { in_deg, out_deg, max_in, max_out }
}

/// All-pairs hop counts; `UNREACHABLE` where no path exists.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SpdMatrix {
    n: usize,
    spd: Vec<u32>,
    max_spd: u32,
}

impl SpdMatrix {
    pub fn from_dense(n: usize, spd: Vec<u32>) -> Result<Self> {
        if spd.len() != n * n {
            return Err(shape_err!("SPD matrix of {} entries for {} nodes", spd.len(), n));
        }
        let max_spd = spd.iter().copied().filter(|&s| s != UNREACHABLE).max().unwrap_or(0);
        Ok(Self { n, spd, max_spd })
    }

    pub fn num_nodes(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> u32 {
        self.spd[i * self.n + j]
    }

    pub fn hops(&self, i: usize, j: usize) -> Option<u32> {
        Some(self.get(i, j)).filter(|&s| s != UNREACHABLE)
    }

    pub fn max_spd(&self) -> u32 {
        self.max_spd
    }

    pub fn as_slice(&self) -> &[u32] {
        &self.spd
    }

    pub fn num_unreachable(&self) -> usize {
        self.spd.iter().filter(|&&s| s == UNREACHABLE).count()
    }
}

/// Breadth-first search from every source over edges with positive weight.
pub fn compute_spd(w: &WeightedAdjacency) -> SpdMatrix {
    let n = w.n;
    let neighbours: Vec<Vec<usize>> = (0..n).map(|i| (0..n).filter(|&j| w.has_edge(i, j)).collect()).collect();
    let rows: Vec<Vec<u32>> = (0..n)
        .into_par_iter()
        .map(|src| {
            let mut row = vec![UNREACHABLE; n];
            row[src] = 0;
            let mut queue = VecDeque::from([src]);
            while let Some(u) = queue.pop_front() {
                for &v in &neighbours[u] {
                    if row[v] == UNREACHABLE {
                        row[v] = row[u] + 1;
                        queue.push_back(v);
                    }
                }
            }
            row
        })
        .collect();
    SpdMatrix::from_dense(n, rows.concat()).expect("n x n")
}

/// Bucket id of every ordered token pair.
///
/// Buckets `0..=max_spd` are hop counts, followed by one bucket for
/// unreachable pairs and one for any pair that involves a special token.
#[derive(Clone, Debug)]
pub struct SpatialBiasIndex {
    len: usize,
    buckets: Arc<[u32]>,
    num_buckets: usize,
    unreachable: u32,
    special: u32,
}

impl SpatialBiasIndex {
    pub fn num_buckets(&self) -> usize {
        self.num_buckets
    }

    pub fn unreachable_bucket(&self) -> u32 {
        self.unreachable
    }

    pub fn special_bucket(&self) -> u32 {
        self.special
    }

    pub fn seq_len(&self) -> usize {
        self.len
    }

    pub fn bucket(&self, p: usize, q: usize) -> u32 {
        self.buckets[p * self.len + q]
    }

    /// Row-major `l x l` table shared with attention kernels.
    pub fn table(&self) -> Arc<[u32]> {
        self.buckets.clone()
    }
}

/// Number of bias buckets for a graph whose largest finite hop count is `max_spd`.
pub fn num_bias_buckets(max_spd: u32) -> usize {
    max_spd as usize + 3
}

pub fn build_bias_index(spd: &SpdMatrix, layout: &TokenLayout) -> Result<SpatialBiasIndex> {
    if layout.nodes() != spd.n {
        return Err(shape_err!("layout has {} nodes, SPD matrix {}", layout.nodes(), spd.n));
    }
    let unreachable = spd.max_spd + 1;
    let special = spd.max_spd + 2;
    let l = layout.len();
    let nodes: Vec<Option<usize>> = layout.tokens().iter().map(|t: &Token| t.node()).collect();
    let mut buckets = Vec::with_capacity(l * l);
    for p in &nodes {
        for q in &nodes {
            buckets.push(match (p, q) {
                (Some(i), Some(j)) => spd.hops(*i, *j).unwrap_or(unreachable),
                _ => special,
            });
        }
    }
    Ok(SpatialBiasIndex {
        len: l,
        buckets: buckets.into(),
        num_buckets: num_bias_buckets(spd.max_spd),
        unreachable,
        special,
    })
}

/// Writes a row-major matrix as CSV without a header.
pub fn write_matrix_csv<W: Write, T: std::fmt::Display>(mut out: W, n_cols: usize, data: &[T]) -> Result<()> {
    for row in data.chunks(n_cols.max(1)) {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        writeln!(out, "{}", line.join(","))?;
    }
    Ok(())
}

/// SPD matrix as CSV with `-1` for unreachable pairs.
pub fn write_spd_csv<W: Write>(out: W, spd: &SpdMatrix) -> Result<()> {
    let vals: Vec<i64> = spd.spd.iter().map(|&s| if s == UNREACHABLE { -1 } else { s as i64 }).collect();
    write_matrix_csv(out, spd.n, &vals)
}
