use std::collections::HashMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::config::ModelConfig;
use super::layout::TokenMode;
use crate::error::{shape_err, Error, Result};
use crate::graphprep::{num_bias_buckets, DegreeVector, SpdMatrix};
use crate::io::Container;
use crate::numerics::Tensor;
use crate::scalar::Scalar;

pub const EMBED_STD: f64 = 0.02;

/// Graph-dependent table sizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphMaxima {
    pub max_in: usize,
    pub max_out: usize,
    pub max_spd: u32,
}

impl GraphMaxima {
    pub fn from_graph(degrees: &DegreeVector, spd: &SpdMatrix) -> Self {
        Self { max_in: degrees.max_in, max_out: degrees.max_out, max_spd: spd.max_spd() }
    }

    pub fn num_buckets(&self) -> usize {
        num_bias_buckets(self.max_spd)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InitKind {
    /// Xavier-uniform weight matrix.
    Linear,
    /// Normal(0, 0.02) table.
    Table,
    /// Normal(0, 0.02) with the last two rows (unreachable, special) zeroed.
    SpatialBias,
    Zeros,
    Ones,
}

/// Which learning-rate group a tensor belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    /// Input projection, encodings, special tokens and the bias table.
    Embedding,
    Layer(usize),
    /// Final norm and prediction head.
    Top,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: InitKind,
    pub group: ParamGroup,
}

impl ParamSpec {
    fn new(name: impl Into<String>, shape: &[usize], init: InitKind, group: ParamGroup) -> Self {
        Self { name: name.into(), shape: shape.to_vec(), init, group }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    /// Weight matrices get decoupled weight decay; tables, biases and norms do not.
    pub fn decays(&self) -> bool {
        self.init == InitKind::Linear
    }
}

/// Every tensor of the model, in a fixed order.
pub fn parameter_specs(cfg: &ModelConfig, maxima: &GraphMaxima) -> Vec<ParamSpec> {
    use InitKind::*;
    use ParamGroup::*;
    let d = cfg.d_model;
    let f = cfg.ffn_dim();
    let mut s = vec![ParamSpec::new("embed.w0", &[cfg.in_channels, d], Linear, Embedding)];
    if cfg.directed {
        s.push(ParamSpec::new("embed.z_in", &[maxima.max_in + 1, d], Table, Embedding));
        s.push(ParamSpec::new("embed.z_out", &[maxima.max_out + 1, d], Table, Embedding));
    } else {
        let rows = maxima.max_in.max(maxima.max_out) + 1;
        s.push(ParamSpec::new("embed.z", &[rows, d], Table, Embedding));
    }
    s.push(ParamSpec::new("embed.pos", &[cfg.seq_len(), d], Table, Embedding));
    match cfg.token_mode {
        TokenMode::None => {}
        TokenMode::Cls => s.push(ParamSpec::new("embed.cls", &[1, d], Table, Embedding)),
        TokenMode::Graph => s.push(ParamSpec::new("embed.graph", &[1, d], Table, Embedding)),
    }
    s.push(ParamSpec::new("spatial_bias", &[maxima.num_buckets(), cfg.heads], SpatialBias, Embedding));
    for j in 0..cfg.layers {
        let g = Layer(j);
        let p = |n: &str| format!("enc.{j}.{n}");
        s.push(ParamSpec::new(p("ln1.gamma"), &[d], Ones, g));
        s.push(ParamSpec::new(p("ln1.beta"), &[d], Zeros, g));
        for w in ["wq", "wk", "wv", "wo"] {
            s.push(ParamSpec::new(p(&format!("attn.{w}")), &[d, d], Linear, g));
        }
        s.push(ParamSpec::new(p("ln2.gamma"), &[d], Ones, g));
        s.push(ParamSpec::new(p("ln2.beta"), &[d], Zeros, g));
        s.push(ParamSpec::new(p("ffn.w1"), &[d, f], Linear, g));
        s.push(ParamSpec::new(p("ffn.b1"), &[f], Zeros, g));
        s.push(ParamSpec::new(p("ffn.w2"), &[f, d], Linear, g));
        s.push(ParamSpec::new(p("ffn.b2"), &[d], Zeros, g));
    }
    s.push(ParamSpec::new("final_norm.gamma", &[d], Ones, Top));
    s.push(ParamSpec::new("final_norm.beta", &[d], Zeros, Top));
    s.push(ParamSpec::new("head.w1", &[d, d / 2], Linear, Top));
    s.push(ParamSpec::new("head.b1", &[d / 2], Zeros, Top));
    s.push(ParamSpec::new("head.w2", &[d / 2, cfg.out_channels], Linear, Top));
    s.push(ParamSpec::new("head.b2", &[cfg.out_channels], Zeros, Top));
    s
}

pub fn parameter_count(cfg: &ModelConfig, maxima: &GraphMaxima) -> usize {
    parameter_specs(cfg, maxima).iter().map(ParamSpec::numel).sum()
}

/// Named model tensors in the order of [`parameter_specs`].
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterSet<S> {
    specs: Arc<[ParamSpec]>,
    index: Arc<HashMap<String, usize>>,
    tensors: Vec<Tensor<S>>,
}

fn index_of(specs: &[ParamSpec]) -> HashMap<String, usize> {
    specs.iter().enumerate().map(|(i, s)| (s.name.clone(), i)).collect()
}

impl<S: Scalar> ParameterSet<S> {
    /// Initializes every tensor from one seeded stream, in spec order.
    pub fn init(cfg: &ModelConfig, maxima: &GraphMaxima, seed: u64) -> Self {
        let specs = parameter_specs(cfg, maxima);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, EMBED_STD).expect("valid std");
        let tensors = specs
            .iter()
            .map(|s| {
                let rows = s.shape[0];
                let data: Vec<f64> = match s.init {
                    InitKind::Linear => {
                        let (fan_in, fan_out) = (s.shape[0], s.shape[1]);
                        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                        (0..s.numel()).map(|_| rng.random_range(-a..=a)).collect()
                    }
                    InitKind::Table => (0..s.numel()).map(|_| normal.sample(&mut rng)).collect(),
                    InitKind::SpatialBias => {
                        let cols = s.numel() / rows;
                        let mut v: Vec<f64> = (0..s.numel()).map(|_| normal.sample(&mut rng)).collect();
                        v[(rows - 2) * cols..].fill(0.0);
                        v
                    }
                    InitKind::Zeros => vec![0.0; s.numel()],
                    InitKind::Ones => vec![1.0; s.numel()],
                };
                Tensor::new(s.shape.clone(), data.into_iter().map(S::lit).collect()).expect("spec shape")
            })
            .collect();
        Self::from_parts(specs, tensors)
    }

    fn from_parts(specs: Vec<ParamSpec>, tensors: Vec<Tensor<S>>) -> Self {
        let index = Arc::new(index_of(&specs));
        Self { specs: specs.into(), index, tensors }
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn tensors(&self) -> &[Tensor<S>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<S>] {
        &mut self.tensors
    }

    pub fn index(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<S>> {
        self.index(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<S>> {
        self.index(name).map(|i| &mut self.tensors[i])
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Same names and shapes, all zeros.
    pub fn zeros_like(&self) -> Self {
        Self {
            specs: self.specs.clone(),
            index: self.index.clone(),
            tensors: self.tensors.iter().map(|t| Tensor::zeros(t.shape())).collect(),
        }
    }

    pub fn cast<T: Scalar>(&self) -> ParameterSet<T> {
        ParameterSet {
            specs: self.specs.clone(),
            index: self.index.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }

    pub fn to_container(&self, meta: Value) -> Container {
        let mut c = Container::new(meta);
        for (s, t) in self.specs.iter().zip(&self.tensors) {
            c.push(s.name.clone(), s.shape.clone(), t.data().iter().map(|v| v.as_f64()).collect());
        }
        c
    }

    /// Loads tensors by name, checking them against the expected layout.
    pub fn from_container(c: &Container, cfg: &ModelConfig, maxima: &GraphMaxima) -> Result<Self> {
        let specs = parameter_specs(cfg, maxima);
        if c.tensors.len() != specs.len() {
            return Err(Error::Format(format!(
                "checkpoint holds {} tensors, model expects {}",
                c.tensors.len(),
                specs.len()
            )));
        }
        let mut tensors = Vec::with_capacity(specs.len());
        for s in &specs {
            let (shape, data) = c.require(&s.name)?;
            if shape != s.shape.as_slice() {
                return Err(shape_err!("tensor `{}` has shape {:?}, expected {:?}", s.name, shape, s.shape));
            }
            tensors.push(Tensor::new(s.shape.clone(), data.iter().map(|&v| S::lit(v)).collect())?);
        }
        Ok(Self::from_parts(specs, tensors))
    }
}
