use std::collections::HashMap;
use std::sync::Arc;

use rand::RngCore;

use super::config::ModelConfig;
use super::layout::{Token, TokenLayout};
use super::params::{GraphMaxima, ParameterSet};
use crate::dataset::Normalizer;
use crate::error::{shape_err, Result};
use crate::graphprep::{build_bias_index, DegreeVector, SpatialBiasIndex, SpdMatrix};
use crate::numerics::{Tape, Tensor, Var};
use crate::scalar::Scalar;

pub const LN_EPS: f64 = 1e-5;

/// Post-softmax attention matrices, `layers[j][h]` of shape `l x l`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AttentionTrace {
    pub layers: Vec<Vec<Tensor<f64>>>,
}

/// Per-call forward options.
pub struct Pass<'a> {
    pub training: bool,
    pub rng: Option<&'a mut dyn RngCore>,
    pub trace: Option<&'a mut AttentionTrace>,
}

impl Pass<'_> {
    pub fn eval() -> Self {
        Self { training: false, rng: None, trace: None }
    }
}

/// Parameters registered on a tape, looked up by name.
pub struct Bound {
    vars: Vec<Var>,
    index: Arc<HashMap<String, usize>>,
}

impl Bound {
    /// Pairs `vars` with the names of `params`, in the same order.
    pub fn new<S: Scalar>(params: &ParameterSet<S>, vars: Vec<Var>) -> Self {
        let index = Arc::new(params.specs().iter().enumerate().map(|(i, s)| (s.name.clone(), i)).collect());
        Self { vars, index }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.index.get(name).map(|&i| self.vars[i]).ok_or_else(|| shape_err!("parameter `{name}` is missing"))
    }
}

/// The network bound to one graph: layout, degree lookups and bias buckets.
#[derive(Clone, Debug)]
pub struct TGraphormer {
    cfg: ModelConfig,
    layout: TokenLayout,
    maxima: GraphMaxima,
    bias: SpatialBiasIndex,
    deg_in: Arc<[usize]>,
    deg_out: Arc<[usize]>,
    /// Source row of every sequence position in `[nodes; special]`.
    assemble: Option<Arc<[usize]>>,
    node_positions: Arc<[usize]>,
    normalizer: Normalizer,
}

impl TGraphormer {
    pub fn new(cfg: ModelConfig, degrees: &DegreeVector, spd: &SpdMatrix, normalizer: Normalizer) -> Result<Self> {
        cfg.validate()?;
        let n = cfg.num_nodes;
        if degrees.in_deg.len() != n || spd.num_nodes() != n {
            return Err(shape_err!(
                "graph has {} nodes, config {}",
                degrees.in_deg.len().max(spd.num_nodes()),
                n
            ));
        }
        let layout = TokenLayout::new(cfg.token_mode, cfg.context, n)?;
        let bias = build_bias_index(spd, &layout)?;
        let tn = cfg.context * n;
        let assemble = layout.special_positions().first().map(|_| {
            layout
                .tokens()
                .iter()
                .map(|t| match *t {
                    Token::Node { step, node } => step * n + node,
                    _ => tn,
                })
                .collect::<Arc<[usize]>>()
        });
        let deg_in: Arc<[usize]> = (0..tn).map(|r| degrees.in_deg[r % n]).collect();
        let deg_out: Arc<[usize]> = (0..tn).map(|r| degrees.out_deg[r % n]).collect();
        Ok(Self {
            maxima: GraphMaxima::from_graph(degrees, spd),
            node_positions: layout.node_positions().into(),
            cfg,
            layout,
            bias,
            deg_in,
            deg_out,
            assemble,
            normalizer,
        })
    }

    /// Same network with a different dropout probability.
    pub fn with_dropout(&self, p: f64) -> Result<Self> {
        let mut m = self.clone();
        m.cfg.dropout = p;
        m.cfg.validate()?;
        Ok(m)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn layout(&self) -> &TokenLayout {
        &self.layout
    }

    pub fn maxima(&self) -> GraphMaxima {
        self.maxima
    }

    pub fn bias_index(&self) -> &SpatialBiasIndex {
        &self.bias
    }

    pub fn normalizer(&self) -> Normalizer {
        self.normalizer
    }

    pub fn init_parameters<S: Scalar>(&self, seed: u64) -> ParameterSet<S> {
        ParameterSet::init(&self.cfg, &self.maxima, seed)
    }

    /// Registers `params` on `tape`, as trainable leaves when `trainable`.
    pub fn bind<S: Scalar>(&self, tape: &mut Tape<S>, params: &ParameterSet<S>, trainable: bool) -> Bound {
        let vars = params
            .tensors()
            .iter()
            .map(|t| if trainable { tape.param(t.clone()) } else { tape.constant(t.clone()) })
            .collect();
        Bound::new(params, vars)
    }

    /// Initial token sequence `l x d`.
    pub fn embed_inputs<S: Scalar>(&self, tape: &mut Tape<S>, p: &Bound, x: &Tensor<f64>) -> Result<Var> {
        let (t, n, c) = (self.cfg.context, self.cfg.num_nodes, self.cfg.in_channels);
        if x.shape() != [t, n, c] {
            return Err(shape_err!("input of shape {:?}, expected [{t}, {n}, {c}]", x.shape()));
        }
        let xs = tape.constant(x.cast::<S>().reshape(vec![t * n, c])?);
        let mut h = tape.matmul(xs, p.var("embed.w0")?)?;
        if self.cfg.encodings.use_centrality {
            let tables: &[(&str, &Arc<[usize]>)] = if self.cfg.directed {
                &[("embed.z_in", &self.deg_in), ("embed.z_out", &self.deg_out)]
            } else {
                &[("embed.z", &self.deg_in)]
            };
            for &(name, degrees) in tables {
                let table = p.var(name)?;
                let rows = tape.value(table).rows();
                if let Some(&deg) = degrees.iter().find(|&&d| d >= rows) {
                    return Err(shape_err!("degree {deg} exceeds the {rows}-row table `{name}`"));
                }
                let z = tape.gather_rows(table, degrees.clone())?;
                h = tape.add(h, z)?;
            }
        }
        if let Some(rows) = &self.assemble {
            let special = match self.cfg.token_mode {
                super::layout::TokenMode::Graph => p.var("embed.graph")?,
                _ => p.var("embed.cls")?,
            };
            let stacked = tape.concat_rows(&[h, special])?;
            h = tape.gather_rows(stacked, rows.clone())?;
        }
        if self.cfg.encodings.use_positional {
            h = tape.add(h, p.var("embed.pos")?)?;
        }
        Ok(h)
    }

    /// Multi-head attention with the hop-distance bias, excluding the residual.
    pub fn attention<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        p: &Bound,
        layer: usize,
        h: Var,
        trace: Option<&mut Vec<Tensor<f64>>>,
    ) -> Result<Var> {
        let w = |n: &str| p.var(&format!("enc.{layer}.attn.{n}"));
        let q = tape.matmul(h, w("wq")?)?;
        let k = tape.matmul(h, w("wk")?)?;
        let v = tape.matmul(h, w("wv")?)?;
        let dk = self.cfg.head_dim();
        let inv = S::one() / S::lit(dk as f64).sqrt();
        let table = p.var("spatial_bias")?;
        let mut trace = trace;
        let mut heads = Vec::with_capacity(self.cfg.heads);
        for head in 0..self.cfg.heads {
            let qh = tape.slice_cols(q, head * dk, dk)?;
            let kh = tape.slice_cols(k, head * dk, dk)?;
            let vh = tape.slice_cols(v, head * dk, dk)?;
            let raw = tape.matmul_nt(qh, kh)?;
            let mut scores = tape.scale(raw, inv);
            if self.cfg.encodings.use_spatial_bias {
                let b = tape.bias_lookup(table, self.bias.table(), head)?;
                scores = tape.add(scores, b)?;
            }
            let a = tape.softmax_rows(scores);
            if let Some(tr) = trace.as_deref_mut() {
                tr.push(tape.value(a).cast());
            }
            heads.push(tape.matmul(a, vh)?);
        }
        let cat = if heads.len() == 1 { heads[0] } else { tape.concat_cols(&heads)? };
        tape.matmul(cat, w("wo")?)
    }

    /// One pre-LN encoder block.
    pub fn encoder_block<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        p: &Bound,
        layer: usize,
        h: Var,
        pass: &mut Pass<'_>,
    ) -> Result<Var> {
        let w = |n: &str| p.var(&format!("enc.{layer}.{n}"));
        let eps = S::lit(LN_EPS);
        let drop = self.cfg.dropout;
        let mut noop = NoRng;
        let ln1 = tape.layer_norm(h, w("ln1.gamma")?, w("ln1.beta")?, eps)?;
        let trace = pass.trace.as_deref_mut().map(|tr| {
            tr.layers.push(Vec::new());
            tr.layers.last_mut().expect("just pushed")
        });
        let attn = self.attention(tape, p, layer, ln1, trace)?;
        let rng: &mut dyn RngCore = match pass.rng.as_deref_mut() {
            Some(r) => r,
            None => &mut noop,
        };
        let training = pass.training && drop > 0.0;
        let attn = tape.dropout(attn, drop, training, rng)?;
        let u = tape.add(h, attn)?;
        let ln2 = tape.layer_norm(u, w("ln2.gamma")?, w("ln2.beta")?, eps)?;
        let f1 = tape.matmul(ln2, w("ffn.w1")?)?;
        let f1 = tape.add_row(f1, w("ffn.b1")?)?;
        let g = tape.gelu(f1);
        let f2 = tape.matmul(g, w("ffn.w2")?)?;
        let f2 = tape.add_row(f2, w("ffn.b2")?)?;
        let f2 = tape.dropout(f2, drop, training, rng)?;
        tape.add(u, f2)
    }

    /// Prediction of shape `(T*N) x C_out` in original units, rows in `(step, node)` order.
    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, p: &Bound, x: &Tensor<f64>, pass: &mut Pass<'_>) -> Result<Var> {
        if pass.training && self.cfg.dropout > 0.0 && pass.rng.is_none() {
            return Err(crate::error::Error::Config("training with dropout needs a random source".into()));
        }
        let mut h = self.embed_inputs(tape, p, x)?;
        for layer in 0..self.cfg.layers {
            h = self.encoder_block(tape, p, layer, h, pass)?;
        }
        if self.cfg.encodings.final_norm {
            h = tape.layer_norm(h, p.var("final_norm.gamma")?, p.var("final_norm.beta")?, S::lit(LN_EPS))?;
        }
        if self.assemble.is_some() {
            h = tape.gather_rows(h, self.node_positions.clone())?;
        }
        let h1 = tape.matmul(h, p.var("head.w1")?)?;
        let h1 = tape.add_row(h1, p.var("head.b1")?)?;
        let out = tape.matmul(h1, p.var("head.w2")?)?;
        let out = tape.add_row(out, p.var("head.b2")?)?;
        Ok(tape.affine(out, S::lit(self.normalizer.std), S::lit(self.normalizer.mean)))
    }

    /// Inference without gradients; returns `T x N x C_out`.
    pub fn predict<S: Scalar>(&self, params: &ParameterSet<S>, x: &Tensor<f64>) -> Result<Tensor<S>> {
        self.predict_traced(params, x, None)
    }

    pub fn predict_traced<S: Scalar>(
        &self,
        params: &ParameterSet<S>,
        x: &Tensor<f64>,
        trace: Option<&mut AttentionTrace>,
    ) -> Result<Tensor<S>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, params, false);
        let mut pass = Pass { training: false, rng: None, trace };
        let out = self.forward(&mut tape, &bound, x, &mut pass)?;
        let shape = vec![self.cfg.horizon, self.cfg.num_nodes, self.cfg.out_channels];
        tape.value(out).clone().reshape(shape)
    }
}

/// Stand-in random source for passes that never draw.
struct NoRng;

impl RngCore for NoRng {
    fn next_u32(&mut self) -> u32 {
        unreachable!("dropout is inactive")
    }

    fn next_u64(&mut self) -> u64 {
        unreachable!("dropout is inactive")
    }

    fn fill_bytes(&mut self, _: &mut [u8]) {
        unreachable!("dropout is inactive")
    }
}
