use serde::{Deserialize, Serialize};

use super::layout::TokenMode;
use crate::error::{config_err, Result};

/// Switches for the structural encodings, used by ablations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default)]
pub struct EncodingFlags {
    pub use_positional: bool,
    pub use_centrality: bool,
    pub use_spatial_bias: bool,
    /// Layer norm after the last encoder block.
    pub final_norm: bool,
}

impl Default for EncodingFlags {
    fn default() -> Self {
        Self { use_positional: true, use_centrality: true, use_spatial_bias: true, final_norm: true }
    }
}

/// Published model sizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Micro,
    Mini,
    Small,
}

impl Preset {
    /// `(hidden width, encoder layers, attention heads)`.
    pub fn dims(self) -> (usize, usize, usize) {
        match self {
            Preset::Micro => (64, 6, 2),
            Preset::Mini => (128, 6, 4),
            Preset::Small => (192, 8, 6),
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "micro" => Ok(Preset::Micro),
            "mini" => Ok(Preset::Mini),
            "small" => Ok(Preset::Small),
            other => Err(config_err!("unknown preset `{other}` (expected micro, mini or small)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_ratio: usize,
    pub dropout: f64,
    pub token_mode: TokenMode,
    #[serde(default)]
    pub encodings: EncodingFlags,
    /// Context steps `T'`.
    pub context: usize,
    /// Forecast steps `T`.
    pub horizon: usize,
    pub num_nodes: usize,
    /// Input channels `C` per token.
    pub in_channels: usize,
    pub out_channels: usize,
    /// Separate in/out-degree tables when true, one shared table otherwise.
    pub directed: bool,
}

impl ModelConfig {
    pub fn from_preset(preset: Preset, context: usize, horizon: usize, num_nodes: usize, in_channels: usize) -> Self {
        let (d_model, layers, heads) = preset.dims();
        Self {
            d_model,
            layers,
            heads,
            ffn_ratio: 4,
            dropout: 0.1,
            token_mode: TokenMode::Cls,
            encodings: EncodingFlags::default(),
            context,
            horizon,
            num_nodes,
            in_channels,
            out_channels: 1,
            directed: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.layers == 0 || self.heads == 0 || self.ffn_ratio == 0 {
            return Err(config_err!("width, depth, heads and ffn_ratio must be positive"));
        }
        if self.d_model % self.heads != 0 {
            return Err(config_err!("hidden width {} is not divisible by {} heads", self.d_model, self.heads));
        }
        if self.d_model < 2 {
            return Err(config_err!("hidden width must be at least 2 for the d/2 head layer"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(config_err!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.horizon != self.context {
            return Err(config_err!(
                "horizon T = {} must equal context T' = {}: each context token predicts one horizon step",
                self.horizon,
                self.context
            ));
        }
        if self.context == 0 || self.num_nodes == 0 || self.in_channels == 0 || self.out_channels == 0 {
            return Err(config_err!("context, nodes and channel counts must be positive"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn ffn_dim(&self) -> usize {
        self.d_model * self.ffn_ratio
    }

    pub fn seq_len(&self) -> usize {
        match self.token_mode {
            TokenMode::None => self.context * self.num_nodes,
            TokenMode::Cls => self.context * self.num_nodes + 1,
            TokenMode::Graph => self.context * (self.num_nodes + 1),
        }
    }
}
