pub mod config;
pub mod layout;
pub mod network;
pub mod params;


pub use config::{EncodingFlags, ModelConfig, Preset};
pub use layout::{Token, TokenLayout, TokenMode};
pub use network::{AttentionTrace, Bound, Pass, TGraphormer};
pub use params::{parameter_count, parameter_specs, GraphMaxima, ParamGroup, ParamSpec, ParameterSet};
