use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};

/// Special-token arrangement of the flattened sequence.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenMode {
    None,
    /// One `cls` token at flat index 0.
    #[default]
    Cls,
    /// One `graph` token heading each time step.
    Graph,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Token {
    Node { step: usize, node: usize },
    Cls,
    Graph { step: usize },
}

impl Token {
    pub fn is_special(self) -> bool {
        !matches!(self, Token::Node { .. })
    }

    pub fn node(self) -> Option<usize> {
        match self {
            Token::Node { node, .. } => Some(node),
            _ => None,
        }
    }
}

/// Mapping between flat sequence positions and `(time step, node)` pairs.
///
/// Node tokens are time-major: within the node-only part of the sequence,
/// `(t, i)` comes before `(t, i + 1)` and `(t + 1, 0)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenLayout {
    mode: TokenMode,
    steps: usize,
    nodes: usize,
    tokens: Vec<Token>,
}

impl TokenLayout {
    pub fn new(mode: TokenMode, steps: usize, nodes: usize) -> Result<Self> {
        if steps == 0 || nodes == 0 {
            return Err(config_err!("token layout needs at least one step and one node"));
        }
        let mut tokens = Vec::new();
        if mode == TokenMode::Cls {
            tokens.push(Token::Cls);
        }
        for step in 0..steps {
            if mode == TokenMode::Graph {
                tokens.push(Token::Graph { step });
            }
            tokens.extend((0..nodes).map(|node| Token::Node { step, node }));
        }
        Ok(Self { mode, steps, nodes, tokens })
    }

    pub fn mode(&self) -> TokenMode {
        self.mode
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn nodes(&self) -> usize {
        self.nodes
    }

    /// Sequence length `l`.
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn token(&self, position: usize) -> Token {
        self.tokens[position]
    }

    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    pub fn position(&self, step: usize, node: usize) -> usize {
        debug_assert!(step < self.steps && node < self.nodes);
        match self.mode {
            TokenMode::None => step * self.nodes + node,
            TokenMode::Cls => 1 + step * self.nodes + node,
            TokenMode::Graph => step * (self.nodes + 1) + 1 + node,
        }
    }

    /// Flat positions of all node tokens in `(step, node)` order.
    pub fn node_positions(&self) -> Vec<usize> {
        (0..self.steps).flat_map(|t| (0..self.nodes).map(move |i| self.position(t, i))).collect()
    }

    pub fn special_positions(&self) -> Vec<usize> {
        (0..self.len()).filter(|&p| self.tokens[p].is_special()).collect()
    }
}
