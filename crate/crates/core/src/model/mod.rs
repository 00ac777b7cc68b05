//! Layer-wise language model contract.
//!
//! Two backends ship with the crate: [`ToyModel`], a deterministic linear
//! residual-stream model with closed-form behaviour, and [`ExternalModel`], a
//! client for logits providers speaking the line-delimited JSON protocol in
//! [`protocol`].

mod client;
pub mod protocol;
pub(crate) mod toy;

use std::fmt;
use std::path::PathBuf;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{LogitVector, TokenId};

pub use client::ExternalModel;
pub use toy::{LayerEffect, ToyModel, ToyModelSpec};

/// Static description of a backend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub vocab_size: usize,
    pub n_layers: usize,
    pub hidden_dim: usize,
    pub token_names: Vec<String>,
}

impl ModelMeta {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 4 {
            return Err(Error::config(format!(
                "vocabulary size {} is below the minimum of 4",
                self.vocab_size
            )));
        }
        if self.n_layers == 0 || self.hidden_dim == 0 {
            return Err(Error::config("n_layers and hidden_dim must be positive"));
        }
        if self.token_names.len() != self.vocab_size {
            return Err(Error::config(format!(
                "{} token names for a vocabulary of {}",
                self.token_names.len(),
                self.vocab_size
            )));
        }
        Ok(())
    }

    pub fn check_tokens(&self, tokens: &[TokenId]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::usage("token sequence is empty"));
        }
        if let Some(t) = tokens.iter().find(|t| **t >= self.vocab_size) {
            return Err(Error::usage(format!(
                "token id {t} out of range for vocabulary of {}",
                self.vocab_size
            )));
        }
        Ok(())
    }

    pub fn token_name(&self, token: TokenId) -> &str {
        self.token_names.get(token).map_or("?", String::as_str)
    }
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::usage("matrix rows have unequal lengths"));
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows).map(|i| self.row(i).to_vec()).collect()
    }

    /// `self · x`.
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols);
        (0..self.rows)
            .map(|i| self.row(i).iter().zip(x).map(|(a, b)| a * b).sum())
            .collect()
    }
}

/// Hidden states indexed by (layer, position), each a `dim`-vector.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenStates {
    n_layers: usize,
    seq_len: usize,
    dim: usize,
    data: Vec<f64>,
}

impl HiddenStates {
    pub fn zeros(n_layers: usize, seq_len: usize, dim: usize) -> Self {
        Self {
            n_layers,
            seq_len,
            dim,
            data: vec![0.0; n_layers * seq_len * dim],
        }
    }

    /// Builds from a nested `[layer][position][component]` array.
    pub fn from_nested(nested: &[Vec<Vec<f64>>]) -> Result<Self> {
        let n_layers = nested.len();
        let seq_len = nested.first().map_or(0, Vec::len);
        let dim = nested.first().and_then(|l| l.first()).map_or(0, Vec::len);
        let mut data = Vec::with_capacity(n_layers * seq_len * dim);
        for layer in nested {
            if layer.len() != seq_len {
                return Err(Error::Protocol("ragged hidden-state array".into()));
            }
            for v in layer {
                if v.len() != dim {
                    return Err(Error::Protocol("ragged hidden-state array".into()));
                }
                data.extend_from_slice(v);
            }
        }
        Ok(Self {
            n_layers,
            seq_len,
            dim,
            data,
        })
    }

    pub fn to_nested(&self) -> Vec<Vec<Vec<f64>>> {
        (0..self.n_layers)
            .map(|l| (0..self.seq_len).map(|i| self.at(l, i).to_vec()).collect())
            .collect()
    }

    pub fn n_layers(&self) -> usize {
        self.n_layers
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn at(&self, layer: usize, position: usize) -> &[f64] {
        let start = (layer * self.seq_len + position) * self.dim;
        &self.data[start..start + self.dim]
    }

    pub fn at_mut(&mut self, layer: usize, position: usize) -> &mut [f64] {
        let start = (layer * self.seq_len + position) * self.dim;
        &mut self.data[start..start + self.dim]
    }
}

/// Everything one forward pass exposes.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerTrace {
    /// Present only when layers were requested.
    pub hidden: Option<HiddenStates>,
    pub final_logits: LogitVector,
    /// `V × D`; row `v` is the vocabulary-side vector of token `v`.
    pub unembedding: Option<Arc<Matrix>>,
}

/// Which per-token vector stands in for a token in relevance scoring.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TokenVectorSource {
    #[default]
    Unembedding,
    InputEmbedding,
}

/// Additive shift of the residual stream from `layer` onwards:
/// `hidden += multiplier * vector` at every position.
#[derive(Debug, Clone, PartialEq)]
pub struct Steering {
    pub layer: usize,
    pub vector: Vec<f64>,
    pub multiplier: f64,
}

/// Contract every backend implements. Implementations must be safe to call
/// concurrently (or serialize internally).
pub trait LayeredModel: Send + Sync {
    fn meta(&self) -> Result<ModelMeta>;

    fn forward(&self, tokens: &[TokenId], want_layers: bool) -> Result<LayerTrace>;

    fn embedding_row(&self, token: TokenId, source: TokenVectorSource) -> Result<Vec<f64>>;

    fn supports_steering(&self) -> bool {
        false
    }

    /// Forward pass with a residual-stream shift, returning final logits.
    fn forward_steered(&self, _tokens: &[TokenId], _steering: &Steering) -> Result<LayerTrace> {
        Err(Error::Capability(
            "backend does not support steered forward passes".into(),
        ))
    }
}

impl<M: LayeredModel + ?Sized> LayeredModel for Box<M> {
    fn meta(&self) -> Result<ModelMeta> {
        (**self).meta()
    }
    fn forward(&self, tokens: &[TokenId], want_layers: bool) -> Result<LayerTrace> {
        (**self).forward(tokens, want_layers)
    }
    fn embedding_row(&self, token: TokenId, source: TokenVectorSource) -> Result<Vec<f64>> {
        (**self).embedding_row(token, source)
    }
    fn supports_steering(&self) -> bool {
        (**self).supports_steering()
    }
    fn forward_steered(&self, tokens: &[TokenId], steering: &Steering) -> Result<LayerTrace> {
        (**self).forward_steered(tokens, steering)
    }
}

/// Where a model comes from: `toy:<spec-file>`, `exec:<command>` or
/// `tcp:<host:port>`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ModelSource {
    Toy(PathBuf),
    Exec(String),
    Tcp(String),
}

impl ModelSource {
    pub fn parse(spec: &str) -> Result<Self> {
        let (kind, rest) = spec
            .split_once(':')
            .ok_or_else(|| Error::config(format!("model spec `{spec}` lacks a `kind:` prefix")))?;
        if rest.is_empty() {
            return Err(Error::config(format!("model spec `{spec}` is incomplete")));
        }
        match kind {
            "toy" => Ok(Self::Toy(PathBuf::from(rest))),
            "exec" => Ok(Self::Exec(rest.to_string())),
            "tcp" => Ok(Self::Tcp(rest.to_string())),
            other => Err(Error::config(format!(
                "unknown model kind `{other}` (expected toy, exec or tcp)"
            ))),
        }
    }

    pub fn open(&self) -> Result<Box<dyn LayeredModel>> {
        Ok(match self {
            Self::Toy(path) => Box::new(ToyModel::load(path)?),
            Self::Exec(cmd) => Box::new(ExternalModel::spawn(cmd)?),
            Self::Tcp(addr) => Box::new(ExternalModel::connect(addr)?),
        })
    }
}

impl fmt::Display for ModelSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Toy(p) => write!(f, "toy:{}", p.display()),
            Self::Exec(c) => write!(f, "exec:{c}"),
            Self::Tcp(a) => write!(f, "tcp:{a}"),
        }
    }
}
