//! Deterministic linear toy model.
//!
//! Each position carries a residual stream that accumulates a per-(token,
//! layer) effect vector. From `inject_layer` onwards every position also
//! receives `bias_strength * bias_direction`, scaled by the fraction of
//! context-flagged tokens among the positions up to and including it (a
//! uniform causal mixing). Final logits read the last position:
//!
//! ```text
//! state(l, i)  = Σ_{l' ≤ l} effect(tok_i, l')
//! hidden(l, i) = state(l, i) + [l ≥ inject] · s · frac_i · dir
//! logits       = base + U · hidden(L-1, last)
//! ```
//!
//! With `s = 0` context tokens never reach the last position, so they are
//! inert on every logit.

use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{
    HiddenStates, LayerTrace, LayeredModel, Matrix, ModelMeta, Steering, TokenVectorSource,
};
use crate::error::{Error, Result};
use crate::numerics::{norm, LogitVector, TokenId};

/// One entry of the sparse per-token, per-layer effect table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerEffect {
    pub token: TokenId,
    pub layer: usize,
    pub vector: Vec<f64>,
}

/// Serializable description of a toy model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyModelSpec {
    pub meta: ModelMeta,
    pub base_logits: Vec<f64>,
    /// `V × D`.
    pub unembedding: Vec<Vec<f64>>,
    pub layer_effects: Vec<LayerEffect>,
    pub inject_layer: usize,
    /// Unit norm.
    pub bias_direction: Vec<f64>,
    pub bias_strength: f64,
    /// Token ids that carry the injected bias.
    pub context_tokens: Vec<TokenId>,
}

impl ToyModelSpec {
    pub fn validate(&self) -> Result<()> {
        self.meta.validate()?;
        let (v, l, d) = (
            self.meta.vocab_size,
            self.meta.n_layers,
            self.meta.hidden_dim,
        );
        if self.base_logits.len() != v || self.base_logits.iter().any(|x| !x.is_finite()) {
            return Err(Error::config("base_logits must hold V finite values"));
        }
        if self.unembedding.len() != v || self.unembedding.iter().any(|r| r.len() != d) {
            return Err(Error::config("unembedding must be V × D"));
        }
        if self.unembedding.iter().flatten().any(|x| !x.is_finite()) {
            return Err(Error::config("unembedding has non-finite entries"));
        }
        for e in &self.layer_effects {
            if e.token >= v || e.layer >= l || e.vector.len() != d {
                return Err(Error::config(format!(
                    "layer effect for token {} at layer {} is out of shape",
                    e.token, e.layer
                )));
            }
        }
        if self.inject_layer >= l {
            return Err(Error::config(format!(
                "inject_layer {} must be below n_layers {l}",
                self.inject_layer
            )));
        }
        if self.bias_direction.len() != d || (norm(&self.bias_direction) - 1.0).abs() > 1e-9 {
            return Err(Error::config("bias_direction must be a unit D-vector"));
        }
        if !self.bias_strength.is_finite() {
            return Err(Error::config("bias_strength must be finite"));
        }
        if self.context_tokens.iter().any(|t| *t >= v) {
            return Err(Error::config("context token id out of range"));
        }
        Ok(())
    }
}

/// In-process backend built from a [`ToyModelSpec`]. Pure and fully
/// concurrent.
#[derive(Debug, Clone)]
pub struct ToyModel {
    spec: ToyModelSpec,
    unembedding: Arc<Matrix>,
    effects: HashMap<(TokenId, usize), Vec<f64>>,
    is_context: Vec<bool>,
}

impl ToyModel {
    pub fn new(spec: ToyModelSpec) -> Result<Self> {
        spec.validate()?;
        let unembedding = Arc::new(Matrix::from_rows(&spec.unembedding)?);
        let mut effects: HashMap<(TokenId, usize), Vec<f64>> = HashMap::new();
        for e in &spec.layer_effects {
            let slot = effects
                .entry((e.token, e.layer))
                .or_insert_with(|| vec![0.0; spec.meta.hidden_dim]);
            slot.iter_mut().zip(&e.vector).for_each(|(a, b)| *a += b);
        }
        let mut is_context = vec![false; spec.meta.vocab_size];
        for &t in &spec.context_tokens {
            is_context[t] = true;
        }
        Ok(Self {
            spec,
            unembedding,
            effects,
            is_context,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let spec: ToyModelSpec = serde_json::from_str(&text).map_err(|e| Error::Schema {
            line: e.line(),
            message: format!("{}: {e}", path.display()),
        })?;
        Self::new(spec)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text =
            serde_json::to_string_pretty(&self.spec).map_err(|e| Error::Protocol(e.to_string()))?;
        fs::write(path, text + "\n")?;
        Ok(())
    }

    pub fn spec(&self) -> &ToyModelSpec {
        &self.spec
    }

    fn run(
        &self,
        tokens: &[TokenId],
        want_layers: bool,
        steering: Option<&Steering>,
    ) -> Result<LayerTrace> {
        let meta = &self.spec.meta;
        meta.check_tokens(tokens)?;
        let (n_layers, dim, seq_len) = (meta.n_layers, meta.hidden_dim, tokens.len());

        let mut context_seen = 0usize;
        let fractions: Vec<f64> = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| {
                context_seen += usize::from(self.is_context[*t]);
                context_seen as f64 / (i + 1) as f64
            })
            .collect();

        let mut states = vec![vec![0.0; dim]; seq_len];
        let mut hidden = want_layers.then(|| HiddenStates::zeros(n_layers, seq_len, dim));
        let mut last = vec![0.0; dim];
        for layer in 0..n_layers {
            for (i, token) in tokens.iter().enumerate() {
                if let Some(effect) = self.effects.get(&(*token, layer)) {
                    states[i].iter_mut().zip(effect).for_each(|(a, b)| *a += b);
                }
                let mut h = states[i].clone();
                if layer >= self.spec.inject_layer && fractions[i] > 0.0 {
                    let scale = self.spec.bias_strength * fractions[i];
                    h.iter_mut()
                        .zip(&self.spec.bias_direction)
                        .for_each(|(a, b)| *a += scale * b);
                }
                if let Some(s) = steering.filter(|s| layer >= s.layer) {
                    h.iter_mut()
                        .zip(&s.vector)
                        .for_each(|(a, b)| *a += s.multiplier * b);
                }
                if let Some(hs) = hidden.as_mut() {
                    hs.at_mut(layer, i).copy_from_slice(&h);
                }
                if layer + 1 == n_layers && i + 1 == seq_len {
                    last = h;
                }
            }
        }

        let projected = self.unembedding.matvec(&last);
        let logits = self
            .spec
            .base_logits
            .iter()
            .zip(&projected)
            .map(|(b, p)| b + p)
            .collect();
        Ok(LayerTrace {
            hidden,
            final_logits: LogitVector::new(logits)?,
            unembedding: Some(Arc::clone(&self.unembedding)),
        })
    }
}

impl LayeredModel for ToyModel {
    fn meta(&self) -> Result<ModelMeta> {
        Ok(self.spec.meta.clone())
    }

    fn forward(&self, tokens: &[TokenId], want_layers: bool) -> Result<LayerTrace> {
        self.run(tokens, want_layers, None)
    }

    /// The toy model ties input and output embeddings, so both sources
    /// return the unembedding row.
    fn embedding_row(&self, token: TokenId, _source: TokenVectorSource) -> Result<Vec<f64>> {
        if token >= self.spec.meta.vocab_size {
            return Err(Error::usage(format!("token id {token} out of range")));
        }
        Ok(self.unembedding.row(token).to_vec())
    }

    fn supports_steering(&self) -> bool {
        true
    }

    fn forward_steered(&self, tokens: &[TokenId], steering: &Steering) -> Result<LayerTrace> {
        if steering.vector.len() != self.spec.meta.hidden_dim {
            return Err(Error::usage(format!(
                "steering vector has dimension {}, model has {}",
                steering.vector.len(),
                self.spec.meta.hidden_dim
            )));
        }
        if steering.layer >= self.spec.meta.n_layers {
            return Err(Error::config(format!(
                "steer layer {} is out of range",
                steering.layer
            )));
        }
        self.run(tokens, false, Some(steering))
    }
}
