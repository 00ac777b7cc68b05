//! Toy model and dataset with known ground truth.
//!
//! Token layout: `0 = A` (stereotype), `1 = B` (anti-stereotype),
//! `2 = C` (unrelated), then three context tokens, three question tokens and
//! distractors. The first `max(2, D/2)` hidden dimensions are visible to the
//! unembedding; the rest are dark (zero unembedding columns) and carry the
//! per-layer effects above layer 0. The bias direction is `e0`, and only
//! option A reads `e0`, so the context shifts A alone by
//! `bias_strength · frac` where `frac` is the context share of the prompt.
//!
//! Without context B beats A by `margin`. With context A wins whenever
//! `bias_strength · frac > margin`. Projections are identical below the
//! injection layer and constant above it, so the biased-vs-pure divergence
//! first peaks at `inject_layer`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bench::{AnswerOption, Role, Sample};
use crate::error::{Error, Result};
use crate::model::{LayerEffect, ModelMeta, ToyModel, ToyModelSpec};
use crate::numerics::{norm, TokenId};

pub const CONTEXT_TOKENS: [TokenId; 3] = [3, 4, 5];
pub const QUESTION_TOKENS: [TokenId; 3] = [6, 7, 8];
const CATEGORIES: [&str; 3] = ["gender", "race", "profession"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyConfig {
    pub vocab_size: usize,
    pub n_layers: usize,
    pub hidden_dim: usize,
    pub inject_layer: usize,
    pub bias_strength: f64,
    /// Upper bound on the norm of any token's accumulated effect.
    pub effect_scale: f64,
    /// Logit lead of B over A without context.
    pub margin: f64,
    pub n_samples: usize,
    pub seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            vocab_size: 16,
            n_layers: 24,
            hidden_dim: 8,
            inject_layer: 16,
            bias_strength: 2.0,
            effect_scale: 0.2,
            margin: 0.5,
            n_samples: 12,
            seed: 0,
        }
    }
}

impl ToyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 10 {
            return Err(Error::usage("toy vocabulary needs at least 10 tokens"));
        }
        if self.n_layers < 2 {
            return Err(Error::usage("toy model needs at least 2 layers"));
        }
        if self.hidden_dim < 2 {
            return Err(Error::usage("toy hidden_dim must be at least 2"));
        }
        if self.inject_layer == 0 || self.inject_layer >= self.n_layers {
            return Err(Error::usage(format!(
                "inject_layer must lie in 1..{}",
                self.n_layers
            )));
        }
        let finite_nonneg = |x: f64| x.is_finite() && x >= 0.0;
        if !finite_nonneg(self.bias_strength)
            || !finite_nonneg(self.effect_scale)
            || !finite_nonneg(self.margin)
        {
            return Err(Error::usage(
                "bias_strength, effect_scale and margin must be finite and >= 0",
            ));
        }
        if self.n_samples == 0 {
            return Err(Error::usage("n_samples must be >= 1"));
        }
        Ok(())
    }

    fn visible_dims(&self) -> usize {
        (self.hidden_dim / 2).max(2)
    }
}

/// What the construction guarantees.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub inject_layer: usize,
    pub bias_direction: Vec<f64>,
    /// Greedy choice with context under no intervention.
    pub biased_choice: Role,
    /// Greedy choice without context.
    pub pure_choice: Role,
    pub unbiased: bool,
}

#[derive(Debug, Clone)]
pub struct ToyBundle {
    pub model: ToyModel,
    pub dataset: Vec<Sample>,
    pub truth: GroundTruth,
}

fn unit_e(dim: usize, i: usize) -> Vec<f64> {
    let mut v = vec![0.0; dim];
    v[i] = 1.0;
    v
}

/// Random vector supported on `dims`, scaled to `length`.
fn random_in(
    rng: &mut ChaCha8Rng,
    dim: usize,
    dims: std::ops::Range<usize>,
    length: f64,
) -> Vec<f64> {
    let mut v = vec![0.0; dim];
    if dims.is_empty() {
        return v;
    }
    for i in dims.clone() {
        v[i] = rng.random_range(-1.0..1.0);
    }
    let n = norm(&v);
    if n == 0.0 {
        v[dims.start] = length;
    } else {
        v.iter_mut().for_each(|x| *x *= length / n);
    }
    v
}

pub fn make_toy(config: &ToyConfig) -> Result<ToyBundle> {
    config.validate()?;
    let (v, l, d) = (config.vocab_size, config.n_layers, config.hidden_dim);
    let visible = config.visible_dims();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let mut token_names: Vec<String> = vec!["A".into(), "B".into(), "C".into()];
    token_names.extend((0..3).map(|i| format!("ctx{i}")));
    token_names.extend((0..3).map(|i| format!("q{i}")));
    token_names.extend((9..v).map(|i| format!("tok{i}")));

    let mut unembedding = vec![vec![0.0; d]; v];
    unembedding[0][0] = 1.0;
    unembedding[0][1] = 1.0;
    unembedding[1][1] = 1.0;
    unembedding[2][1] = 1.0;
    for row in unembedding.iter_mut().skip(3) {
        *row = random_in(&mut rng, d, 1..visible, 1.0);
        row[0] = rng.random_range(-0.1..0.1);
    }

    let mut base_logits = vec![-4.0; v];
    base_logits[0] = 0.0;
    base_logits[1] = config.margin;
    base_logits[2] = -1.0;
    for b in base_logits.iter_mut().skip(3) {
        *b += rng.random_range(-0.5..0.5);
    }

    let step = config.effect_scale / (2.0 * (l - 1) as f64);
    let mut layer_effects = Vec::new();
    for token in CONTEXT_TOKENS.iter().chain(&QUESTION_TOKENS) {
        layer_effects.push(LayerEffect {
            token: *token,
            layer: 0,
            vector: random_in(&mut rng, d, 1..visible, config.effect_scale / 2.0),
        });
        if visible < d {
            for layer in 1..l {
                layer_effects.push(LayerEffect {
                    token: *token,
                    layer,
                    vector: random_in(&mut rng, d, visible..d, step),
                });
            }
        }
    }

    let spec = ToyModelSpec {
        meta: ModelMeta {
            vocab_size: v,
            n_layers: l,
            hidden_dim: d,
            token_names,
        },
        base_logits,
        unembedding,
        layer_effects,
        inject_layer: config.inject_layer,
        bias_direction: unit_e(d, 0),
        bias_strength: config.bias_strength,
        context_tokens: CONTEXT_TOKENS.to_vec(),
    };
    let model = ToyModel::new(spec)?;

    let mut dataset = Vec::with_capacity(config.n_samples);
    let mut min_fraction: f64 = 1.0;
    for i in 0..config.n_samples {
        let c = rng.random_range(1..=3usize);
        let q = rng.random_range(1..=2usize);
        let mut context = CONTEXT_TOKENS.to_vec();
        let mut question = QUESTION_TOKENS.to_vec();
        shuffle(&mut rng, &mut context);
        shuffle(&mut rng, &mut question);
        context.truncate(c);
        question.truncate(q);
        min_fraction = min_fraction.min(c as f64 / (c + q) as f64);
        let option = |t: TokenId, role| AnswerOption {
            tokens: vec![t],
            role,
        };
        dataset.push(Sample {
            id: format!("toy-{i:03}"),
            context_tokens: context,
            question_tokens: question,
            options: [
                ("A".to_string(), option(0, Role::Stereotype)),
                ("B".to_string(), option(1, Role::AntiStereotype)),
                ("C".to_string(), option(2, Role::Unrelated)),
            ]
            .into_iter()
            .collect(),
            category: CATEGORIES[i % CATEGORIES.len()].to_string(),
        });
    }

    let flips = config.bias_strength * min_fraction > config.margin;
    let truth = GroundTruth {
        inject_layer: config.inject_layer,
        bias_direction: unit_e(d, 0),
        biased_choice: if flips {
            Role::Stereotype
        } else {
            Role::AntiStereotype
        },
        pure_choice: Role::AntiStereotype,
        unbiased: config.bias_strength == 0.0,
    };
    Ok(ToyBundle {
        model,
        dataset,
        truth,
    })
}

fn shuffle<T>(rng: &mut ChaCha8Rng, items: &mut [T]) {
    for i in (1..items.len()).rev() {
        let j = rng.random_range(0..=i);
        items.swap(i, j);
    }
}
