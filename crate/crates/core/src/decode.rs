//! Intervention engine.
//!
//! Every method shares one decoding step: candidates are the top-K tokens of
//! the *biased* logits, and the emitted token is drawn (or taken greedily)
//! from the softmax of the *corrected* logits restricted to those
//! candidates.
//!
//! * `none`: corrected = biased.
//! * `static`: corrected = biased − γ·(biased − pure), from a with-context and
//!   a without-context pass recomputed at every step.
//! * `dynamic`: corrected(v) = biased(v) − γ·r(v)·d(v), with relevance r(v)
//!   the cosine between token v's vector and the context bias vector and
//!   distortion d(v) = biased(v) − pure(v). The critical layer and bias vector
//!   are computed once per prompt.
//! * `repe-baseline`: hidden-layer affine shift, no logit correction.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lens::{self, LensResult, DEFAULT_LAYER_START};
use crate::model::{LayerTrace, LayeredModel, Steering, TokenVectorSource};
use crate::numerics::{
    argmax, cosine, sample_categorical, softmax, top_k, CandidateSet, LogitVector, TokenId,
};

pub const DEFAULT_TOP_K: usize = 20;
pub const DEFAULT_MAX_NEW_TOKENS: usize = 16;
pub const DEFAULT_STEER_LAYER: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    None,
    Static,
    Dynamic,
    RepeBaseline,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::None => "none",
            Self::Static => "static",
            Self::Dynamic => "dynamic",
            Self::RepeBaseline => "repe-baseline",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "static" | "ccd" => Ok(Self::Static),
            "dynamic" | "dsa" => Ok(Self::Dynamic),
            "repe-baseline" | "repe" => Ok(Self::RepeBaseline),
            other => Err(Error::config(format!(
                "unknown method `{other}` (none, static, dynamic, repe-baseline)"
            ))),
        }
    }
}

/// Hidden-layer affine shift baseline.
#[derive(Debug, Clone, PartialEq)]
pub struct RepeBaselineConfig {
    pub steer_layer: usize,
    pub multiplier: f64,
    pub steering_vector: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InterventionConfig {
    pub method: Method,
    /// Intervention strength γ ≥ 0.
    pub gamma: f64,
    pub top_k: usize,
    pub layer_start: usize,
    pub greedy: bool,
    pub seed: u64,
    pub max_new_tokens: usize,
    pub stop_tokens: Vec<TokenId>,
    pub token_vectors: TokenVectorSource,
    /// Required when `method` is [`Method::RepeBaseline`].
    pub repe: Option<RepeBaselineConfig>,
}

impl Default for InterventionConfig {
    fn default() -> Self {
        Self {
            method: Method::None,
            gamma: 0.0,
            top_k: DEFAULT_TOP_K,
            layer_start: DEFAULT_LAYER_START,
            greedy: false,
            seed: 0,
            max_new_tokens: DEFAULT_MAX_NEW_TOKENS,
            stop_tokens: Vec::new(),
            token_vectors: TokenVectorSource::Unembedding,
            repe: None,
        }
    }
}

impl InterventionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma.is_finite() && self.gamma >= 0.0) {
            return Err(Error::config(format!(
                "gamma must be >= 0, got {}",
                self.gamma
            )));
        }
        if self.top_k == 0 {
            return Err(Error::config("top_k must be >= 1"));
        }
        if self.max_new_tokens == 0 {
            return Err(Error::config("max_new_tokens must be >= 1"));
        }
        if self.method == Method::RepeBaseline && self.repe.is_none() {
            return Err(Error::config(
                "repe-baseline requires a steering configuration",
            ));
        }
        Ok(())
    }
}

/// Final logits of the with-context and without-context passes.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitPair {
    pub biased: LogitVector,
    pub pure: LogitVector,
}

impl LogitPair {
    pub fn new(biased: LogitVector, pure: LogitVector) -> Result<Self> {
        if biased.len() != pure.len() {
            return Err(Error::usage("biased and pure logits differ in length"));
        }
        Ok(Self { biased, pure })
    }

    /// d(v) = biased(v) − pure(v).
    pub fn distortion(&self, token: TokenId) -> f64 {
        self.biased.as_slice()[token] - self.pure.as_slice()[token]
    }
}

/// Per-candidate correction terms, also the shape of one intervention-log
/// entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateRecord {
    pub token: TokenId,
    pub r: f64,
    pub d: f64,
    pub p: f64,
    pub logit_before: f64,
    pub logit_after: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PenaltyBreakdown {
    pub records: Vec<CandidateRecord>,
}

impl PenaltyBreakdown {
    pub fn corrected(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.logit_after).collect()
    }
}

/// One line of the JSON-lines intervention log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub l_star: Option<usize>,
    pub candidates: Vec<CandidateRecord>,
    pub chosen: TokenId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prompt {
    /// Removable context, placed before the question.
    pub context: Vec<TokenId>,
    pub question: Vec<TokenId>,
}

impl Prompt {
    pub fn with_context(&self) -> Vec<TokenId> {
        [self.context.as_slice(), self.question.as_slice()].concat()
    }

    pub fn context_positions(&self) -> Vec<usize> {
        (0..self.context.len()).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    pub tokens: Vec<TokenId>,
    pub steps: Vec<StepRecord>,
    /// Present for the dynamic method.
    pub lens: Option<LensResult>,
}

/// Outcome of one constrained decoding step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepChoice {
    pub token: TokenId,
    pub candidates: CandidateSet,
    /// Corrected logits in candidate order.
    pub corrected: Vec<f64>,
}

/// Two independent passes with and without the context prefix.
pub fn dual_forward<M: LayeredModel + ?Sized>(
    model: &M,
    tokens_with_context: &[TokenId],
    tokens_without_context: &[TokenId],
    want_layers: bool,
) -> Result<(LayerTrace, LayerTrace, LogitPair)> {
    let biased = model.forward(tokens_with_context, want_layers)?;
    let pure = model.forward(tokens_without_context, want_layers)?;
    let pair = LogitPair::new(biased.final_logits.clone(), pure.final_logits.clone())?;
    Ok((biased, pure, pair))
}

/// `biased − γ·(biased − pure)`, evaluated as `(1−γ)·biased + γ·pure` so
/// that γ = 0 and γ = 1 reproduce their endpoints exactly.
pub fn static_correct(pair: &LogitPair, gamma: f64) -> LogitVector {
    let corrected = pair
        .biased
        .as_slice()
        .iter()
        .zip(pair.pure.as_slice())
        .map(|(b, p)| (1.0 - gamma) * b + gamma * p)
        .collect();
    LogitVector::new(corrected).expect("affine combination of finite logits is finite")
}

/// Semantic-aware penalty over `candidates`. `token_vectors[i]` belongs to
/// the i-th candidate. Returns corrected logits in candidate order.
pub fn dynamic_correct(
    pair: &LogitPair,
    candidates: &CandidateSet,
    e_bias: &[f64],
    token_vectors: &[Vec<f64>],
    gamma: f64,
) -> Result<(Vec<f64>, PenaltyBreakdown)> {
    if token_vectors.len() != candidates.len() {
        return Err(Error::usage("one token vector per candidate is required"));
    }
    let mut records = Vec::with_capacity(candidates.len());
    for (token, vector) in candidates.iter().zip(token_vectors) {
        if vector.len() != e_bias.len() {
            return Err(Error::usage(format!(
                "token vector dimension {} differs from bias vector dimension {}",
                vector.len(),
                e_bias.len()
            )));
        }
        let r = cosine(vector, e_bias)?.value;
        let d = pair.distortion(token);
        let p = r * d;
        let before = pair.biased.as_slice()[token];
        records.push(CandidateRecord {
            token,
            r,
            d,
            p,
            logit_before: before,
            logit_after: before - gamma * p,
        });
    }
    let breakdown = PenaltyBreakdown { records };
    Ok((breakdown.corrected(), breakdown))
}

/// Top-K filter on the biased logits, then a re-ranked draw from the
/// corrected candidate logits returned by `correct`.
pub fn constrained_step<R, F>(
    biased_logits: &LogitVector,
    config: &InterventionConfig,
    rng: &mut R,
    correct: F,
) -> Result<StepChoice>
where
    R: Rng + ?Sized,
    F: FnOnce(&CandidateSet) -> Result<Vec<f64>>,
{
    let candidates = top_k(biased_logits, config.top_k)?;
    let corrected = correct(&candidates)?;
    if corrected.len() != candidates.len() {
        return Err(Error::usage("corrected logits must cover every candidate"));
    }
    let index = if config.greedy {
        argmax(&corrected).expect("candidate set is nonempty")
    } else {
        sample_categorical(&softmax(&corrected)?, rng)
    };
    Ok(StepChoice {
        token: candidates.as_slice()[index],
        candidates,
        corrected,
    })
}

/// Logits after shifting the residual stream at `cfg.steer_layer`.
pub fn repe_baseline_step<M: LayeredModel + ?Sized>(
    model: &M,
    tokens: &[TokenId],
    cfg: &RepeBaselineConfig,
) -> Result<LogitVector> {
    let meta = model.meta()?;
    if cfg.steering_vector.len() != meta.hidden_dim {
        return Err(Error::usage(format!(
            "steering vector has dimension {}, model hidden_dim is {}",
            cfg.steering_vector.len(),
            meta.hidden_dim
        )));
    }
    if cfg.steer_layer >= meta.n_layers {
        return Err(Error::config(format!(
            "steer layer {} out of range for {} layers",
            cfg.steer_layer, meta.n_layers
        )));
    }
    let steering = Steering {
        layer: cfg.steer_layer,
        vector: cfg.steering_vector.clone(),
        multiplier: cfg.multiplier,
    };
    Ok(model.forward_steered(tokens, &steering)?.final_logits)
}

/// Mean over prompt pairs of the final-position hidden difference
/// (stereotype − anti-stereotype) at `layer`.
pub fn build_repe_steering_vector<M: LayeredModel + ?Sized>(
    model: &M,
    stereotype_prompts: &[Vec<TokenId>],
    anti_prompts: &[Vec<TokenId>],
    layer: usize,
) -> Result<Vec<f64>> {
    if stereotype_prompts.is_empty() || stereotype_prompts.len() != anti_prompts.len() {
        return Err(Error::usage(
            "steering calibration needs equal-length, nonempty prompt lists",
        ));
    }
    let last_hidden = |tokens: &[TokenId]| -> Result<Vec<f64>> {
        let trace = model.forward(tokens, true)?;
        let hidden = trace
            .hidden
            .ok_or_else(|| Error::Capability("backend returned no hidden states".into()))?;
        if layer >= hidden.n_layers() {
            return Err(Error::config(format!(
                "calibration layer {layer} out of range"
            )));
        }
        Ok(hidden.at(layer, hidden.seq_len() - 1).to_vec())
    };
    let mut sum: Option<Vec<f64>> = None;
    for (s, a) in stereotype_prompts.iter().zip(anti_prompts) {
        let hs = last_hidden(s)?;
        let ha = last_hidden(a)?;
        let acc = sum.get_or_insert_with(|| vec![0.0; hs.len()]);
        acc.iter_mut()
            .zip(hs.iter().zip(&ha))
            .for_each(|(acc, (x, y))| *acc += x - y);
    }
    let n = stereotype_prompts.len() as f64;
    Ok(sum.unwrap_or_default().into_iter().map(|v| v / n).collect())
}

fn passthrough_records(choice: &StepChoice) -> Vec<CandidateRecord> {
    choice
        .candidates
        .iter()
        .zip(&choice.corrected)
        .map(|(token, &logit)| CandidateRecord {
            token,
            r: 0.0,
            d: 0.0,
            p: 0.0,
            logit_before: logit,
            logit_after: logit,
        })
        .collect()
}

/// Autoregressive constrained generation under `config.method`.
///
/// Static recomputes both passes every step. Dynamic locates the critical
/// layer and bias vector once from the prompt, then recomputes only the
/// logit pair per step. Static logs record r = 1 (a uniform correction);
/// `none` and `repe-baseline` log zero correction terms.
pub fn generate<M, R>(
    model: &M,
    prompt: &Prompt,
    config: &InterventionConfig,
    rng: &mut R,
) -> Result<Generation>
where
    M: LayeredModel + ?Sized,
    R: Rng + ?Sized,
{
    config.validate()?;
    let needs_pure = matches!(config.method, Method::Static | Method::Dynamic);
    if needs_pure && prompt.question.is_empty() {
        return Err(Error::config(format!(
            "{} decoding needs a nonempty question",
            config.method
        )));
    }

    let mut lens_result = None;
    let mut first_pair = None;
    if config.method == Method::Dynamic {
        if prompt.context.is_empty() {
            return Err(Error::config(
                "dynamic decoding requires a removable context; the context is empty",
            ));
        }
        let n_layers = model.meta()?.n_layers;
        if config.layer_start >= n_layers {
            return Err(Error::config(format!(
                "layer_start {} is not below the model's {n_layers} layers; lower --layer-start",
                config.layer_start
            )));
        }
        let (tb, tp, pair) = dual_forward(model, &prompt.with_context(), &prompt.question, true)?;
        lens_result = Some(lens::analyze(
            &tb,
            &tp,
            &prompt.context_positions(),
            config.layer_start,
        )?);
        first_pair = Some(pair);
    }

    let mut vector_cache: HashMap<TokenId, Vec<f64>> = HashMap::new();
    let mut generated: Vec<TokenId> = Vec::new();
    let mut steps = Vec::new();
    for step in 0..config.max_new_tokens {
        let biased_tokens = [prompt.with_context().as_slice(), &generated].concat();
        let pure_tokens = [prompt.question.as_slice(), &generated].concat();

        let (choice, records, l_star) = match config.method {
            Method::None => {
                let biased = model.forward(&biased_tokens, false)?.final_logits;
                let choice = constrained_step(&biased, config, rng, |c| Ok(biased.gather(c)))?;
                let records = passthrough_records(&choice);
                (choice, records, None)
            }
            Method::Static => {
                let (_, _, pair) = dual_forward(model, &biased_tokens, &pure_tokens, false)?;
                let corrected = static_correct(&pair, config.gamma);
                let choice =
                    constrained_step(&pair.biased, config, rng, |c| Ok(corrected.gather(c)))?;
                let records = choice
                    .candidates
                    .iter()
                    .map(|t| {
                        let d = pair.distortion(t);
                        CandidateRecord {
                            token: t,
                            r: 1.0,
                            d,
                            p: d,
                            logit_before: pair.biased.as_slice()[t],
                            logit_after: corrected.as_slice()[t],
                        }
                    })
                    .collect();
                (choice, records, None)
            }
            Method::Dynamic => {
                let lens = lens_result.as_ref().expect("computed above");
                let pair = match first_pair.take() {
                    Some(p) => p,
                    None => dual_forward(model, &biased_tokens, &pure_tokens, false)?.2,
                };
                let mut breakdown = PenaltyBreakdown::default();
                let choice = constrained_step(&pair.biased, config, rng, |c| {
                    let vectors = c
                        .iter()
                        .map(|t| match vector_cache.get(&t) {
                            Some(v) => Ok(v.clone()),
                            None => {
                                let v = model.embedding_row(t, config.token_vectors)?;
                                vector_cache.insert(t, v.clone());
                                Ok(v)
                            }
                        })
                        .collect::<Result<Vec<_>>>()?;
                    let (corrected, b) =
                        dynamic_correct(&pair, c, &lens.e_bias, &vectors, config.gamma)?;
                    breakdown = b;
                    Ok(corrected)
                })?;
                (choice, breakdown.records, Some(lens.critical_layer))
            }
            Method::RepeBaseline => {
                let cfg = config.repe.as_ref().expect("validated");
                let steered = repe_baseline_step(model, &biased_tokens, cfg)?;
                let choice = constrained_step(&steered, config, rng, |c| Ok(steered.gather(c)))?;
                let records = passthrough_records(&choice);
                (choice, records, None)
            }
        };

        steps.push(StepRecord {
            step,
            l_star,
            candidates: records,
            chosen: choice.token,
        });
        generated.push(choice.token);
        if config.stop_tokens.contains(&choice.token) {
            break;
        }
    }

    Ok(Generation {
        tokens: generated,
        steps,
        lens: lens_result,
    })
}
