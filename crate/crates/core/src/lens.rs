//! Logit-lens diagnostics.
//!
//! Interior hidden states are read through the final unembedding (no per-layer
//! tuning) at the last sequence position. Two trajectories are offered:
//! the choice-pair divergence between the renormalized probabilities of two
//! option tokens, and the biased-vs-pure divergence between full-vocabulary
//! projections of a with-context and a without-context pass. The latter
//! locates the critical layer and yields the semantic bias vector.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{HiddenStates, LayerTrace};
use crate::numerics::{jsd, softmax, ProbDist, TokenId};

/// Default first layer considered when searching for the critical layer.
pub const DEFAULT_LAYER_START: usize = 15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrajectoryMode {
    ChoicePair,
    BiasedVsPure,
}

impl TrajectoryMode {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::ChoicePair => "choice-pair",
            Self::BiasedVsPure => "biased-vs-pure",
        }
    }
}

impl fmt::Display for TrajectoryMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TrajectoryMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "choice-pair" | "choice" => Ok(Self::ChoicePair),
            "biased-vs-pure" | "contrast" => Ok(Self::BiasedVsPure),
            other => Err(Error::config(format!("unknown trajectory mode `{other}`"))),
        }
    }
}

/// Per-layer divergence in nats, layers strictly increasing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JsdTrajectory {
    pub per_layer: Vec<(usize, f64)>,
    pub mode: TrajectoryMode,
}

impl JsdTrajectory {
    /// CSV with header `layer,jsd_nats,mode`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,jsd_nats,mode\n");
        for (layer, value) in &self.per_layer {
            let _ = writeln!(out, "{layer},{value:.12},{}", self.mode);
        }
        out
    }

    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.per_layer.iter().map(|(_, v)| *v)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LensResult {
    pub trajectory: JsdTrajectory,
    pub critical_layer: usize,
    pub e_bias: Vec<f64>,
    pub layer_start: usize,
}

fn hidden_of(trace: &LayerTrace) -> Result<&HiddenStates> {
    trace
        .hidden
        .as_ref()
        .ok_or_else(|| Error::usage("trace carries no hidden states (forward with layers)"))
}

/// Unembedding · hidden(layer, last position).
pub fn layer_logits(trace: &LayerTrace, layer: usize) -> Result<Vec<f64>> {
    let hidden = hidden_of(trace)?;
    if layer >= hidden.n_layers() {
        return Err(Error::usage(format!(
            "layer {layer} out of range for {} layers",
            hidden.n_layers()
        )));
    }
    if hidden.seq_len() == 0 {
        return Err(Error::usage("trace has an empty sequence"));
    }
    let unembedding = trace
        .unembedding
        .as_ref()
        .ok_or_else(|| Error::Capability("trace carries no unembedding".into()))?;
    if unembedding.cols() != hidden.dim() {
        return Err(Error::usage("unembedding width differs from hidden_dim"));
    }
    Ok(unembedding.matvec(hidden.at(layer, hidden.seq_len() - 1)))
}

/// Full-vocabulary distribution read out at `layer`.
pub fn project_layer(trace: &LayerTrace, layer: usize) -> Result<ProbDist> {
    softmax(&layer_logits(trace, layer)?)
}

/// JSD between the two-point restriction `[P(a), P(b)]` (renormalized) and
/// its mirror `[P(b), P(a)]`, per layer: 0 when the options are equally
/// likely, ln 2 when one of them takes all the restricted mass.
pub fn jsd_trajectory_choice(
    trace: &LayerTrace,
    (option_a, option_b): (TokenId, TokenId),
) -> Result<JsdTrajectory> {
    if option_a == option_b {
        return Err(Error::usage(
            "choice-pair trajectory needs two distinct tokens",
        ));
    }
    let n_layers = hidden_of(trace)?.n_layers();
    let mut per_layer = Vec::with_capacity(n_layers);
    for layer in 0..n_layers {
        let logits = layer_logits(trace, layer)?;
        let (&la, &lb) = logits
            .get(option_a)
            .zip(logits.get(option_b))
            .ok_or_else(|| Error::usage("option token out of vocabulary range"))?;
        let pair = softmax(&[la, lb])?;
        let mirror = ProbDist::new(vec![pair.as_slice()[1], pair.as_slice()[0]])?;
        per_layer.push((layer, jsd(&pair, &mirror)?));
    }
    Ok(JsdTrajectory {
        per_layer,
        mode: TrajectoryMode::ChoicePair,
    })
}

/// Per-layer JSD between full-vocabulary projections of a biased and a pure
/// trace.
pub fn jsd_trajectory_contrast(
    trace_biased: &LayerTrace,
    trace_pure: &LayerTrace,
) -> Result<JsdTrajectory> {
    let hb = hidden_of(trace_biased)?;
    let hp = hidden_of(trace_pure)?;
    if hb.n_layers() != hp.n_layers()
        || hb.dim() != hp.dim()
        || trace_biased.final_logits.len() != trace_pure.final_logits.len()
    {
        return Err(Error::usage("traces come from different models"));
    }
    let per_layer = (0..hb.n_layers())
        .map(|layer| {
            let p = project_layer(trace_biased, layer)?;
            let q = project_layer(trace_pure, layer)?;
            Ok((layer, jsd(&p, &q)?))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(JsdTrajectory {
        per_layer,
        mode: TrajectoryMode::BiasedVsPure,
    })
}

/// Layer ≥ `layer_start` with maximal divergence; the lowest such layer on
/// ties.
pub fn locate_critical_layer(traj: &JsdTrajectory, layer_start: usize) -> Result<usize> {
    let mut best: Option<(usize, f64)> = None;
    for &(layer, value) in traj.per_layer.iter().filter(|(l, _)| *l >= layer_start) {
        if best.is_none_or(|(_, b)| value > b) {
            best = Some((layer, value));
        }
    }
    best.map(|(l, _)| l).ok_or_else(|| {
        let last = traj.per_layer.last().map(|(l, _)| *l);
        Error::config(format!(
            "no layer at or above layer_start {layer_start} (deepest layer is {}); lower --layer-start",
            last.map_or("none".to_string(), |l| l.to_string())
        ))
    })
}

/// Mean hidden state at `layer` over `context_positions`.
pub fn extract_bias_vector(
    trace: &LayerTrace,
    context_positions: &[usize],
    layer: usize,
) -> Result<Vec<f64>> {
    if context_positions.is_empty() {
        return Err(Error::usage(
            "bias vector extraction needs a nonempty removable context",
        ));
    }
    let hidden = hidden_of(trace)?;
    if layer >= hidden.n_layers() {
        return Err(Error::usage(format!("layer {layer} out of range")));
    }
    let mut mean = vec![0.0; hidden.dim()];
    for &pos in context_positions {
        if pos >= hidden.seq_len() {
            return Err(Error::usage(format!(
                "context position {pos} beyond sequence length {}",
                hidden.seq_len()
            )));
        }
        mean.iter_mut()
            .zip(hidden.at(layer, pos))
            .for_each(|(m, h)| *m += h);
    }
    let n = context_positions.len() as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    Ok(mean)
}

/// Critical layer and bias vector for one biased/pure pair.
pub fn analyze(
    trace_biased: &LayerTrace,
    trace_pure: &LayerTrace,
    context_positions: &[usize],
    layer_start: usize,
) -> Result<LensResult> {
    let trajectory = jsd_trajectory_contrast(trace_biased, trace_pure)?;
    let critical_layer = locate_critical_layer(&trajectory, layer_start)?;
    let e_bias = extract_bias_vector(trace_biased, context_positions, critical_layer)?;
    Ok(LensResult {
        trajectory,
        critical_layer,
        e_bias,
        layer_start,
    })
}
