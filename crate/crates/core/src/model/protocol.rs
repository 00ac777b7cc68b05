//! Line-delimited JSON wire protocol for external logits providers.
//!
//! One UTF-8 JSON object per line in each direction:
//!
//! | request                                          | response                                   |
//! |--------------------------------------------------|--------------------------------------------|
//! | `{"op":"meta"}`                                  | `{"vocab_size",.."tokens",.."has_unembedding"}` |
//! | `{"op":"forward","tokens":[..],"want_layers":b}` | `{"final_logits":[..],"hidden":[[[..]]]|null}` |
//! | `{"op":"embedding","token":t}`                   | `{"vector":[..]}`                          |
//! | `{"op":"forward_steered","tokens":[..],"layer":l,"vector":[..],"multiplier":m}` | as `forward` |
//!
//! Failures are reported as `{"error":"..."}`. Floats are written with 17
//! significant digits; unknown fields are ignored.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use super::{LayerTrace, LayeredModel, Steering, TokenVectorSource};
use crate::error::{Error, Result};
use crate::numerics::TokenId;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Request {
    Meta,
    Forward {
        tokens: Vec<TokenId>,
        want_layers: bool,
    },
    Embedding {
        token: TokenId,
        #[serde(default)]
        source: TokenVectorSource,
    },
    ForwardSteered {
        tokens: Vec<TokenId>,
        layer: usize,
        vector: Vec<f64>,
        multiplier: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaResponse {
    pub vocab_size: usize,
    pub n_layers: usize,
    pub hidden_dim: usize,
    pub tokens: Vec<String>,
    pub has_unembedding: bool,
    #[serde(default)]
    pub has_steering: bool,
    /// Dimension of token vectors when it differs from `hidden_dim`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding_dim: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct ForwardResponse {
    pub final_logits: Vec<f64>,
    #[serde(default)]
    pub hidden: Option<Vec<Vec<Vec<f64>>>>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct EmbeddingResponse {
    pub vector: Vec<f64>,
}

#[derive(Debug, Deserialize)]
struct ErrorResponse {
    error: String,
}

/// Formats a float with 17 significant digits.
pub fn format_f64(x: f64) -> String {
    format!("{x:.16e}")
}

/// JSON array text for `values`, 17 significant digits each.
pub fn float_array(values: &[f64]) -> String {
    let mut out = String::with_capacity(values.len() * 24 + 2);
    out.push('[');
    for (i, v) in values.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        out.push_str(&format_f64(*v));
    }
    out.push(']');
    out
}

fn nested_array<T>(items: &[T], inner: impl Fn(&T) -> String) -> String {
    let parts: Vec<String> = items.iter().map(inner).collect();
    format!("[{}]", parts.join(","))
}

/// Encodes a forward response line (without trailing newline).
pub fn encode_forward(trace: &LayerTrace) -> String {
    let hidden = match &trace.hidden {
        Some(h) => nested_array(&h.to_nested(), |layer| {
            nested_array(layer, |v: &Vec<f64>| float_array(v))
        }),
        None => "null".to_string(),
    };
    format!(
        "{{\"final_logits\":{},\"hidden\":{hidden}}}",
        float_array(trace.final_logits.as_slice())
    )
}

pub fn encode_embedding(vector: &[f64]) -> String {
    format!("{{\"vector\":{}}}", float_array(vector))
}

pub fn encode_error(message: &str) -> String {
    serde_json::json!({ "error": message }).to_string()
}

/// Encodes a request line. Float payloads use 17 significant digits.
pub fn encode_request(req: &Request) -> String {
    match req {
        Request::ForwardSteered {
            tokens,
            layer,
            vector,
            multiplier,
        } => format!(
            "{{\"op\":\"forward_steered\",\"tokens\":{},\"layer\":{layer},\"vector\":{},\"multiplier\":{}}}",
            serde_json::to_string(tokens).unwrap_or_default(),
            float_array(vector),
            format_f64(*multiplier)
        ),
        other => serde_json::to_string(other).unwrap_or_default(),
    }
}

/// Decodes a response line into `T`, surfacing `{"error":..}` replies.
pub fn decode_response<T: for<'de> Deserialize<'de>>(line: &str) -> Result<T> {
    let value: serde_json::Value = serde_json::from_str(line)
        .map_err(|e| Error::Protocol(format!("malformed response: {e}")))?;
    if value.get("error").is_some() {
        let err: ErrorResponse =
            serde_json::from_value(value).map_err(|e| Error::Protocol(e.to_string()))?;
        return Err(Error::Protocol(format!("server error: {}", err.error)));
    }
    serde_json::from_value(value).map_err(|e| Error::Protocol(format!("unexpected response: {e}")))
}

fn handle<M: LayeredModel + ?Sized>(model: &M, line: &str) -> Result<String> {
    let request: Request =
        serde_json::from_str(line).map_err(|e| Error::Protocol(format!("bad request: {e}")))?;
    match request {
        Request::Meta => {
            let meta = model.meta()?;
            let resp = MetaResponse {
                vocab_size: meta.vocab_size,
                n_layers: meta.n_layers,
                hidden_dim: meta.hidden_dim,
                tokens: meta.token_names,
                has_unembedding: true,
                has_steering: model.supports_steering(),
                embedding_dim: None,
            };
            serde_json::to_string(&resp).map_err(|e| Error::Protocol(e.to_string()))
        }
        Request::Forward {
            tokens,
            want_layers,
        } => Ok(encode_forward(&model.forward(&tokens, want_layers)?)),
        Request::Embedding { token, source } => {
            Ok(encode_embedding(&model.embedding_row(token, source)?))
        }
        Request::ForwardSteered {
            tokens,
            layer,
            vector,
            multiplier,
        } => {
            let steering = Steering {
                layer,
                vector,
                multiplier,
            };
            Ok(encode_forward(&model.forward_steered(&tokens, &steering)?))
        }
    }
}

/// Serves `model` over a line-delimited stream until EOF.
pub fn serve<M, R, W>(model: &M, reader: R, mut writer: W) -> Result<()>
where
    M: LayeredModel + ?Sized,
    R: BufRead,
    W: Write,
{
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let reply = handle(model, &line).unwrap_or_else(|e| encode_error(&e.to_string()));
        writeln!(writer, "{reply}")?;
        writer.flush()?;
    }
    Ok(())
}
