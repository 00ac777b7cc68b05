use std::io::{BufRead, BufReader, Write};
use std::net::TcpStream;
use std::process::{Child, Command, Stdio};
use std::sync::{Arc, Mutex, OnceLock};

use log::debug;

use super::protocol::{
    decode_response, encode_request, EmbeddingResponse, ForwardResponse, MetaResponse, Request,
};
use super::{
    HiddenStates, LayerTrace, LayeredModel, Matrix, ModelMeta, Steering, TokenVectorSource,
};
use crate::error::{Error, Result};
use crate::numerics::{LogitVector, TokenId};

struct Connection {
    reader: Box<dyn BufRead + Send>,
    writer: Option<Box<dyn Write + Send>>,
}

impl Connection {
    fn roundtrip(&mut self, line: &str) -> Result<String> {
        let writer = self
            .writer
            .as_mut()
            .ok_or_else(|| Error::Transport("connection closed".into()))?;
        writeln!(writer, "{line}").map_err(|e| Error::Transport(e.to_string()))?;
        writer
            .flush()
            .map_err(|e| Error::Transport(e.to_string()))?;
        let mut reply = String::new();
        let n = self
            .reader
            .read_line(&mut reply)
            .map_err(|e| Error::Transport(e.to_string()))?;
        if n == 0 {
            return Err(Error::Transport("server closed the connection".into()));
        }
        Ok(reply)
    }
}

/// Client for an external logits provider, over a spawned subprocess's
/// stdio or a TCP stream. One request is in flight at a time.
pub struct ExternalModel {
    conn: Mutex<Connection>,
    child: Option<Child>,
    meta: ModelMeta,
    has_unembedding: bool,
    has_steering: bool,
    unembedding: OnceLock<Arc<Matrix>>,
}

impl ExternalModel {
    /// Spawns `command` through `sh -c` and talks to it over stdio.
    pub fn spawn(command: &str) -> Result<Self> {
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(command)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| Error::Transport(format!("cannot spawn `{command}`: {e}")))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        let conn = Connection {
            reader: Box::new(BufReader::new(stdout)),
            writer: Some(Box::new(stdin)),
        };
        Self::handshake(conn, Some(child))
    }

    pub fn connect(addr: &str) -> Result<Self> {
        let stream = TcpStream::connect(addr)
            .map_err(|e| Error::Transport(format!("cannot connect to {addr}: {e}")))?;
        let _ = stream.set_nodelay(true);
        let reader = stream
            .try_clone()
            .map_err(|e| Error::Transport(e.to_string()))?;
        let conn = Connection {
            reader: Box::new(BufReader::new(reader)),
            writer: Some(Box::new(stream)),
        };
        Self::handshake(conn, None)
    }

    fn handshake(mut conn: Connection, child: Option<Child>) -> Result<Self> {
        let reply = conn.roundtrip(&encode_request(&Request::Meta))?;
        let resp: MetaResponse = decode_response(&reply)?;
        if let Some(dim) = resp.embedding_dim.filter(|d| *d != resp.hidden_dim) {
            return Err(Error::Capability(format!(
                "token vectors have dimension {dim} but hidden states have {}",
                resp.hidden_dim
            )));
        }
        let meta = ModelMeta {
            vocab_size: resp.vocab_size,
            n_layers: resp.n_layers,
            hidden_dim: resp.hidden_dim,
            token_names: resp.tokens,
        };
        meta.validate()?;
        debug!(
            "connected to external model: V={} L={} D={}",
            meta.vocab_size, meta.n_layers, meta.hidden_dim
        );
        Ok(Self {
            conn: Mutex::new(conn),
            child,
            meta,
            has_unembedding: resp.has_unembedding,
            has_steering: resp.has_steering,
            unembedding: OnceLock::new(),
        })
    }

    fn call<T: for<'de> serde::Deserialize<'de>>(&self, req: &Request) -> Result<T> {
        let line = encode_request(req);
        let reply = self
            .conn
            .lock()
            .map_err(|_| Error::Transport("connection lock poisoned".into()))?
            .roundtrip(&line)?;
        decode_response(&reply)
    }

    fn fetch_unembedding(&self) -> Result<Arc<Matrix>> {
        if let Some(u) = self.unembedding.get() {
            return Ok(Arc::clone(u));
        }
        let rows = (0..self.meta.vocab_size)
            .map(|t| self.embedding_row(t, TokenVectorSource::Unembedding))
            .collect::<Result<Vec<_>>>()?;
        let matrix = Arc::new(Matrix::from_rows(&rows)?);
        Ok(Arc::clone(self.unembedding.get_or_init(|| matrix)))
    }

    fn to_trace(&self, resp: ForwardResponse, want_layers: bool) -> Result<LayerTrace> {
        if resp.final_logits.len() != self.meta.vocab_size {
            return Err(Error::Protocol(format!(
                "server returned {} logits for a vocabulary of {}",
                resp.final_logits.len(),
                self.meta.vocab_size
            )));
        }
        let final_logits =
            LogitVector::new(resp.final_logits).map_err(|e| Error::Protocol(e.to_string()))?;
        if !want_layers {
            return Ok(LayerTrace {
                hidden: None,
                final_logits,
                unembedding: None,
            });
        }
        let nested = resp
            .hidden
            .ok_or_else(|| Error::Capability("server did not return hidden states".into()))?;
        let hidden = HiddenStates::from_nested(&nested)?;
        if hidden.n_layers() != self.meta.n_layers || hidden.dim() != self.meta.hidden_dim {
            return Err(Error::Protocol(
                "hidden-state shape disagrees with meta".into(),
            ));
        }
        let unembedding = if self.has_unembedding {
            Some(self.fetch_unembedding()?)
        } else {
            None
        };
        Ok(LayerTrace {
            hidden: Some(hidden),
            final_logits,
            unembedding,
        })
    }
}

impl LayeredModel for ExternalModel {
    fn meta(&self) -> Result<ModelMeta> {
        Ok(self.meta.clone())
    }

    fn forward(&self, tokens: &[TokenId], want_layers: bool) -> Result<LayerTrace> {
        self.meta.check_tokens(tokens)?;
        let resp: ForwardResponse = self.call(&Request::Forward {
            tokens: tokens.to_vec(),
            want_layers,
        })?;
        self.to_trace(resp, want_layers)
    }

    fn embedding_row(&self, token: TokenId, source: TokenVectorSource) -> Result<Vec<f64>> {
        if !self.has_unembedding {
            return Err(Error::Capability(
                "server does not expose token vectors".into(),
            ));
        }
        if token >= self.meta.vocab_size {
            return Err(Error::usage(format!("token id {token} out of range")));
        }
        let resp: EmbeddingResponse = self.call(&Request::Embedding { token, source })?;
        if resp.vector.len() != self.meta.hidden_dim {
            return Err(Error::Capability(format!(
                "token vector dimension {} differs from hidden_dim {}",
                resp.vector.len(),
                self.meta.hidden_dim
            )));
        }
        Ok(resp.vector)
    }

    fn supports_steering(&self) -> bool {
        self.has_steering
    }

    fn forward_steered(&self, tokens: &[TokenId], steering: &Steering) -> Result<LayerTrace> {
        if !self.has_steering {
            return Err(Error::Capability(
                "server does not support forward_steered".into(),
            ));
        }
        self.meta.check_tokens(tokens)?;
        let resp: ForwardResponse = self.call(&Request::ForwardSteered {
            tokens: tokens.to_vec(),
            layer: steering.layer,
            vector: steering.vector.clone(),
            multiplier: steering.multiplier,
        })?;
        self.to_trace(resp, false)
    }
}

impl Drop for ExternalModel {
    fn drop(&mut self) {
        if let Ok(conn) = self.conn.get_mut() {
            conn.writer = None;
        }
        if let Some(child) = self.child.as_mut() {
            let _ = child.kill();
            let _ = child.wait();
        }
    }
}
