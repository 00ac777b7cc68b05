use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use logitshield_core::bench::{self, Sample};
use logitshield_core::decode::{self, InterventionConfig, LogitPair, Method, Prompt};
use logitshield_core::lens;
use logitshield_core::model::{LayeredModel, ToyModel as CoreToy};
use logitshield_core::numerics::{self, CandidateSet, LogitVector, ProbDist, TokenId};
use logitshield_core::synthetic::{make_toy as core_make_toy, ToyConfig};
use logitshield_core::Error;

fn py_err(e: Error) -> PyErr {
    if e.is_configuration() {
        PyValueError::new_err(e.to_string())
    } else {
        PyRuntimeError::new_err(e.to_string())
    }
}

fn logits(v: Vec<f64>) -> PyResult<LogitVector> {
    LogitVector::new(v).map_err(py_err)
}

fn dist(v: Vec<f64>) -> PyResult<ProbDist> {
    ProbDist::new(v).map_err(py_err)
}

#[pyfunction]
fn softmax(x: Vec<f64>) -> PyResult<Vec<f64>> {
    Ok(numerics::softmax(&x).map_err(py_err)?.into_inner())
}

#[pyfunction]
fn kl_divergence(p: Vec<f64>, q: Vec<f64>) -> PyResult<f64> {
    numerics::kl_divergence(&dist(p)?, &dist(q)?).map_err(py_err)
}

/// Jensen-Shannon divergence in nats.
#[pyfunction]
fn jsd(p: Vec<f64>, q: Vec<f64>) -> PyResult<f64> {
    numerics::jsd(&dist(p)?, &dist(q)?).map_err(py_err)
}

#[pyfunction]
fn cosine(a: Vec<f64>, b: Vec<f64>) -> PyResult<f64> {
    Ok(numerics::cosine(&a, &b).map_err(py_err)?.value)
}

#[pyfunction]
fn top_k(x: Vec<f64>, k: usize) -> PyResult<Vec<TokenId>> {
    Ok(numerics::top_k(&logits(x)?, k)
        .map_err(py_err)?
        .as_slice()
        .to_vec())
}

#[pyfunction]
fn static_correct(biased: Vec<f64>, pure: Vec<f64>, gamma: f64) -> PyResult<Vec<f64>> {
    let pair = LogitPair::new(logits(biased)?, logits(pure)?).map_err(py_err)?;
    Ok(decode::static_correct(&pair, gamma).into_inner())
}

type Corrected = (Vec<f64>, Vec<TokenId>, Vec<(TokenId, f64, f64, f64)>);

/// Returns the corrected candidate logits and one `(token, r, d, p)` tuple
/// per candidate.
#[pyfunction]
fn dynamic_correct(
    biased: Vec<f64>,
    pure: Vec<f64>,
    k: usize,
    e_bias: Vec<f64>,
    token_vectors: Vec<Vec<f64>>,
    gamma: f64,
) -> PyResult<Corrected> {
    let pair = LogitPair::new(logits(biased)?, logits(pure)?).map_err(py_err)?;
    let candidates: CandidateSet = numerics::top_k(&pair.biased, k).map_err(py_err)?;
    let vectors = candidates
        .iter()
        .map(|t| {
            token_vectors
                .get(t)
                .cloned()
                .ok_or_else(|| PyValueError::new_err(format!("no token vector for token {t}")))
        })
        .collect::<PyResult<Vec<_>>>()?;
    let (corrected, breakdown) =
        decode::dynamic_correct(&pair, &candidates, &e_bias, &vectors, gamma).map_err(py_err)?;
    let records = breakdown
        .records
        .iter()
        .map(|r| (r.token, r.r, r.d, r.p))
        .collect();
    Ok((corrected, candidates.as_slice().to_vec(), records))
}

fn config_from(
    method: &str,
    gamma: f64,
    top_k: usize,
    layer_start: usize,
    greedy: bool,
    seed: u64,
    max_new_tokens: usize,
) -> PyResult<InterventionConfig> {
    let method: Method = method.parse().map_err(py_err)?;
    if method == Method::RepeBaseline {
        return Err(PyValueError::new_err(
            "repe-baseline is available through the command-line sweep",
        ));
    }
    Ok(InterventionConfig {
        method,
        gamma,
        top_k,
        layer_start,
        greedy,
        seed,
        max_new_tokens,
        ..Default::default()
    })
}

/// In-process toy model.
#[pyclass(frozen)]
struct ToyModel {
    inner: CoreToy,
}

#[pymethods]
impl ToyModel {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: CoreToy::load(&path).map_err(py_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(py_err)
    }

    fn meta<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let meta = self.inner.meta().map_err(py_err)?;
        let d = PyDict::new(py);
        d.set_item("vocab_size", meta.vocab_size)?;
        d.set_item("n_layers", meta.n_layers)?;
        d.set_item("hidden_dim", meta.hidden_dim)?;
        d.set_item("token_names", meta.token_names)?;
        d.set_item("inject_layer", self.inner.spec().inject_layer)?;
        Ok(d)
    }

    fn forward(&self, tokens: Vec<TokenId>) -> PyResult<Vec<f64>> {
        Ok(self
            .inner
            .forward(&tokens, false)
            .map_err(py_err)?
            .final_logits
            .into_inner())
    }

    /// Hidden states as `[layer][position][dim]`.
    fn hidden_states(&self, tokens: Vec<TokenId>) -> PyResult<Vec<Vec<Vec<f64>>>> {
        let trace = self.inner.forward(&tokens, true).map_err(py_err)?;
        Ok(trace.hidden.map(|h| h.to_nested()).unwrap_or_default())
    }

    /// Biased-vs-pure trajectory, critical layer and bias vector.
    #[pyo3(signature = (context, question, layer_start = lens::DEFAULT_LAYER_START))]
    fn analyze<'py>(
        &self,
        py: Python<'py>,
        context: Vec<TokenId>,
        question: Vec<TokenId>,
        layer_start: usize,
    ) -> PyResult<Bound<'py, PyDict>> {
        let prompt = Prompt { context, question };
        let biased = self
            .inner
            .forward(&prompt.with_context(), true)
            .map_err(py_err)?;
        let pure = self.inner.forward(&prompt.question, true).map_err(py_err)?;
        let result = lens::analyze(&biased, &pure, &prompt.context_positions(), layer_start)
            .map_err(py_err)?;
        let d = PyDict::new(py);
        d.set_item("critical_layer", result.critical_layer)?;
        d.set_item("e_bias", result.e_bias)?;
        d.set_item(
            "trajectory",
            result.trajectory.values().collect::<Vec<f64>>(),
        )?;
        Ok(d)
    }

    #[pyo3(signature = (
        context, question, method = "none", gamma = 0.0, top_k = decode::DEFAULT_TOP_K,
        layer_start = lens::DEFAULT_LAYER_START, greedy = false, seed = 0,
        max_new_tokens = decode::DEFAULT_MAX_NEW_TOKENS
    ))]
    #[allow(clippy::too_many_arguments)]
    fn generate(
        &self,
        context: Vec<TokenId>,
        question: Vec<TokenId>,
        method: &str,
        gamma: f64,
        top_k: usize,
        layer_start: usize,
        greedy: bool,
        seed: u64,
        max_new_tokens: usize,
    ) -> PyResult<Vec<TokenId>> {
        let config = config_from(
            method,
            gamma,
            top_k,
            layer_start,
            greedy,
            seed,
            max_new_tokens,
        )?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = decode::generate(
            &self.inner,
            &Prompt { context, question },
            &config,
            &mut rng,
        )
        .map_err(py_err)?;
        Ok(g.tokens)
    }

    /// Scores a JSON-lines dataset; returns the report as a dict.
    #[pyo3(signature = (
        dataset, method = "none", gamma = 0.0, seeds = vec![0], greedy = false,
        with_context = true, top_k = decode::DEFAULT_TOP_K,
        layer_start = lens::DEFAULT_LAYER_START
    ))]
    #[allow(clippy::too_many_arguments)]
    fn evaluate<'py>(
        &self,
        py: Python<'py>,
        dataset: PathBuf,
        method: &str,
        gamma: f64,
        seeds: Vec<u64>,
        greedy: bool,
        with_context: bool,
        top_k: usize,
        layer_start: usize,
    ) -> PyResult<Bound<'py, PyDict>> {
        let samples: Vec<Sample> = bench::load_dataset(&dataset).map_err(py_err)?;
        let config = config_from(method, gamma, top_k, layer_start, greedy, 0, 1)?;
        let report = bench::evaluate(&self.inner, &samples, &config, &seeds, with_context, 1)
            .map_err(py_err)?;
        let d = PyDict::new(py);
        d.set_item("method", &report.method)?;
        d.set_item("gamma", report.gamma)?;
        d.set_item("seeds", &report.seeds)?;
        d.set_item("stereotype_pct", report.shares.stereotype)?;
        d.set_item("anti_pct", report.shares.anti)?;
        d.set_item("unrelated_pct", report.shares.unrelated)?;
        d.set_item("invalid_pct", report.shares.invalid)?;
        d.set_item("csv", bench::reports_csv(std::slice::from_ref(&report)))?;
        Ok(d)
    }
}

/// Writes a toy model, dataset and ground truth into `out_dir`; returns the
/// model.
#[pyfunction]
#[pyo3(signature = (out_dir, inject_layer = 16, bias_strength = 2.0, n_layers = 24, seed = 0))]
fn make_toy(
    out_dir: PathBuf,
    inject_layer: usize,
    bias_strength: f64,
    n_layers: usize,
    seed: u64,
) -> PyResult<ToyModel> {
    let bundle = core_make_toy(&ToyConfig {
        inject_layer,
        bias_strength,
        n_layers,
        seed,
        ..Default::default()
    })
    .map_err(py_err)?;
    std::fs::create_dir_all(&out_dir).map_err(|e| py_err(e.into()))?;
    bundle
        .model
        .save(&out_dir.join("toy_model.json"))
        .map_err(py_err)?;
    bench::save_dataset(&out_dir.join("dataset.jsonl"), &bundle.dataset).map_err(py_err)?;
    Ok(ToyModel {
        inner: bundle.model,
    })
}

#[pymodule]
fn logitshield(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(softmax, m)?)?;
    m.add_function(wrap_pyfunction!(kl_divergence, m)?)?;
    m.add_function(wrap_pyfunction!(jsd, m)?)?;
    m.add_function(wrap_pyfunction!(cosine, m)?)?;
    m.add_function(wrap_pyfunction!(top_k, m)?)?;
    m.add_function(wrap_pyfunction!(static_correct, m)?)?;
    m.add_function(wrap_pyfunction!(dynamic_correct, m)?)?;
    m.add_function(wrap_pyfunction!(make_toy, m)?)?;
    m.add_class::<ToyModel>()?;
    Ok(())
}
