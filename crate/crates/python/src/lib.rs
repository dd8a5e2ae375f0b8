//! Python bindings: sessions, graphs, training, evaluation, explanation and
//! the asymmetry statistics. Items are integer indices into a vocabulary;
//! sessions are lists of indices.

use std::fs;
use std::io::BufReader;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use cgsr::eval::{evaluate, metrics as metrics_at};
use cgsr::explain::explain as explain_item;
use cgsr::graphs::{build_session_graph, format_sig12};
use cgsr::ingest::{self, PreprocessConfig, SessionKey};
use cgsr::stats;
use cgsr::trainer::{self, Preset};
use cgsr::{CausalOptions, Cgsr, Checkpoint, EncodedItems, Parameters, Session, TrainConfig};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn io_err(e: impl std::fmt::Display) -> PyErr {
    PyIOError::new_err(e.to_string())
}

fn to_sessions(sessions: Vec<Vec<usize>>) -> Vec<Session> {
    sessions
        .into_iter()
        .enumerate()
        .map(|(i, items)| Session::new(i.to_string(), items))
        .collect()
}

/// Item id ↔ index mapping, in first-seen order.
#[pyclass(name = "Vocabulary", module = "cgsr", frozen)]
struct PyVocabulary(cgsr::Vocabulary);

#[pymethods]
impl PyVocabulary {
    #[new]
    fn new(ids: Vec<String>) -> Self {
        Self(cgsr::Vocabulary::from_ids(ids))
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let f = fs::File::open(path).map_err(io_err)?;
        ingest::Vocabulary::read_tsv(BufReader::new(f))
            .map(Self)
            .map_err(value_err)
    }

    fn index_of(&self, id: &str) -> Option<usize> {
        self.0.index_of(id)
    }

    fn id_of(&self, index: usize) -> Option<String> {
        self.0.id_of(index).map(str::to_string)
    }

    fn ids(&self) -> Vec<String> {
        self.0.ids().to_vec()
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }
}

/// A preprocessed interaction log: train and test sessions plus the vocabulary.
#[pyclass(name = "Dataset", module = "cgsr", get_all)]
struct PyDataset {
    train: Vec<Vec<usize>>,
    test: Vec<Vec<usize>>,
    train_ids: Vec<String>,
    test_ids: Vec<String>,
    vocab: Py<PyVocabulary>,
}

/// Reads a `session_id<TAB>timestamp<TAB>item_id` log and filters, splits and
/// indexes it.
#[pyfunction]
#[pyo3(signature = (path, split = "last:0.2", min_item_freq = 5, min_len = 2, max_len = None, user_day = false))]
fn prep(
    py: Python<'_>,
    path: &str,
    split: &str,
    min_item_freq: usize,
    min_len: usize,
    max_len: Option<usize>,
    user_day: bool,
) -> PyResult<PyDataset> {
    let f = fs::File::open(path).map_err(io_err)?;
    let log = ingest::parse_log(BufReader::new(f), ingest::LogFormat::Tsv).map_err(value_err)?;
    let key = if user_day {
        SessionKey::UserDay
    } else {
        SessionKey::SessionId
    };
    let cfg = PreprocessConfig {
        min_item_freq,
        min_len,
        max_len,
        split: split.parse().map_err(value_err)?,
    };
    let data = ingest::preprocess(&ingest::sessionize(&log, key), &cfg).map_err(value_err)?;
    let unzip = |s: Vec<Session>| -> (Vec<Vec<usize>>, Vec<String>) { s.into_iter().map(|s| (s.items, s.id)).unzip() };
    let (train, train_ids) = unzip(data.train);
    let (test, test_ids) = unzip(data.test);
    Ok(PyDataset {
        train,
        test,
        train_ids,
        test_ids,
        vocab: Py::new(py, PyVocabulary(data.vocab))?,
    })
}

/// Reads a sessions file: one session per line, space-separated indices.
#[pyfunction]
#[pyo3(signature = (path, n_items = None))]
fn read_sessions(path: &str, n_items: Option<usize>) -> PyResult<Vec<Vec<usize>>> {
    let f = fs::File::open(path).map_err(io_err)?;
    let s = ingest::read_sessions(BufReader::new(f), n_items).map_err(value_err)?;
    Ok(s.into_iter().map(|s| s.items).collect())
}

/// The session, effect, cause and correlation graphs of a set of sessions.
#[pyclass(name = "Graphs", module = "cgsr", frozen)]
struct PyGraphs(cgsr::GraphSet);

#[pymethods]
impl PyGraphs {
    #[new]
    #[pyo3(signature = (sessions, n_items, keep_common_cause = false, unit_weights = false, second_order = false))]
    fn new(
        sessions: Vec<Vec<usize>>,
        n_items: usize,
        keep_common_cause: bool,
        unit_weights: bool,
        second_order: bool,
    ) -> PyResult<Self> {
        let opts = CausalOptions {
            keep_common_cause,
            unit_weights,
            second_order,
        };
        cgsr::GraphSet::build(&to_sessions(sessions), n_items, opts)
            .map(Self)
            .map_err(value_err)
    }

    /// `(src, dst, count)` transitions.
    fn session_edges(&self) -> Vec<(usize, usize, u64)> {
        self.0.session.edges().collect()
    }

    /// `(src, dst, weight)`.
    fn effect_edges(&self) -> Vec<(usize, usize, f64)> {
        self.0.effect.edges().iter().map(|e| (e.src, e.dst, e.weight)).collect()
    }

    fn cause_edges(&self) -> Vec<(usize, usize, f64)> {
        self.0.cause.edges().iter().map(|e| (e.src, e.dst, e.weight)).collect()
    }

    /// `(a, b, first, chain, fork, collider)` with `a < b`.
    fn correlation_edges(&self) -> Vec<(usize, usize, f64, f64, f64, f64)> {
        self.0
            .correlation
            .edges()
            .iter()
            .map(|e| {
                let w = e.weights;
                (e.a, e.b, w.first, w.chain, w.fork, w.collider)
            })
            .collect()
    }

    fn effect_weight(&self, src: usize, dst: usize) -> Option<f64> {
        self.0.effect.weight(src, dst)
    }

    fn num_nodes(&self) -> usize {
        self.0.num_nodes()
    }
}

/// Training settings as flat `key = value` pairs.
#[pyclass(name = "TrainConfig", module = "cgsr", from_py_object)]
#[derive(Clone)]
struct PyTrainConfig(TrainConfig);

#[pymethods]
impl PyTrainConfig {
    /// Defaults, then `text` (config file syntax), then `preset`, then `overrides`.
    #[new]
    #[pyo3(signature = (text = None, preset = None, **overrides))]
    fn new(
        text: Option<&str>,
        preset: Option<&str>,
        overrides: Option<&Bound<'_, pyo3::types::PyDict>>,
    ) -> PyResult<Self> {
        let mut cfg = TrainConfig::default();
        if let Some(t) = text {
            cfg.apply_text(t).map_err(value_err)?;
        }
        if let Some(p) = preset {
            p.parse::<Preset>().map_err(value_err)?.apply(&mut cfg);
        }
        if let Some(kw) = overrides {
            for (k, v) in kw.iter() {
                let key: String = k.extract()?;
                let value = v.str()?.to_string();
                let value = match value.as_str() {
                    "True" => "true".to_string(),
                    "False" => "false".to_string(),
                    _ => value,
                };
                cfg.set(&key, &value).map_err(value_err)?;
            }
        }
        Ok(Self(cfg))
    }

    fn set(&mut self, key: &str, value: &str) -> PyResult<()> {
        self.0.set(key, value).map_err(value_err)
    }

    fn get(&self, key: &str) -> PyResult<String> {
        self.0
            .to_key_values()
            .into_iter()
            .find(|(k, _)| *k == key)
            .map(|(_, v)| v)
            .ok_or_else(|| PyValueError::new_err(format!("unknown config key {key:?}")))
    }

    fn to_dict(&self) -> Vec<(String, String)> {
        self.0
            .to_key_values()
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect()
    }

    fn to_text(&self) -> String {
        self.0.to_text()
    }
}

/// `(epoch, train_loss, (hr20, mrr20, ndcg20) or None)`.
type EpochRow = (usize, f64, Option<(f64, f64, f64)>);

/// One metrics row: `(k, hr, mrr, ndcg)`.
type MetricRow = (usize, f64, f64, f64);

/// A trained model bound to the graphs of its training sessions.
#[pyclass(name = "Model", module = "cgsr", frozen)]
struct PyModel {
    model: Cgsr,
    params: Parameters,
    config: TrainConfig,
    encoded: EncodedItems,
    history: Vec<EpochRow>,
    best_epoch: usize,
}

impl PyModel {
    fn build(model: Cgsr, params: Parameters, config: TrainConfig) -> PyResult<Self> {
        let encoded = model.encode_items(&params).map_err(value_err)?;
        Ok(Self {
            model,
            params,
            config,
            encoded,
            history: Vec::new(),
            best_epoch: 0,
        })
    }

    fn check_session(&self, session: &[usize]) -> PyResult<()> {
        let n = self.model.n_items();
        match session.iter().find(|&&i| i >= n) {
            Some(i) => Err(PyValueError::new_err(format!("item {i} out of range for {n} items"))),
            None if session.is_empty() => Err(PyValueError::new_err("empty session")),
            None => Ok(()),
        }
    }
}

#[pymethods]
impl PyModel {
    /// Fits a model on `sessions`; the last `val_fraction` of them drive early
    /// stopping. The GIL is released while training.
    #[staticmethod]
    #[pyo3(signature = (sessions, n_items, config = None))]
    fn train(
        py: Python<'_>,
        sessions: Vec<Vec<usize>>,
        n_items: usize,
        config: Option<PyTrainConfig>,
    ) -> PyResult<Self> {
        let cfg = config.map(|c| c.0).unwrap_or_default();
        let sessions = to_sessions(sessions);
        let (model, outcome) = py
            .detach(|| trainer::train(&sessions, n_items, &cfg))
            .map_err(value_err)?;
        let mut m = Self::build(model, outcome.params, cfg)?;
        m.history = outcome.history.iter().map(|r| (r.epoch, r.train_loss, r.val)).collect();
        m.best_epoch = outcome.best_epoch;
        Ok(m)
    }

    /// Loads a checkpoint; `train_sessions` must be the sessions it was trained on.
    #[staticmethod]
    fn load(path: &str, train_sessions: Vec<Vec<usize>>) -> PyResult<Self> {
        let bytes = fs::read(path).map_err(io_err)?;
        let ck = Checkpoint::read(&bytes[..]).map_err(value_err)?;
        let cfg = TrainConfig::from_checkpoint(&ck).map_err(value_err)?;
        let n = ck.params.layout.n_items;
        let graphs = cgsr::GraphSet::build(&to_sessions(train_sessions), n, cfg.causal).map_err(value_err)?;
        let model = Cgsr::new(cfg.model.clone(), &graphs).map_err(value_err)?;
        Self::build(model, ck.params, cfg)
    }

    fn save(&self, path: &str) -> PyResult<()> {
        let bytes = self.config.checkpoint(self.params.clone()).to_bytes();
        fs::write(path, bytes).map_err(io_err)
    }

    #[getter]
    fn n_items(&self) -> usize {
        self.model.n_items()
    }

    #[getter]
    fn config(&self) -> PyTrainConfig {
        PyTrainConfig(self.config.clone())
    }

    /// `(epoch, train_loss, (hr20, mrr20, ndcg20) or None)` per epoch.
    #[getter]
    fn history(&self) -> Vec<EpochRow> {
        self.history.clone()
    }

    #[getter]
    fn best_epoch(&self) -> usize {
        self.best_epoch
    }

    /// Per-item scores: `total`, `probs` and the `causality`, `correlation`
    /// and `preference` terms (None when disabled).
    fn score(&self, session: Vec<usize>) -> PyResult<Vec<(String, Option<Vec<f64>>)>> {
        self.check_session(&session)?;
        let s = self
            .model
            .score_session(&self.params, &self.encoded, &session)
            .map_err(value_err)?;
        Ok(vec![
            ("total".into(), Some(s.total)),
            ("probs".into(), Some(s.probs)),
            ("causality".into(), s.causality),
            ("correlation".into(), s.correlation),
            ("preference".into(), s.preference),
        ])
    }

    /// The `k` best next items as `(index, probability)`, best first.
    #[pyo3(signature = (session, k = 20))]
    fn recommend(&self, session: Vec<usize>, k: usize) -> PyResult<Vec<(usize, f64)>> {
        self.check_session(&session)?;
        self.model
            .recommend(&self.params, &self.encoded, &session, k)
            .map_err(value_err)
    }

    /// Ranks the next item after every prefix of every session.
    #[pyo3(signature = (sessions, cutoffs = vec![5, 10, 20]))]
    fn evaluate(&self, py: Python<'_>, sessions: Vec<Vec<usize>>, cutoffs: Vec<usize>) -> PyResult<Vec<MetricRow>> {
        let sessions = to_sessions(sessions);
        let r = py
            .detach(|| evaluate(&self.model, &self.params, &sessions, &cutoffs))
            .map_err(value_err)?;
        Ok(r.metrics.iter().map(|m| (m.k, m.hr, m.mrr, m.ndcg)).collect())
    }

    /// Attribution report for recommending `item` after `session`, in the
    /// text export format.
    #[pyo3(signature = (session, item, session_id = "session", vocab = None))]
    fn explain(
        &self,
        session: Vec<usize>,
        item: usize,
        session_id: &str,
        vocab: Option<&PyVocabulary>,
    ) -> PyResult<String> {
        self.check_session(&session)?;
        let s = Session::new(session_id, session);
        let report = explain_item(&self.model, &self.params, &self.encoded, &s, item).map_err(value_err)?;
        let mut buf = Vec::new();
        report.write_text(&mut buf, vocab.map(|v| &v.0)).map_err(io_err)?;
        String::from_utf8(buf).map_err(value_err)
    }
}

/// HR, MRR and NDCG at `k` from 1-based ranks.
#[pyfunction]
fn metrics(ranks: Vec<usize>, k: usize) -> PyResult<MetricRow> {
    let m = metrics_at(&ranks, k).map_err(value_err)?;
    Ok((m.k, m.hr, m.mrr, m.ndcg))
}

/// `p(a|b)` over the transitions of `sessions`.
#[pyfunction]
fn pab(sessions: Vec<Vec<usize>>, n_items: usize, a: usize, b: usize) -> PyResult<f64> {
    let g = build_session_graph(&to_sessions(sessions), n_items).map_err(value_err)?;
    stats::pab(&g, a, b).map_err(value_err)
}

/// The 10x10 transition asymmetry grid and, with `epsilon`, the number of
/// pairs whose conditional probabilities differ by more than it.
#[pyfunction]
#[pyo3(signature = (sessions, n_items, epsilon = None))]
fn asymmetry_grid(
    sessions: Vec<Vec<usize>>,
    n_items: usize,
    epsilon: Option<f64>,
) -> PyResult<(Vec<Vec<u64>>, Option<usize>)> {
    let g = build_session_graph(&to_sessions(sessions), n_items).map_err(value_err)?;
    let grid = stats::build_grid(&g, epsilon).map_err(value_err)?;
    Ok((grid.grid.iter().map(|r| r.to_vec()).collect(), grid.asymmetric_pairs))
}

/// A float with 12 significant digits, as written in graph exports.
#[pyfunction]
fn sig12(x: f64) -> String {
    format_sig12(x)
}

#[pymodule]
#[pyo3(name = "cgsr")]
pub fn cgsr_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<PyVocabulary>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyGraphs>()?;
    m.add_class::<PyTrainConfig>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(prep, m)?)?;
    m.add_function(wrap_pyfunction!(read_sessions, m)?)?;
    m.add_function(wrap_pyfunction!(metrics, m)?)?;
    m.add_function(wrap_pyfunction!(pab, m)?)?;
    m.add_function(wrap_pyfunction!(asymmetry_grid, m)?)?;
    m.add_function(wrap_pyfunction!(sig12, m)?)?;
    Ok(())
}
