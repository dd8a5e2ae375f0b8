//! Mini-batch Adam training with early stopping on a held-out tail of the
//! training sessions.

use std::fmt;
use std::io::{self, Write};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::checkpoint::Checkpoint;
use crate::eval::{evaluate, EvalError};
use crate::graphs::{CausalOptions, GraphError, GraphSet};
use crate::ingest::{augment_prefixes, Sample, Session};
use crate::model::{Cgsr, LossKind, ModelConfig, ModelError, Parameters};
use crate::numcore::Array;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("config: {0}")]
    Config(String),
    #[error("no training samples")]
    NoSamples,
    #[error("non-finite gradient in {param} at coordinate {coord} (value {value}) on step {step}")]
    NonFiniteGradient {
        param: String,
        coord: usize,
        value: f64,
        step: u64,
    },
    #[error("gradient for {param} has shape {got:?}, parameter has {want:?}")]
    GradientShape {
        param: String,
        got: (usize, usize),
        want: (usize, usize),
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

/// Dataset-specific hyper-parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    Diginetica,
    Gowalla,
    Amazon,
}

impl Preset {
    pub fn learning_rate(self) -> f64 {
        match self {
            Preset::Diginetica | Preset::Gowalla => 0.001,
            Preset::Amazon => 0.003,
        }
    }

    pub fn dim(self) -> usize {
        match self {
            Preset::Diginetica => 110,
            Preset::Gowalla => 60,
            Preset::Amazon => 170,
        }
    }

    pub fn l2_penalty(self) -> f64 {
        match self {
            Preset::Diginetica | Preset::Gowalla => 1e-6,
            Preset::Amazon => 5e-6,
        }
    }

    pub fn batch_size(self) -> usize {
        match self {
            Preset::Diginetica => 20,
            Preset::Gowalla => 40,
            Preset::Amazon => 100,
        }
    }

    pub fn apply(self, cfg: &mut TrainConfig) {
        cfg.learning_rate = self.learning_rate();
        cfg.l2_penalty = self.l2_penalty();
        cfg.batch_size = self.batch_size();
        cfg.model.dim = self.dim();
    }
}

impl FromStr for Preset {
    type Err = TrainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "diginetica" => Ok(Preset::Diginetica),
            "gowalla" => Ok(Preset::Gowalla),
            "amazon" => Ok(Preset::Amazon),
            other => Err(TrainError::Config(format!(
                "unknown preset {other:?} (expected diginetica, gowalla or amazon)"
            ))),
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Preset::Diginetica => "diginetica",
            Preset::Gowalla => "gowalla",
            Preset::Amazon => "amazon",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub causal: CausalOptions,
    pub learning_rate: f64,
    pub l2_penalty: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
    pub early_stop_patience: usize,
    /// Share of the latest training sessions held out for early stopping.
    pub val_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            causal: CausalOptions::default(),
            learning_rate: 0.001,
            l2_penalty: 1e-6,
            batch_size: 100,
            epochs: 30,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 42,
            early_stop_patience: 3,
            val_fraction: 0.1,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, TrainError> {
    value
        .parse()
        .map_err(|_| TrainError::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool, TrainError> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(TrainError::Config(format!(
            "{key}: expected true or false, got {value:?}"
        ))),
    }
}

/// Splits `key = value` lines; blank lines and `#` comments are skipped.
pub fn parse_key_values(text: &str) -> Result<Vec<(String, String)>, TrainError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| TrainError::Config(format!("line {}: expected `key = value`", i + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

impl TrainConfig {
    pub const KEYS: &'static [&'static str] = &[
        "learning_rate",
        "l2_penalty",
        "batch_size",
        "epochs",
        "beta1",
        "beta2",
        "epsilon",
        "seed",
        "early_stop_patience",
        "val_fraction",
        "dim",
        "heads",
        "self_loops",
        "normalize_session_attention",
        "loss",
        "wgat_layers",
        "disable_causality",
        "disable_correlation",
        "disable_preference",
        "unit_causal_weights",
        "keep_common_cause",
        "second_order_causality",
        "drop_chain",
        "drop_fork",
        "drop_collider",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), TrainError> {
        match key {
            "learning_rate" => self.learning_rate = parse(key, value)?,
            "l2_penalty" => self.l2_penalty = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "beta1" => self.beta1 = parse(key, value)?,
            "beta2" => self.beta2 = parse(key, value)?,
            "epsilon" => self.epsilon = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "early_stop_patience" => self.early_stop_patience = parse(key, value)?,
            "val_fraction" => self.val_fraction = parse(key, value)?,
            "dim" => self.model.dim = parse(key, value)?,
            "heads" => self.model.heads = parse(key, value)?,
            "self_loops" => self.model.self_loops = parse_bool(key, value)?,
            "normalize_session_attention" => self.model.normalize_session_attention = parse_bool(key, value)?,
            "loss" => {
                self.model.loss = match value {
                    "literal" => LossKind::Literal,
                    "categorical" => LossKind::Categorical,
                    _ => {
                        return Err(TrainError::Config(format!(
                            "loss: expected literal or categorical, got {value:?}"
                        )))
                    }
                }
            }
            "wgat_layers" => self.model.wgat_layers = parse(key, value)?,
            "disable_causality" => self.model.use_causality = !parse_bool(key, value)?,
            "disable_correlation" => self.model.use_correlation = !parse_bool(key, value)?,
            "disable_preference" => self.model.use_preference = !parse_bool(key, value)?,
            "unit_causal_weights" => self.causal.unit_weights = parse_bool(key, value)?,
            "keep_common_cause" => self.causal.keep_common_cause = parse_bool(key, value)?,
            "second_order_causality" => self.causal.second_order = parse_bool(key, value)?,
            "drop_chain" => self.model.drop_chain = parse_bool(key, value)?,
            "drop_fork" => self.model.drop_fork = parse_bool(key, value)?,
            "drop_collider" => self.model.drop_collider = parse_bool(key, value)?,
            _ => return Err(TrainError::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Applies every `key = value` line of `text`.
    pub fn apply_text(&mut self, text: &str) -> Result<(), TrainError> {
        for (k, v) in parse_key_values(text)? {
            self.set(&k, &v)?;
        }
        Ok(())
    }

    /// Every key with its current value, in [`Self::KEYS`] order.
    pub fn to_key_values(&self) -> Vec<(&'static str, String)> {
        let m = &self.model;
        let values = [
            self.learning_rate.to_string(),
            self.l2_penalty.to_string(),
            self.batch_size.to_string(),
            self.epochs.to_string(),
            self.beta1.to_string(),
            self.beta2.to_string(),
            self.epsilon.to_string(),
            self.seed.to_string(),
            self.early_stop_patience.to_string(),
            self.val_fraction.to_string(),
            m.dim.to_string(),
            m.heads.to_string(),
            m.self_loops.to_string(),
            m.normalize_session_attention.to_string(),
            match m.loss {
                LossKind::Literal => "literal".to_string(),
                LossKind::Categorical => "categorical".to_string(),
            },
            m.wgat_layers.to_string(),
            (!m.use_causality).to_string(),
            (!m.use_correlation).to_string(),
            (!m.use_preference).to_string(),
            self.causal.unit_weights.to_string(),
            self.causal.keep_common_cause.to_string(),
            self.causal.second_order.to_string(),
            m.drop_chain.to_string(),
            m.drop_fork.to_string(),
            m.drop_collider.to_string(),
        ];
        Self::KEYS.iter().copied().zip(values).collect()
    }

    pub fn to_text(&self) -> String {
        self.to_key_values()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainError::Config("learning_rate must be > 0".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be >= 1".into()));
        }
        if self.l2_penalty.is_nan() || self.l2_penalty < 0.0 {
            return Err(TrainError::Config("l2_penalty must be >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
            || self.epsilon.is_nan()
            || self.epsilon <= 0.0
        {
            return Err(TrainError::Config("need 0 <= beta1, beta2 < 1 and epsilon > 0".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(TrainError::Config("val_fraction must be in [0, 1)".into()));
        }
        self.model.validate()?;
        Ok(())
    }

    /// Checkpoint metadata: the config snapshot.
    pub fn checkpoint(&self, params: Parameters) -> Checkpoint {
        let mut ck = Checkpoint::new(params);
        for (k, v) in self.to_key_values() {
            ck.meta.insert(k.to_string(), v);
        }
        ck
    }

    /// Rebuilds a config from checkpoint metadata.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, TrainError> {
        let mut cfg = Self::default();
        for (k, v) in &ck.meta {
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }
}

/// First and second moment estimates per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Array>,
    pub v: Vec<Array>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &Parameters) -> Self {
        let zeros: Vec<Array> = params
            .tensors
            .iter()
            .map(|t| Array::zeros(t.rows(), t.cols()))
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// One Adam update of the tensors listed in `active`, with `l2_penalty · θ`
/// added to each gradient. Nothing is modified if any gradient is non-finite.
pub fn adam_step(
    params: &mut Parameters,
    grads: &[Array],
    state: &mut AdamState,
    cfg: &TrainConfig,
    active: &[usize],
) -> Result<(), TrainError> {
    let names = params.layout.manifest();
    for &i in active {
        let (g, p) = (&grads[i], params.get(i));
        if g.shape() != p.shape() {
            return Err(TrainError::GradientShape {
                param: names[i].0.clone(),
                got: g.shape(),
                want: p.shape(),
            });
        }
        if let Some((coord, &value)) = g.data().iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(TrainError::NonFiniteGradient {
                param: names[i].0.clone(),
                coord,
                value,
                step: state.step + 1,
            });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for &i in active {
        let g = &grads[i];
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let theta = params.get_mut(i).data_mut();
        for k in 0..theta.len() {
            let gk = g.data()[k] + cfg.l2_penalty * theta[k];
            m[k] = b1 * m[k] + (1.0 - b1) * gk;
            v[k] = b2 * v[k] + (1.0 - b2) * gk * gk;
            let m_hat = m[k] / c1;
            let v_hat = v[k] / c2;
            theta[k] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
        }
    }
    Ok(())
}

/// Optimizer state bound to one model; runs epochs over a sample set.
pub struct Trainer<'a> {
    pub model: &'a Cgsr,
    pub config: &'a TrainConfig,
    pub params: Parameters,
    pub state: AdamState,
    active: Vec<usize>,
    rng: ChaCha8Rng,
}

impl<'a> Trainer<'a> {
    pub fn new(model: &'a Cgsr, config: &'a TrainConfig) -> Result<Self, TrainError> {
        config.validate()?;
        let params = model.init_params(config.seed)?;
        let state = AdamState::new(&params);
        let active = params.layout.active_indices(&model.config);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(1);
        Ok(Self {
            model,
            config,
            params,
            state,
            active,
            rng,
        })
    }

    /// Tensors the optimizer updates; disabled components stay at their
    /// initial values.
    pub fn active(&self) -> &[usize] {
        &self.active
    }

    /// One pass over `samples` in a freshly shuffled order. Returns the mean
    /// per-sample loss.
    pub fn run_epoch(&mut self, samples: &[Sample]) -> Result<f64, TrainError> {
        if samples.is_empty() {
            return Err(TrainError::NoSamples);
        }
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut self.rng);
        let mut total = 0.0;
        for chunk in order.chunks(self.config.batch_size) {
            let batch: Vec<(&[usize], usize)> = chunk
                .iter()
                .map(|&i| (samples[i].prefix.as_slice(), samples[i].target))
                .collect();
            let (loss, grads) = self.model.loss_and_grad(&self.params, &batch)?;
            adam_step(&mut self.params, &grads, &mut self.state, self.config, &self.active)?;
            total += loss * batch.len() as f64;
        }
        Ok(total / samples.len() as f64)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    /// HR@20, MRR@20 and NDCG@20 on the validation sessions.
    pub val: Option<(f64, f64, f64)>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: Parameters,
    pub history: Vec<EpochRecord>,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
    pub stopped_early: bool,
}

pub fn write_history<W: Write>(mut w: W, history: &[EpochRecord]) -> io::Result<()> {
    writeln!(w, "epoch,train_loss,val_hr20,val_mrr20,val_ndcg20")?;
    for r in history {
        match r.val {
            Some((hr, mrr, ndcg)) => writeln!(w, "{},{},{},{},{}", r.epoch, r.train_loss, hr, mrr, ndcg)?,
            None => writeln!(w, "{},{},,,", r.epoch, r.train_loss)?,
        }
    }
    Ok(())
}

/// Splits time-ordered training sessions into (fit, validation); the
/// validation part is the latest `round(M · fraction)` sessions.
pub fn split_validation(sessions: &[Session], fraction: f64) -> (Vec<Session>, Vec<Session>) {
    let mut sorted = sessions.to_vec();
    sorted.sort_by(|a, b| a.start.cmp(&b.start).then_with(|| a.id.cmp(&b.id)));
    let n_val = ((sorted.len() as f64) * fraction).round() as usize;
    let n_val = n_val.min(sorted.len().saturating_sub(1));
    let val = sorted.split_off(sorted.len() - n_val);
    (sorted, val)
}

/// Builds the graphs from all training sessions, then trains on the prefixes
/// of the fit part and early-stops on MRR@20 over the validation part.
pub fn train(sessions: &[Session], n_items: usize, cfg: &TrainConfig) -> Result<(Cgsr, TrainOutcome), TrainError> {
    cfg.validate()?;
    let graphs = GraphSet::build(sessions, n_items, cfg.causal)?;
    let model = Cgsr::new(cfg.model.clone(), &graphs)?;
    let (fit, val) = split_validation(sessions, cfg.val_fraction);
    let outcome = train_model(&model, &fit, &val, cfg)?;
    Ok((model, outcome))
}

pub fn train_model(
    model: &Cgsr,
    fit: &[Session],
    val: &[Session],
    cfg: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    let samples = augment_prefixes(fit);
    if samples.is_empty() {
        return Err(TrainError::NoSamples);
    }
    let has_val = val.iter().any(|s| s.len() >= 2);
    let mut trainer = Trainer::new(model, cfg)?;
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, Parameters)> = None;
    let mut since_best = 0;
    let mut stopped_early = false;
    for epoch in 1..=cfg.epochs {
        let train_loss = trainer.run_epoch(&samples)?;
        let val_metrics = if has_val {
            let r = evaluate(model, &trainer.params, val, &[20])?;
            let m = r.metrics[0];
            Some((m.hr, m.mrr, m.ndcg))
        } else {
            None
        };
        history.push(EpochRecord {
            epoch,
            train_loss,
            val: val_metrics,
        });
        match val_metrics {
            Some((_, mrr, _)) => {
                if best.as_ref().is_none_or(|(b, _, _)| mrr > *b) {
                    best = Some((mrr, epoch, trainer.params.clone()));
                    since_best = 0;
                } else {
                    since_best += 1;
                    if since_best >= cfg.early_stop_patience {
                        stopped_early = epoch < cfg.epochs;
                        break;
                    }
                }
            }
            None => best = Some((f64::NAN, epoch, trainer.params.clone())),
        }
    }
    let (params, best_epoch) = match best {
        Some((_, e, p)) => (p, e),
        None => (trainer.params, 0),
    };
    Ok(TrainOutcome {
        params,
        history,
        best_epoch,
        stopped_early,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_params;

    #[test]
    fn zero_gradient_from_zero_state_is_a_no_op() {
        let mut p = init_params(3, 2, 1, 1).unwrap();
        let before = p.clone();
        let grads: Vec<Array> = p.tensors.iter().map(|t| Array::zeros(t.rows(), t.cols())).collect();
        let mut st = AdamState::new(&p);
        let cfg = TrainConfig {
            l2_penalty: 0.0,
            ..Default::default()
        };
        let all: Vec<usize> = (0..p.tensors.len()).collect();
        adam_step(&mut p, &grads, &mut st, &cfg, &all).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn non_finite_gradient_aborts_without_update() {
        let mut p = init_params(3, 2, 1, 1).unwrap();
        let before = p.clone();
        let mut grads: Vec<Array> = p.tensors.iter().map(|t| Array::zeros(t.rows(), t.cols())).collect();
        grads[0].data_mut()[4] = f64::NAN;
        let mut st = AdamState::new(&p);
        let all: Vec<usize> = (0..p.tensors.len()).collect();
        let err = adam_step(&mut p, &grads, &mut st, &TrainConfig::default(), &all).unwrap_err();
        assert!(matches!(err, TrainError::NonFiniteGradient { coord: 4, .. }), "{err}");
        assert_eq!(p, before);
        assert_eq!(st.step, 0);
    }

    #[test]
    fn config_text_round_trip() {
        let mut cfg = TrainConfig::default();
        cfg.apply_text("# comment\nlearning_rate = 0.01\n\ndisable_correlation = true\nloss = categorical\n")
            .unwrap();
        assert_eq!(cfg.learning_rate, 0.01);
        assert!(!cfg.model.use_correlation);
        let mut back = TrainConfig::default();
        back.apply_text(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
        assert!(cfg.clone().apply_text("nope = 1").is_err());
    }

    #[test]
    fn presets() {
        let mut cfg = TrainConfig::default();
        "amazon".parse::<Preset>().unwrap().apply(&mut cfg);
        assert_eq!(
            (cfg.learning_rate, cfg.model.dim, cfg.l2_penalty, cfg.batch_size),
            (0.003, 170, 5e-6, 100)
        );
        assert!("movielens".parse::<Preset>().is_err());
    }

    #[test]
    fn validation_split_takes_latest() {
        let sessions: Vec<Session> = (0..10)
            .map(|i| Session {
                id: format!("s{i}"),
                start: 10 - i as i64,
                items: vec![0, 1],
            })
            .collect();
        let (fit, val) = split_validation(&sessions, 0.1);
        assert_eq!(fit.len(), 9);
        assert_eq!(val.len(), 1);
        assert_eq!(val[0].id, "s0");
    }
}
