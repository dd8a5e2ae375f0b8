//! The recommender network.
//!
//! Item embeddings are propagated over the cause, effect and correlation
//! graphs with a weighted graph-attention layer (edge weight is an attention
//! feature), each item sequence is pooled per graph with last-item attention,
//! and candidates are scored by a causality term, a correlation term and a
//! preference term built from the mean of the per-graph session vectors.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use thiserror::Error;

use crate::graphs::{CorrelationGraph, GraphSet, WeightedDigraph};
use crate::numcore::{Array, NumError, Segments, Tape, Var};

pub const LEAKY_SLOPE: f64 = 0.2;
pub const INIT_STD: f64 = 0.1;
pub const LOG_CLAMP_LO: f64 = 1e-12;
pub const LOG_CLAMP_HI: f64 = 1.0 - 1e-12;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Num(#[from] NumError),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("empty session")]
    EmptySession,
    #[error("empty batch")]
    EmptyBatch,
    #[error("item index {index} out of range for {n} items")]
    ItemOutOfRange { index: usize, n: usize },
    #[error("parameter shapes do not match the model layout: {0}")]
    Layout(String),
}

/// One of the three graphs an item is encoded over.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum GraphKind {
    Cause,
    Effect,
    Correlation,
}

impl GraphKind {
    pub const ALL: [GraphKind; 3] = [GraphKind::Cause, GraphKind::Effect, GraphKind::Correlation];

    fn slot(self) -> usize {
        match self {
            GraphKind::Cause => 0,
            GraphKind::Effect => 1,
            GraphKind::Correlation => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            GraphKind::Cause => "cause",
            GraphKind::Effect => "effect",
            GraphKind::Correlation => "corr",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum LossKind {
    /// Binary cross-entropy of the softmax output against the one-hot
    /// target, summed over every item.
    #[default]
    Literal,
    /// `-ln ŷ[target]`.
    Categorical,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub dim: usize,
    pub heads: usize,
    /// Append a weight-1 self edge to every WGAT neighbourhood.
    pub self_loops: bool,
    /// Softmax-normalise the session attention weights.
    pub normalize_session_attention: bool,
    pub loss: LossKind,
    pub use_causality: bool,
    pub use_correlation: bool,
    pub use_preference: bool,
    pub drop_chain: bool,
    pub drop_fork: bool,
    pub drop_collider: bool,
    /// Number of stacked WGAT layers. Only a single layer is implemented.
    pub wgat_layers: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim: 100,
            heads: 4,
            self_loops: true,
            normalize_session_attention: false,
            loss: LossKind::Literal,
            use_causality: true,
            use_correlation: true,
            use_preference: true,
            drop_chain: false,
            drop_fork: false,
            drop_collider: false,
            wgat_layers: 1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.dim == 0 || self.heads == 0 {
            return Err(ModelError::Config("dim and heads must be >= 1".into()));
        }
        if !(self.use_causality || self.use_correlation || self.use_preference) {
            return Err(ModelError::Config(
                "causality, correlation and preference are all disabled; nothing left to score".into(),
            ));
        }
        if !self.use_causality && !self.use_correlation {
            return Err(ModelError::Config(
                "at least one graph encoder must stay enabled".into(),
            ));
        }
        if self.wgat_layers != 1 {
            return Err(ModelError::Config(format!(
                "wgat_layers = {} is not supported; only a single WGAT layer is implemented",
                self.wgat_layers
            )));
        }
        Ok(())
    }

    pub fn graph_active(&self, kind: GraphKind) -> bool {
        match kind {
            GraphKind::Cause | GraphKind::Effect => self.use_causality,
            GraphKind::Correlation => self.use_correlation,
        }
    }

    pub fn active_graphs(&self) -> Vec<GraphKind> {
        GraphKind::ALL.into_iter().filter(|&k| self.graph_active(k)).collect()
    }
}

/// Which block of a WGAT head.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadParam {
    /// `d x d0` feature transform used for attention.
    W1,
    /// `(2d + 1) x 1` attention vector: target slots, neighbour slots, edge weight.
    W2,
    /// `d x d0` feature transform used for aggregation.
    W3,
}

/// Which block of a per-graph session encoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SessionParam {
    Q,
    W4,
    W5,
    Bias,
    W6,
}

/// Positions and shapes of every parameter tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Layout {
    pub n_items: usize,
    pub dim: usize,
    pub heads: usize,
}

impl Layout {
    pub fn new(n_items: usize, dim: usize, heads: usize) -> Self {
        Self { n_items, dim, heads }
    }

    fn per_graph(&self) -> usize {
        3 * self.heads + 5
    }

    pub fn embedding(&self) -> usize {
        0
    }

    pub fn head(&self, g: GraphKind, head: usize, p: HeadParam) -> usize {
        debug_assert!(head < self.heads);
        let which = match p {
            HeadParam::W1 => 0,
            HeadParam::W2 => 1,
            HeadParam::W3 => 2,
        };
        1 + g.slot() * self.per_graph() + 3 * head + which
    }

    pub fn session(&self, g: GraphKind, p: SessionParam) -> usize {
        let which = match p {
            SessionParam::Q => 0,
            SessionParam::W4 => 1,
            SessionParam::W5 => 2,
            SessionParam::Bias => 3,
            SessionParam::W6 => 4,
        };
        1 + g.slot() * self.per_graph() + 3 * self.heads + which
    }

    pub fn w7(&self) -> usize {
        1 + 3 * self.per_graph()
    }

    /// `γ1..γ3` for `k = 0..3`.
    pub fn gamma(&self, k: usize) -> usize {
        debug_assert!(k < 3);
        self.w7() + 1 + k
    }

    /// `λ1..λ3` (chain, fork, collider) for `k = 0..3`.
    pub fn lambda(&self, k: usize) -> usize {
        debug_assert!(k < 3);
        self.w7() + 4 + k
    }

    pub fn len(&self) -> usize {
        self.w7() + 7
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// `(name, rows, cols)` for every tensor in storage order.
    pub fn manifest(&self) -> Vec<(String, usize, usize)> {
        let d = self.dim;
        let mut out = Vec::with_capacity(self.len());
        out.push(("embedding".to_string(), self.n_items, d));
        for g in GraphKind::ALL {
            let name = g.name();
            for h in 0..self.heads {
                out.push((format!("{name}.head{h}.w1"), d, d));
                out.push((format!("{name}.head{h}.w2"), 2 * d + 1, 1));
                out.push((format!("{name}.head{h}.w3"), d, d));
            }
            out.push((format!("{name}.q"), d, 1));
            out.push((format!("{name}.w4"), d, d));
            out.push((format!("{name}.w5"), d, d));
            out.push((format!("{name}.b"), 1, d));
            out.push((format!("{name}.w6"), d, 2 * d));
        }
        out.push(("w7".to_string(), d, d));
        for k in 1..=3 {
            out.push((format!("gamma{k}"), 1, 1));
        }
        for k in 1..=3 {
            out.push((format!("lambda{k}"), 1, 1));
        }
        debug_assert_eq!(out.len(), self.len());
        out
    }

    /// Indices of the tensors that take part in a forward pass under `cfg`.
    pub fn active_indices(&self, cfg: &ModelConfig) -> Vec<usize> {
        let mut out = vec![self.embedding()];
        for g in cfg.active_graphs() {
            for h in 0..self.heads {
                out.push(self.head(g, h, HeadParam::W1));
                out.push(self.head(g, h, HeadParam::W2));
                out.push(self.head(g, h, HeadParam::W3));
            }
            for p in [
                SessionParam::Q,
                SessionParam::W4,
                SessionParam::W5,
                SessionParam::Bias,
                SessionParam::W6,
            ] {
                out.push(self.session(g, p));
            }
        }
        if cfg.use_preference {
            out.push(self.w7());
        }
        if cfg.use_causality {
            out.push(self.gamma(0));
            out.push(self.gamma(1));
        }
        if cfg.use_correlation {
            out.push(self.gamma(2));
            for (k, dropped) in [cfg.drop_chain, cfg.drop_fork, cfg.drop_collider]
                .into_iter()
                .enumerate()
            {
                if !dropped {
                    out.push(self.lambda(k));
                }
            }
        }
        out.sort_unstable();
        out
    }
}

/// Every trainable tensor, in [`Layout`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameters {
    pub layout: Layout,
    pub tensors: Vec<Arc<Array>>,
}

impl Parameters {
    pub fn from_tensors(layout: Layout, tensors: Vec<Array>) -> Result<Self, ModelError> {
        let manifest = layout.manifest();
        if tensors.len() != manifest.len() {
            return Err(ModelError::Layout(format!(
                "expected {} tensors, got {}",
                manifest.len(),
                tensors.len()
            )));
        }
        for ((name, r, c), t) in manifest.iter().zip(&tensors) {
            if t.shape() != (*r, *c) {
                return Err(ModelError::Layout(format!(
                    "{name}: expected {r}x{c}, got {}x{}",
                    t.rows(),
                    t.cols()
                )));
            }
        }
        Ok(Self {
            layout,
            tensors: tensors.into_iter().map(Arc::new).collect(),
        })
    }

    pub fn get(&self, index: usize) -> &Array {
        &self.tensors[index]
    }

    pub fn get_mut(&mut self, index: usize) -> &mut Array {
        Arc::make_mut(&mut self.tensors[index])
    }

    pub fn gamma(&self, k: usize) -> f64 {
        self.get(self.layout.gamma(k)).item()
    }

    pub fn lambda(&self, k: usize) -> f64 {
        self.get(self.layout.lambda(k)).item()
    }

    pub fn set_scalar(&mut self, index: usize, value: f64) {
        *self.get_mut(index) = Array::scalar(value);
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    /// Puts every tensor on `tape` as a leaf, in layout order.
    pub fn record(&self, tape: &mut Tape) -> Vec<Var> {
        self.tensors.iter().map(|t| tape.leaf_shared(Arc::clone(t))).collect()
    }
}

/// Draws every weight from `Normal(0, 0.1)` with a seeded ChaCha stream, in
/// layout order; `γ` and `λ` start at 1.
pub fn init_params(n_items: usize, dim: usize, heads: usize, seed: u64) -> Result<Parameters, ModelError> {
    if n_items == 0 || dim == 0 || heads == 0 {
        return Err(ModelError::Config("n_items, dim and heads must be >= 1".into()));
    }
    let layout = Layout::new(n_items, dim, heads);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, INIT_STD).expect("valid normal");
    let first_scalar = layout.gamma(0);
    let tensors = layout
        .manifest()
        .into_iter()
        .enumerate()
        .map(|(idx, (_, r, c))| {
            if idx >= first_scalar {
                Array::scalar(1.0)
            } else {
                Array::from_vec(r, c, (0..r * c).map(|_| normal.sample(&mut rng)).collect())
            }
        })
        .collect();
    Parameters::from_tensors(layout, tensors)
}

/// Per-edge weight input of a WGAT layer.
#[derive(Clone, Debug)]
pub enum EdgeWeights {
    /// One weight per edge (`E x 1`).
    Fixed(Arc<Array>),
    /// Correlation components per edge (`E x 4`); the weight is
    /// `first + λ1·chain + λ2·fork + λ3·collider`.
    Composed(Arc<Array>),
}

/// Incoming-neighbour lists of every node, grouped by target node.
#[derive(Clone, Debug)]
pub struct NeighborLists {
    pub n: usize,
    /// Target node `i` of each entry; sorted.
    pub dst: Vec<usize>,
    /// Neighbour `j` with an edge `j → i`.
    pub src: Vec<usize>,
    pub weights: EdgeWeights,
    pub segments: Arc<Segments>,
}

impl NeighborLists {
    fn assemble(n: usize, mut entries: Vec<(usize, usize, [f64; 4])>, composed: bool, self_loops: bool) -> Self {
        if self_loops {
            let mut has_self = vec![false; n];
            for &(dst, src, _) in &entries {
                if dst == src {
                    has_self[dst] = true;
                }
            }
            for (i, present) in has_self.into_iter().enumerate() {
                if !present {
                    entries.push((i, i, [1.0, 0.0, 0.0, 0.0]));
                }
            }
        }
        entries.sort_by_key(|&(dst, src, _)| (dst, src));
        let dst: Vec<usize> = entries.iter().map(|e| e.0).collect();
        let src: Vec<usize> = entries.iter().map(|e| e.1).collect();
        let weights = if composed {
            let data = entries.iter().flat_map(|e| e.2).collect();
            EdgeWeights::Composed(Arc::new(Array::from_vec(entries.len(), 4, data)))
        } else {
            EdgeWeights::Fixed(Arc::new(Array::column(
                &entries.iter().map(|e| e.2[0]).collect::<Vec<_>>(),
            )))
        };
        let segments = Arc::new(Segments::from_sorted_ids(&dst, n).expect("sorted by construction"));
        Self {
            n,
            dst,
            src,
            weights,
            segments,
        }
    }

    /// Node `i` attends over every `j` with an edge `j → i`, using `w(j, i)`.
    pub fn from_digraph(g: &WeightedDigraph, self_loops: bool) -> Self {
        let entries = g
            .edges()
            .iter()
            .map(|e| (e.dst, e.src, [e.weight, 0.0, 0.0, 0.0]))
            .collect();
        Self::assemble(g.num_nodes(), entries, false, self_loops)
    }

    /// Each undirected edge contributes one entry in each direction.
    pub fn from_correlation(g: &CorrelationGraph, self_loops: bool) -> Self {
        let mut entries = Vec::with_capacity(2 * g.edges().len());
        for e in g.edges() {
            let w = e.weights.as_array();
            entries.push((e.a, e.b, w));
            entries.push((e.b, e.a, w));
        }
        Self::assemble(g.num_nodes(), entries, true, self_loops)
    }

    pub fn len(&self) -> usize {
        self.dst.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dst.is_empty()
    }
}

/// WGAT inputs for the three graphs.
#[derive(Clone, Debug)]
pub struct ModelGraphs {
    pub cause: NeighborLists,
    pub effect: NeighborLists,
    pub correlation: NeighborLists,
}

impl ModelGraphs {
    pub fn new(graphs: &GraphSet, self_loops: bool) -> Self {
        Self {
            cause: NeighborLists::from_digraph(&graphs.cause, self_loops),
            effect: NeighborLists::from_digraph(&graphs.effect, self_loops),
            correlation: NeighborLists::from_correlation(&graphs.correlation, self_loops),
        }
    }

    pub fn get(&self, kind: GraphKind) -> &NeighborLists {
        match kind {
            GraphKind::Cause => &self.cause,
            GraphKind::Effect => &self.effect,
            GraphKind::Correlation => &self.correlation,
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.cause.n
    }
}

/// Per-graph item matrices on a tape; `None` for disabled graphs.
#[derive(Clone, Copy, Debug)]
pub struct ItemVars {
    pub cause: Option<Var>,
    pub effect: Option<Var>,
    pub correlation: Option<Var>,
}

impl ItemVars {
    pub fn get(&self, kind: GraphKind) -> Option<Var> {
        match kind {
            GraphKind::Cause => self.cause,
            GraphKind::Effect => self.effect,
            GraphKind::Correlation => self.correlation,
        }
    }

    fn active(&self) -> Vec<Var> {
        [self.cause, self.effect, self.correlation]
            .into_iter()
            .flatten()
            .collect()
    }
}

/// One WGAT layer over `lists`, averaging `heads` attention heads.
pub fn wgat_encode(
    tape: &mut Tape,
    layout: &Layout,
    params: &[Var],
    kind: GraphKind,
    lists: &NeighborLists,
    lambdas: &[Option<Var>; 3],
) -> Result<Var, ModelError> {
    let d = layout.dim;
    let x0 = params[layout.embedding()];
    let edge_w = match &lists.weights {
        EdgeWeights::Fixed(w) => tape.leaf_shared(Arc::clone(w)),
        EdgeWeights::Composed(c) => {
            let comps = tape.leaf_shared(Arc::clone(c));
            let one = tape.leaf(Array::scalar(1.0));
            let mut coef = vec![one];
            for lam in lambdas {
                coef.push(match lam {
                    Some(v) => *v,
                    None => tape.leaf(Array::scalar(0.0)),
                });
            }
            let coef = tape.concat_rows(&coef)?;
            tape.matmul(comps, coef)?
        }
    };
    let dst_slots: Vec<usize> = (0..d).collect();
    let src_slots: Vec<usize> = (d..2 * d).collect();

    let mut outputs = Vec::with_capacity(layout.heads);
    for h in 0..layout.heads {
        let w1 = params[layout.head(kind, h, HeadParam::W1)];
        let w2 = params[layout.head(kind, h, HeadParam::W2)];
        let w3 = params[layout.head(kind, h, HeadParam::W3)];

        let w1t = tape.transpose(w1)?;
        let hidden = tape.matmul(x0, w1t)?;
        let a_dst = tape.gather_rows(w2, &dst_slots)?;
        let a_src = tape.gather_rows(w2, &src_slots)?;
        let a_w = tape.gather_rows(w2, &[2 * d])?;
        let s_dst = tape.matmul(hidden, a_dst)?;
        let s_src = tape.matmul(hidden, a_src)?;
        let e_dst = tape.gather_rows(s_dst, &lists.dst)?;
        let e_src = tape.gather_rows(s_src, &lists.src)?;
        let e_w = tape.matmul(edge_w, a_w)?;
        let e = tape.add(e_dst, e_src)?;
        let e = tape.add(e, e_w)?;
        let e = tape.leaky_relu(e, LEAKY_SLOPE)?;
        let alpha = tape.segment_softmax(e, Arc::clone(&lists.segments))?;

        let w3t = tape.transpose(w3)?;
        let msg = tape.matmul(x0, w3t)?;
        let msg = tape.gather_rows(msg, &lists.src)?;
        let agg = tape.segment_weighted_sum(msg, alpha, Arc::clone(&lists.segments))?;
        outputs.push(tape.leaky_relu(agg, LEAKY_SLOPE)?);
    }
    Ok(tape.mean_of(&outputs)?)
}

/// Encodes every item over each active graph.
pub fn encode_items(
    tape: &mut Tape,
    cfg: &ModelConfig,
    layout: &Layout,
    params: &[Var],
    graphs: &ModelGraphs,
) -> Result<ItemVars, ModelError> {
    let lambdas = [
        (!cfg.drop_chain).then(|| params[layout.lambda(0)]),
        (!cfg.drop_fork).then(|| params[layout.lambda(1)]),
        (!cfg.drop_collider).then(|| params[layout.lambda(2)]),
    ];
    let mut enc = |kind: GraphKind| -> Result<Option<Var>, ModelError> {
        if cfg.graph_active(kind) {
            wgat_encode(tape, layout, params, kind, graphs.get(kind), &lambdas).map(Some)
        } else {
            Ok(None)
        }
    };
    Ok(ItemVars {
        cause: enc(GraphKind::Cause)?,
        effect: enc(GraphKind::Effect)?,
        correlation: enc(GraphKind::Correlation)?,
    })
}

/// Session vector `S^g` (`1 x d`) and the per-position attention weights.
pub fn encode_session(
    tape: &mut Tape,
    cfg: &ModelConfig,
    layout: &Layout,
    params: &[Var],
    kind: GraphKind,
    items: Var,
    session: &[usize],
) -> Result<(Var, Var), ModelError> {
    let &last = session.last().ok_or(ModelError::EmptySession)?;
    let q = params[layout.session(kind, SessionParam::Q)];
    let w4 = params[layout.session(kind, SessionParam::W4)];
    let w5 = params[layout.session(kind, SessionParam::W5)];
    let b = params[layout.session(kind, SessionParam::Bias)];
    let w6 = params[layout.session(kind, SessionParam::W6)];

    let xs = tape.gather_rows(items, session)?;
    let xl = tape.gather_rows(items, &[last])?;
    let w4t = tape.transpose(w4)?;
    let w5t = tape.transpose(w5)?;
    let last_part = tape.matmul(xl, w4t)?;
    let last_part = tape.add(last_part, b)?;
    let pos_part = tape.matmul(xs, w5t)?;
    let pre = tape.add(pos_part, last_part)?;
    let gate = tape.sigmoid(pre)?;
    let mut alpha = tape.matmul(gate, q)?;
    if cfg.normalize_session_attention {
        alpha = tape.segment_softmax(alpha, Arc::new(Segments::single(session.len())))?;
    }
    let alpha_t = tape.transpose(alpha)?;
    let pooled = tape.matmul(alpha_t, xs)?;
    let joined = tape.concat_cols(&[xl, pooled])?;
    let w6t = tape.transpose(w6)?;
    let s = tape.matmul(joined, w6t)?;
    Ok((s, alpha))
}

/// Session vectors on a tape.
#[derive(Clone, Copy, Debug)]
pub struct SessionVars {
    pub cause: Option<Var>,
    pub effect: Option<Var>,
    pub correlation: Option<Var>,
    pub preference: Option<Var>,
    pub attention: [Option<Var>; 3],
}

pub fn encode_session_all(
    tape: &mut Tape,
    cfg: &ModelConfig,
    layout: &Layout,
    params: &[Var],
    items: &ItemVars,
    session: &[usize],
) -> Result<SessionVars, ModelError> {
    if session.is_empty() {
        return Err(ModelError::EmptySession);
    }
    if let Some(&bad) = session.iter().find(|&&i| i >= layout.n_items) {
        return Err(ModelError::ItemOutOfRange {
            index: bad,
            n: layout.n_items,
        });
    }
    let mut out = SessionVars {
        cause: None,
        effect: None,
        correlation: None,
        preference: None,
        attention: [None; 3],
    };
    for kind in GraphKind::ALL {
        if let Some(x) = items.get(kind) {
            let (s, alpha) = encode_session(tape, cfg, layout, params, kind, x, session)?;
            match kind {
                GraphKind::Cause => out.cause = Some(s),
                GraphKind::Effect => out.effect = Some(s),
                GraphKind::Correlation => out.correlation = Some(s),
            }
            out.attention[kind.slot()] = Some(alpha);
        }
    }
    if cfg.use_preference {
        let parts: Vec<Var> = [out.cause, out.effect, out.correlation].into_iter().flatten().collect();
        let mean = tape.mean_of(&parts)?;
        let w7t = tape.transpose(params[layout.w7()])?;
        out.preference = Some(tape.matmul(mean, w7t)?);
    }
    Ok(out)
}

/// Per-item score columns (`N x 1`) on a tape.
#[derive(Clone, Copy, Debug)]
pub struct ScoreVars {
    pub total: Var,
    pub causality: Option<Var>,
    pub correlation: Option<Var>,
    pub preference: Option<Var>,
}

pub fn score(
    tape: &mut Tape,
    layout: &Layout,
    params: &[Var],
    items: &ItemVars,
    sess: &SessionVars,
) -> Result<ScoreVars, ModelError> {
    let mut causality = None;
    if let (Some(sc), Some(se), Some(xc), Some(xe)) = (sess.cause, sess.effect, items.cause, items.effect) {
        let sc_t = tape.transpose(sc)?;
        let se_t = tape.transpose(se)?;
        let forward = tape.matmul(xe, sc_t)?;
        let backward = tape.matmul(xc, se_t)?;
        let backward = tape.mul_scalar(backward, params[layout.gamma(0)])?;
        causality = Some(tape.sub(forward, backward)?);
    }
    let mut correlation = None;
    if let (Some(sr), Some(xr)) = (sess.correlation, items.correlation) {
        let sr_t = tape.transpose(sr)?;
        correlation = Some(tape.matmul(xr, sr_t)?);
    }
    let mut preference = None;
    if let Some(sp) = sess.preference {
        let xp = tape.mean_of(&items.active())?;
        let sp_t = tape.transpose(sp)?;
        preference = Some(tape.matmul(xp, sp_t)?);
    }

    let mut terms = Vec::with_capacity(3);
    if let Some(p) = preference {
        terms.push(p);
    }
    if let Some(ca) = causality {
        terms.push(tape.mul_scalar(ca, params[layout.gamma(1)])?);
    }
    if let Some(r) = correlation {
        terms.push(tape.mul_scalar(r, params[layout.gamma(2)])?);
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = tape.add(total, t)?;
    }
    Ok(ScoreVars {
        total,
        causality,
        correlation,
        preference,
    })
}

/// Softmax over all items of an `N x 1` score column.
pub fn softmax_scores(tape: &mut Tape, scores: Var) -> Result<Var, ModelError> {
    let n = tape.value(scores).rows();
    Ok(tape.segment_softmax(scores, Arc::new(Segments::single(n)))?)
}

/// Training loss of one prediction; `probs` is the `N x 1` softmax output.
pub fn loss(tape: &mut Tape, kind: LossKind, probs: Var, target: usize) -> Result<Var, ModelError> {
    let n = tape.value(probs).rows();
    if target >= n {
        return Err(ModelError::ItemOutOfRange { index: target, n });
    }
    match kind {
        LossKind::Literal => {
            let mut y = Array::zeros(n, 1);
            y.data_mut()[target] = 1.0;
            let not_y = y.map(|v| 1.0 - v);
            let y = tape.leaf(y);
            let not_y = tape.leaf(not_y);
            let log_p = tape.log_clamped(probs, LOG_CLAMP_LO, LOG_CLAMP_HI)?;
            let q = tape.affine(probs, -1.0, 1.0)?;
            let log_q = tape.log_clamped(q, LOG_CLAMP_LO, LOG_CLAMP_HI)?;
            let pos = tape.dot(y, log_p)?;
            let neg = tape.dot(not_y, log_q)?;
            let ll = tape.add(pos, neg)?;
            Ok(tape.scale(ll, -1.0)?)
        }
        LossKind::Categorical => {
            let p = tape.gather_rows(probs, &[target])?;
            let lp = tape.log_clamped(p, LOG_CLAMP_LO, LOG_CLAMP_HI)?;
            Ok(tape.scale(lp, -1.0)?)
        }
    }
}

/// Item matrices after the graph encoders, detached from any tape.
#[derive(Clone, Debug)]
pub struct EncodedItems {
    pub cause: Option<Arc<Array>>,
    pub effect: Option<Arc<Array>>,
    pub correlation: Option<Arc<Array>>,
}

impl EncodedItems {
    pub fn get(&self, kind: GraphKind) -> Option<&Arc<Array>> {
        match kind {
            GraphKind::Cause => self.cause.as_ref(),
            GraphKind::Effect => self.effect.as_ref(),
            GraphKind::Correlation => self.correlation.as_ref(),
        }
    }

    /// Elementwise mean of the active item matrices.
    pub fn preference(&self) -> Array {
        let parts: Vec<&Arc<Array>> = [&self.cause, &self.effect, &self.correlation]
            .into_iter()
            .flatten()
            .collect();
        let mut acc = (*parts[0]).as_ref().clone();
        for p in &parts[1..] {
            acc.add_assign(p);
        }
        let k = parts.len() as f64;
        acc.map(|x| x / k)
    }

    fn record(&self, tape: &mut Tape) -> ItemVars {
        let mut leaf = |a: &Option<Arc<Array>>| a.as_ref().map(|a| tape.leaf_shared(Arc::clone(a)));
        ItemVars {
            cause: leaf(&self.cause),
            effect: leaf(&self.effect),
            correlation: leaf(&self.correlation),
        }
    }
}

/// Session vectors (`1 x d` rows) and attention weights for one session.
#[derive(Clone, Debug)]
pub struct SessionEncoding {
    pub cause: Option<Array>,
    pub effect: Option<Array>,
    pub correlation: Option<Array>,
    pub preference: Option<Array>,
    /// Attention weight of each session position, per graph.
    pub attention: [Option<Vec<f64>>; 3],
}

impl SessionEncoding {
    pub fn attention(&self, kind: GraphKind) -> Option<&[f64]> {
        self.attention[kind.slot()].as_deref()
    }
}

/// Per-item scores for one session. Disabled components are `None`.
#[derive(Clone, Debug)]
pub struct ScoreBreakdown {
    pub total: Vec<f64>,
    pub causality: Option<Vec<f64>>,
    pub correlation: Option<Vec<f64>>,
    pub preference: Option<Vec<f64>>,
    /// Softmax of `total`.
    pub probs: Vec<f64>,
}

struct SampleGrad {
    loss: f64,
    params: Vec<Option<Array>>,
    items: [Option<Array>; 3],
}

fn accumulate(slot: &mut Option<Array>, g: Option<Array>) {
    match (slot.as_mut(), g) {
        (Some(acc), Some(g)) => acc.add_assign(&g),
        (None, Some(g)) => *slot = Some(g),
        (_, None) => {}
    }
}

/// A configured model bound to its training graphs.
#[derive(Clone, Debug)]
pub struct Cgsr {
    pub config: ModelConfig,
    pub graphs: ModelGraphs,
}

impl Cgsr {
    pub fn new(config: ModelConfig, graphs: &GraphSet) -> Result<Self, ModelError> {
        config.validate()?;
        let graphs = ModelGraphs::new(graphs, config.self_loops);
        Ok(Self { config, graphs })
    }

    pub fn from_model_graphs(config: ModelConfig, graphs: ModelGraphs) -> Result<Self, ModelError> {
        config.validate()?;
        Ok(Self { config, graphs })
    }

    pub fn n_items(&self) -> usize {
        self.graphs.num_nodes()
    }

    pub fn init_params(&self, seed: u64) -> Result<Parameters, ModelError> {
        init_params(self.n_items(), self.config.dim, self.config.heads, seed)
    }

    fn check_layout(&self, params: &Parameters) -> Result<(), ModelError> {
        let l = params.layout;
        if l.n_items != self.n_items() || l.dim != self.config.dim || l.heads != self.config.heads {
            return Err(ModelError::Layout(format!(
                "parameters are {}x{} with {} heads; model expects {} items, dim {}, {} heads",
                l.n_items,
                l.dim,
                l.heads,
                self.n_items(),
                self.config.dim,
                self.config.heads
            )));
        }
        Ok(())
    }

    /// Mean loss over `samples` (prefix, target) and its gradient with
    /// respect to every parameter tensor.
    ///
    /// The graph encoders run once per call. Each sample is then
    /// differentiated on its own tape (in parallel) with the encoded items as
    /// leaves; the per-sample adjoints are summed in sample order and pushed
    /// back through the encoders, so the result does not depend on the
    /// number of worker threads.
    pub fn loss_and_grad(
        &self,
        params: &Parameters,
        samples: &[(&[usize], usize)],
    ) -> Result<(f64, Vec<Array>), ModelError> {
        self.check_layout(params)?;
        if samples.is_empty() {
            return Err(ModelError::EmptyBatch);
        }
        let layout = params.layout;
        let mut tape = Tape::new();
        let vars = params.record(&mut tape);
        let items = encode_items(&mut tape, &self.config, &layout, &vars, &self.graphs)?;
        let encoded = EncodedItems {
            cause: items.cause.map(|v| tape.shared(v)),
            effect: items.effect.map(|v| tape.shared(v)),
            correlation: items.correlation.map(|v| tape.shared(v)),
        };

        let per_sample: Vec<Result<SampleGrad, ModelError>> = samples
            .par_iter()
            .map(|&(prefix, target)| self.sample_grad(params, &encoded, prefix, target))
            .collect();

        let scale = 1.0 / samples.len() as f64;
        let mut total_loss = 0.0;
        let mut grads: Vec<Option<Array>> = vec![None; layout.len()];
        let mut item_grads: [Option<Array>; 3] = [None, None, None];
        for r in per_sample {
            let sg = r?;
            total_loss += sg.loss;
            for (slot, g) in grads.iter_mut().zip(sg.params) {
                accumulate(slot, g);
            }
            for (slot, g) in item_grads.iter_mut().zip(sg.items) {
                accumulate(slot, g);
            }
        }

        // Push the summed item adjoints back through the graph encoders.
        let mut proxy = Vec::new();
        for kind in GraphKind::ALL {
            if let (Some(x), Some(g)) = (items.get(kind), item_grads[kind.slot()].take()) {
                let seed = tape.leaf(g);
                proxy.push(tape.dot(x, seed)?);
            }
        }
        if !proxy.is_empty() {
            let mut acc = proxy[0];
            for &p in &proxy[1..] {
                acc = tape.add(acc, p)?;
            }
            let enc_grads = tape.backward(acc)?;
            for (slot, &v) in grads.iter_mut().zip(&vars) {
                if enc_grads.is_reached(v) {
                    accumulate(slot, Some(enc_grads.get(v)));
                }
            }
        }

        let grads = grads
            .into_iter()
            .zip(layout.manifest())
            .map(|(g, (_, r, c))| match g {
                Some(g) => g.map(|x| x * scale),
                None => Array::zeros(r, c),
            })
            .collect();
        Ok((total_loss * scale, grads))
    }

    fn sample_grad(
        &self,
        params: &Parameters,
        encoded: &EncodedItems,
        prefix: &[usize],
        target: usize,
    ) -> Result<SampleGrad, ModelError> {
        let layout = params.layout;
        let mut tape = Tape::new();
        let vars = params.record(&mut tape);
        let items = encoded.record(&mut tape);
        let sess = encode_session_all(&mut tape, &self.config, &layout, &vars, &items, prefix)?;
        let scores = score(&mut tape, &layout, &vars, &items, &sess)?;
        let probs = softmax_scores(&mut tape, scores.total)?;
        let l = loss(&mut tape, self.config.loss, probs, target)?;
        let mut g = tape.backward(l)?;
        let mut take = |v: Var| g.is_reached(v).then(|| g.take(v));
        let param_grads = vars.iter().map(|&v| take(v)).collect();
        let item_grads = [items.cause, items.effect, items.correlation].map(|v| v.and_then(&mut take));
        Ok(SampleGrad {
            loss: tape.value(l).item(),
            params: param_grads,
            items: item_grads,
        })
    }

    /// Records the mean batch loss on `tape`.
    pub fn record_loss(
        &self,
        tape: &mut Tape,
        layout: &Layout,
        vars: &[Var],
        samples: &[(&[usize], usize)],
    ) -> Result<Var, ModelError> {
        if samples.is_empty() {
            return Err(ModelError::EmptyBatch);
        }
        let items = encode_items(tape, &self.config, layout, vars, &self.graphs)?;
        let mut losses = Vec::with_capacity(samples.len());
        for &(prefix, target) in samples {
            let sess = encode_session_all(tape, &self.config, layout, vars, &items, prefix)?;
            let scores = score(tape, layout, vars, &items, &sess)?;
            let probs = softmax_scores(tape, scores.total)?;
            losses.push(loss(tape, self.config.loss, probs, target)?);
        }
        Ok(tape.mean_of(&losses)?)
    }

    pub fn encode_items(&self, params: &Parameters) -> Result<EncodedItems, ModelError> {
        self.check_layout(params)?;
        let mut tape = Tape::new();
        let vars = params.record(&mut tape);
        let items = encode_items(&mut tape, &self.config, &params.layout, &vars, &self.graphs)?;
        Ok(EncodedItems {
            cause: items.cause.map(|v| tape.shared(v)),
            effect: items.effect.map(|v| tape.shared(v)),
            correlation: items.correlation.map(|v| tape.shared(v)),
        })
    }

    pub fn encode_session(
        &self,
        params: &Parameters,
        encoded: &EncodedItems,
        session: &[usize],
    ) -> Result<SessionEncoding, ModelError> {
        let mut tape = Tape::new();
        let vars = params.record(&mut tape);
        let items = encoded.record(&mut tape);
        let s = encode_session_all(&mut tape, &self.config, &params.layout, &vars, &items, session)?;
        let get = |v: Option<Var>| v.map(|v| tape.value(v).clone());
        Ok(SessionEncoding {
            cause: get(s.cause),
            effect: get(s.effect),
            correlation: get(s.correlation),
            preference: get(s.preference),
            attention: s.attention.map(|a| a.map(|v| tape.value(v).data().to_vec())),
        })
    }

    /// Scores every item as the next item of `session`.
    pub fn score_session(
        &self,
        params: &Parameters,
        encoded: &EncodedItems,
        session: &[usize],
    ) -> Result<ScoreBreakdown, ModelError> {
        let mut tape = Tape::new();
        let vars = params.record(&mut tape);
        let items = encoded.record(&mut tape);
        let s = encode_session_all(&mut tape, &self.config, &params.layout, &vars, &items, session)?;
        let sc = score(&mut tape, &params.layout, &vars, &items, &s)?;
        let probs = softmax_scores(&mut tape, sc.total)?;
        let get = |v: Option<Var>| v.map(|v| tape.value(v).data().to_vec());
        Ok(ScoreBreakdown {
            total: tape.value(sc.total).data().to_vec(),
            causality: get(sc.causality),
            correlation: get(sc.correlation),
            preference: get(sc.preference),
            probs: tape.value(probs).data().to_vec(),
        })
    }

    /// The `k` highest-scoring items, best first; ties go to the smaller index.
    pub fn recommend(
        &self,
        params: &Parameters,
        encoded: &EncodedItems,
        session: &[usize],
        k: usize,
    ) -> Result<Vec<(usize, f64)>, ModelError> {
        let scores = self.score_session(params, encoded, session)?;
        let mut order: Vec<usize> = (0..scores.total.len()).collect();
        order.sort_by(|&a, &b| scores.total[b].total_cmp(&scores.total[a]).then(a.cmp(&b)));
        Ok(order.into_iter().take(k).map(|i| (i, scores.probs[i])).collect())
    }
}
