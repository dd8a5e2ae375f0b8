//! Item-transition graphs built from training sessions.
//!
//! The [`SessionGraph`] holds raw counts: contiguous pairs `[i, j]`,
//! contiguous triples `[k, i, j]` and per-node in/out totals. Everything else
//! is derived from it:
//!
//! * the effect graph reweights each transition `i → j` by the share of
//!   `i`'s outgoing transitions that are *not* explained by an item `k` that
//!   directly precedes both `i` and `j` (a common cause);
//! * the cause graph is the effect graph with every edge reversed;
//! * the correlation graph is undirected, with a first-order weight and
//!   three raw second-order components (chain, fork, collider) whose mixing
//!   coefficients are model parameters.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use thiserror::Error;

use crate::ingest::Session;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("session {session:?} has item index {index} >= {n}")]
    IndexOutOfRange { session: String, index: usize, n: usize },
    #[error("internal invariant violated: node {0} has outgoing edges but zero out-total")]
    ZeroOutTotal(usize),
}

/// Directed transition counts over `n` items.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SessionGraph {
    n: usize,
    out_adj: Vec<BTreeMap<usize, u64>>,
    in_adj: Vec<BTreeMap<usize, u64>>,
    /// `(i, j) -> {k -> #[k, i, j]}`.
    triples: BTreeMap<(usize, usize), BTreeMap<usize, u64>>,
    out_total: Vec<u64>,
    in_total: Vec<u64>,
}

impl SessionGraph {
    pub fn num_nodes(&self) -> usize {
        self.n
    }

    /// `w^s[i][j]`, the number of contiguous `[i, j]` occurrences.
    pub fn pair_count(&self, i: usize, j: usize) -> u64 {
        self.out_adj[i].get(&j).copied().unwrap_or(0)
    }

    /// Number of contiguous `[k, i, j]` occurrences.
    pub fn triple_count(&self, k: usize, i: usize, j: usize) -> u64 {
        self.triples.get(&(i, j)).and_then(|m| m.get(&k)).copied().unwrap_or(0)
    }

    pub fn triples_through(&self, i: usize, j: usize) -> impl Iterator<Item = (usize, u64)> + '_ {
        self.triples
            .get(&(i, j))
            .into_iter()
            .flat_map(|m| m.iter().map(|(&k, &c)| (k, c)))
    }

    pub fn out_total(&self, i: usize) -> u64 {
        self.out_total[i]
    }

    pub fn in_total(&self, i: usize) -> u64 {
        self.in_total[i]
    }

    pub fn out_neighbors(&self, i: usize) -> &BTreeMap<usize, u64> {
        &self.out_adj[i]
    }

    pub fn in_neighbors(&self, i: usize) -> &BTreeMap<usize, u64> {
        &self.in_adj[i]
    }

    /// All `(src, dst, count)` edges in ascending `(src, dst)` order.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize, u64)> + '_ {
        self.out_adj
            .iter()
            .enumerate()
            .flat_map(|(i, m)| m.iter().map(move |(&j, &c)| (i, j, c)))
    }

    pub fn num_edges(&self) -> usize {
        self.out_adj.iter().map(BTreeMap::len).sum()
    }

    /// `src,dst,count`, one row per edge.
    pub fn write_csv_labeled<W: Write>(&self, mut w: W, label: &dyn Fn(usize) -> String) -> std::io::Result<()> {
        writeln!(w, "src,dst,count")?;
        for (i, j, c) in self.edges() {
            writeln!(w, "{},{},{}", label(i), label(j), c)?;
        }
        Ok(())
    }

    /// Sum of two graphs' counts over the same node set.
    pub fn merge(mut self, other: &SessionGraph) -> SessionGraph {
        assert_eq!(self.n, other.n, "merging graphs over different item sets");
        for (i, j, c) in other.edges() {
            *self.out_adj[i].entry(j).or_default() += c;
            *self.in_adj[j].entry(i).or_default() += c;
            self.out_total[i] += c;
            self.in_total[j] += c;
        }
        for (&key, ks) in &other.triples {
            let dst = self.triples.entry(key).or_default();
            for (&k, &c) in ks {
                *dst.entry(k).or_default() += c;
            }
        }
        self
    }
}

/// Counts contiguous pairs and triples over all sessions.
pub fn build_session_graph(sessions: &[Session], n: usize) -> Result<SessionGraph, GraphError> {
    let mut g = SessionGraph {
        n,
        out_adj: vec![BTreeMap::new(); n],
        in_adj: vec![BTreeMap::new(); n],
        triples: BTreeMap::new(),
        out_total: vec![0; n],
        in_total: vec![0; n],
    };
    for s in sessions {
        if let Some(&bad) = s.items.iter().find(|&&i| i >= n) {
            return Err(GraphError::IndexOutOfRange {
                session: s.id.clone(),
                index: bad,
                n,
            });
        }
        for w in s.items.windows(2) {
            let (i, j) = (w[0], w[1]);
            *g.out_adj[i].entry(j).or_default() += 1;
            *g.in_adj[j].entry(i).or_default() += 1;
            g.out_total[i] += 1;
            g.in_total[j] += 1;
        }
        for w in s.items.windows(3) {
            *g.triples.entry((w[1], w[2])).or_default().entry(w[0]).or_default() += 1;
        }
    }
    Ok(g)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WeightedEdge {
    pub src: usize,
    pub dst: usize,
    pub weight: f64,
}

/// Directed graph with real edge weights, edges sorted by `(src, dst)`.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightedDigraph {
    n: usize,
    edges: Vec<WeightedEdge>,
}

impl WeightedDigraph {
    pub fn new(n: usize, mut edges: Vec<WeightedEdge>) -> Self {
        edges.sort_by_key(|e| (e.src, e.dst));
        Self { n, edges }
    }

    pub fn num_nodes(&self) -> usize {
        self.n
    }

    pub fn edges(&self) -> &[WeightedEdge] {
        &self.edges
    }

    pub fn weight(&self, src: usize, dst: usize) -> Option<f64> {
        self.edges
            .binary_search_by_key(&(src, dst), |e| (e.src, e.dst))
            .ok()
            .map(|i| self.edges[i].weight)
    }

    pub fn reversed(&self) -> WeightedDigraph {
        WeightedDigraph::new(
            self.n,
            self.edges
                .iter()
                .map(|e| WeightedEdge {
                    src: e.dst,
                    dst: e.src,
                    weight: e.weight,
                })
                .collect(),
        )
    }

    /// CSV `src,dst,weight`.
    pub fn write_csv<W: Write>(&self, w: W) -> std::io::Result<()> {
        self.write_csv_labeled(w, &|i| i.to_string())
    }

    /// Like [`Self::write_csv`] with nodes printed as `label(index)`.
    pub fn write_csv_labeled<W: Write>(&self, mut w: W, label: &dyn Fn(usize) -> String) -> std::io::Result<()> {
        writeln!(w, "src,dst,weight")?;
        for e in &self.edges {
            writeln!(w, "{},{},{}", label(e.src), label(e.dst), format_sig12(e.weight))?;
        }
        Ok(())
    }
}

/// Switches for the causality-graph ablations.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CausalOptions {
    /// Skip the common-cause subtraction.
    pub keep_common_cause: bool,
    /// Replace every causality weight with 1.
    pub unit_weights: bool,
    /// Add two-hop edges `i → k → j` weighted by the product of the hop
    /// weights (summed over `k`) wherever `i → j` is not already an edge.
    pub second_order: bool,
}

/// Effect graph with the default (full) construction.
pub fn effect_graph(g: &SessionGraph) -> Result<WeightedDigraph, GraphError> {
    effect_graph_with(g, CausalOptions::default())
}

pub fn effect_graph_with(g: &SessionGraph, opts: CausalOptions) -> Result<WeightedDigraph, GraphError> {
    let mut edges = Vec::with_capacity(g.num_edges());
    for (i, j, count) in g.edges() {
        let total = g.out_total(i);
        if total == 0 {
            return Err(GraphError::ZeroOutTotal(i));
        }
        let common: u64 = if opts.keep_common_cause {
            0
        } else {
            let in_j = g.in_neighbors(j);
            g.triples_through(i, j)
                .filter(|(k, _)| in_j.contains_key(k))
                .map(|(_, c)| c)
                .sum()
        };
        debug_assert!(common <= count);
        edges.push(WeightedEdge {
            src: i,
            dst: j,
            weight: (count - common) as f64 / total as f64,
        });
    }
    let mut graph = WeightedDigraph::new(g.num_nodes(), edges);
    if opts.second_order {
        graph = with_two_hop_edges(&graph);
    }
    if opts.unit_weights {
        for e in &mut graph.edges {
            e.weight = 1.0;
        }
    }
    Ok(graph)
}

fn with_two_hop_edges(first: &WeightedDigraph) -> WeightedDigraph {
    let mut out: Vec<Vec<(usize, f64)>> = vec![Vec::new(); first.n];
    for e in &first.edges {
        out[e.src].push((e.dst, e.weight));
    }
    let mut edges = first.edges.clone();
    for i in 0..first.n {
        let mut acc: BTreeMap<usize, f64> = BTreeMap::new();
        for &(k, w_ik) in &out[i] {
            if k == i {
                continue;
            }
            for &(j, w_kj) in &out[k] {
                if j != i && j != k {
                    *acc.entry(j).or_default() += w_ik * w_kj;
                }
            }
        }
        for (j, w) in acc {
            if first.weight(i, j).is_none() {
                edges.push(WeightedEdge {
                    src: i,
                    dst: j,
                    weight: w,
                });
            }
        }
    }
    WeightedDigraph::new(first.n, edges)
}

/// Reverses every edge of an effect graph, keeping weights.
pub fn cause_graph(effect: &WeightedDigraph) -> WeightedDigraph {
    effect.reversed()
}

/// Raw weight components of one undirected correlation edge. The composed
/// weight is `first + λ1·chain + λ2·fork + λ3·collider`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct CorrelationWeights {
    pub first: f64,
    pub chain: f64,
    pub fork: f64,
    pub collider: f64,
}

impl CorrelationWeights {
    pub fn is_zero(&self) -> bool {
        self.first == 0.0 && self.chain == 0.0 && self.fork == 0.0 && self.collider == 0.0
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.first, self.chain, self.fork, self.collider]
    }

    pub fn compose(&self, lambdas: [f64; 3]) -> f64 {
        self.first + lambdas[0] * self.chain + lambdas[1] * self.fork + lambdas[2] * self.collider
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CorrelationEdge {
    /// Always `a < b`.
    pub a: usize,
    pub b: usize,
    pub weights: CorrelationWeights,
}

/// Undirected weighted graph, one entry per unordered pair, sorted by `(a, b)`.
#[derive(Clone, Debug, PartialEq)]
pub struct CorrelationGraph {
    n: usize,
    edges: Vec<CorrelationEdge>,
}

impl CorrelationGraph {
    pub fn num_nodes(&self) -> usize {
        self.n
    }

    pub fn edges(&self) -> &[CorrelationEdge] {
        &self.edges
    }

    pub fn get(&self, a: usize, b: usize) -> Option<CorrelationWeights> {
        let key = (a.min(b), a.max(b));
        self.edges
            .binary_search_by_key(&key, |e| (e.a, e.b))
            .ok()
            .map(|i| self.edges[i].weights)
    }

    /// CSV `a,b,w1,chain,fork,collider`.
    pub fn write_csv<W: Write>(&self, w: W) -> std::io::Result<()> {
        self.write_csv_labeled(w, &|i| i.to_string())
    }

    pub fn write_csv_labeled<W: Write>(&self, mut w: W, label: &dyn Fn(usize) -> String) -> std::io::Result<()> {
        writeln!(w, "a,b,w1,chain,fork,collider")?;
        for e in &self.edges {
            let c = e.weights;
            writeln!(
                w,
                "{},{},{},{},{},{}",
                label(e.a),
                label(e.b),
                format_sig12(c.first),
                format_sig12(c.chain),
                format_sig12(c.fork),
                format_sig12(c.collider)
            )?;
        }
        Ok(())
    }
}

fn ratio(num: f64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num / den as f64
    }
}

/// Correlation components for the pair `(i, j)`; symmetric in its arguments.
pub fn correlation_components(g: &SessionGraph, i: usize, j: usize) -> CorrelationWeights {
    let w = |a: usize, b: usize| g.pair_count(a, b) as f64;
    let (o_i, o_j) = (g.out_total(i), g.out_total(j));
    let (in_i, in_j) = (g.in_total(i), g.in_total(j));

    let forward = if g.pair_count(i, j) > 0 {
        ratio(2.0 * w(i, j), o_i + in_j)
    } else {
        0.0
    };
    let backward = if g.pair_count(j, i) > 0 {
        ratio(2.0 * w(j, i), o_j + in_i)
    } else {
        0.0
    };

    // Folds start from +0.0: an empty f64 `sum` is -0.0.
    let third = |k: &usize| *k != i && *k != j;
    // i → k → j
    let chain_ij: f64 = intersect(g.out_neighbors(i), g.in_neighbors(j))
        .filter(third)
        .fold(0.0, |acc, k| acc + w(i, k) + w(k, j));
    // j → k → i
    let chain_ji: f64 = intersect(g.in_neighbors(i), g.out_neighbors(j))
        .filter(third)
        .fold(0.0, |acc, k| acc + w(j, k) + w(k, i));
    // k → i, k → j
    let fork: f64 = intersect(g.in_neighbors(i), g.in_neighbors(j))
        .filter(third)
        .fold(0.0, |acc, k| acc + w(k, i) + w(k, j));
    // i → k, j → k
    let collider: f64 = intersect(g.out_neighbors(i), g.out_neighbors(j))
        .filter(third)
        .fold(0.0, |acc, k| acc + w(i, k) + w(j, k));

    CorrelationWeights {
        first: forward + backward,
        chain: ratio(chain_ij, o_i + in_j) + ratio(chain_ji, o_j + in_i),
        fork: ratio(fork, in_i + in_j),
        collider: ratio(collider, o_i + o_j),
    }
}

fn intersect<'a>(a: &'a BTreeMap<usize, u64>, b: &'a BTreeMap<usize, u64>) -> impl Iterator<Item = usize> + 'a {
    let (small, large) = if a.len() <= b.len() { (a, b) } else { (b, a) };
    small.keys().copied().filter(move |k| large.contains_key(k))
}

/// Builds the correlation graph over every pair linked directly or through
/// one intermediate item.
pub fn correlation_graph(g: &SessionGraph) -> CorrelationGraph {
    let n = g.num_nodes();
    let mut edges = Vec::new();
    for i in 0..n {
        let mut candidates: BTreeSet<usize> = BTreeSet::new();
        let mut add = |j: usize| {
            if j > i {
                candidates.insert(j);
            }
        };
        for &k in g.out_neighbors(i).keys() {
            add(k);
            g.out_neighbors(k).keys().for_each(|&j| add(j));
            g.in_neighbors(k).keys().for_each(|&j| add(j));
        }
        for &k in g.in_neighbors(i).keys() {
            add(k);
            g.in_neighbors(k).keys().for_each(|&j| add(j));
            g.out_neighbors(k).keys().for_each(|&j| add(j));
        }
        for j in candidates {
            let weights = correlation_components(g, i, j);
            if !weights.is_zero() {
                edges.push(CorrelationEdge { a: i, b: j, weights });
            }
        }
    }
    CorrelationGraph { n, edges }
}

/// The graphs the model consumes, built from one training split.
#[derive(Clone, Debug)]
pub struct GraphSet {
    pub session: SessionGraph,
    pub effect: WeightedDigraph,
    pub cause: WeightedDigraph,
    pub correlation: CorrelationGraph,
}

impl GraphSet {
    pub fn build(sessions: &[Session], n: usize, opts: CausalOptions) -> Result<Self, GraphError> {
        let session = build_session_graph(sessions, n)?;
        let effect = effect_graph_with(&session, opts)?;
        let cause = cause_graph(&effect);
        let correlation = correlation_graph(&session);
        Ok(Self {
            session,
            effect,
            cause,
            correlation,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.session.num_nodes()
    }
}

/// Fixed-point decimal with 12 significant digits.
pub fn format_sig12(x: f64) -> String {
    if x == 0.0 {
        return format!("{:.11}", 0.0);
    }
    if !x.is_finite() {
        return format!("{:.11}", x);
    }
    let sci = format!("{:.11e}", x);
    let exp: i32 = sci.rsplit_once('e').and_then(|(_, e)| e.parse().ok()).unwrap_or(0);
    let decimals = (11 - exp).max(0) as usize;
    format!("{:.*}", decimals, x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(items: &[usize]) -> Session {
        Session::new("s", items.to_vec())
    }

    #[test]
    fn single_pair() {
        let g = build_session_graph(&[s(&[0, 1])], 2).unwrap();
        assert_eq!(g.pair_count(0, 1), 1);
        assert_eq!(g.triples.len(), 0);
        let e = effect_graph(&g).unwrap();
        assert_eq!(e.weight(0, 1), Some(1.0));
    }

    #[test]
    fn single_triple() {
        let g = build_session_graph(&[s(&[0, 1, 2])], 3).unwrap();
        assert_eq!(g.triple_count(0, 1, 2), 1);
        assert_eq!(g.triple_count(1, 0, 2), 0);
    }

    #[test]
    fn out_of_range_index_is_rejected() {
        assert!(build_session_graph(&[s(&[0, 5])], 3).is_err());
    }

    #[test]
    fn single_edge_correlation() {
        let g = build_session_graph(&[s(&[0, 1])], 2).unwrap();
        let r = correlation_graph(&g);
        assert_eq!(r.edges().len(), 1);
        assert_eq!(
            r.get(0, 1).unwrap(),
            CorrelationWeights {
                first: 1.0,
                ..Default::default()
            }
        );
    }

    #[test]
    fn empty_graph_reverses_to_empty() {
        let e = WeightedDigraph::new(3, vec![]);
        assert!(cause_graph(&e).edges().is_empty());
    }

    #[test]
    fn sig12_formatting() {
        assert_eq!(format_sig12(0.5), "0.500000000000");
        assert_eq!(format_sig12(2.0 / 3.0), "0.666666666667");
        assert_eq!(format_sig12(1.0), "1.00000000000");
        assert_eq!(format_sig12(0.0), "0.00000000000");
        assert_eq!(format_sig12(-0.0), "0.00000000000");
        assert_eq!(format_sig12(12.5), "12.5000000000");
        assert_eq!(format_sig12(0.9999999999999), "1.00000000000");
    }

    #[test]
    fn missing_components_are_positive_zero() {
        let g = build_session_graph(&[s(&[0, 1])], 2).unwrap();
        let c = correlation_components(&g, 0, 1);
        for x in [c.chain, c.fork, c.collider] {
            assert!(x == 0.0 && x.is_sign_positive(), "{c:?}");
        }
    }

    #[test]
    fn two_hop_edges_only_fill_missing_pairs() {
        let g = build_session_graph(&[s(&[0, 1, 2]), s(&[0, 2])], 3).unwrap();
        let plain = effect_graph(&g).unwrap();
        let extended = effect_graph_with(
            &g,
            CausalOptions {
                second_order: true,
                ..Default::default()
            },
        )
        .unwrap();
        // 0 → 2 already exists, so the two-hop pass adds nothing here.
        assert_eq!(plain, extended);

        let g = build_session_graph(&[s(&[0, 1, 2])], 3).unwrap();
        let extended = effect_graph_with(
            &g,
            CausalOptions {
                second_order: true,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(extended.weight(0, 2), Some(1.0));
        assert_eq!(extended.edges().len(), 3);
    }
}
