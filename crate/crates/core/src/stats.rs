//! Asymmetry of item transitions: for item pairs `(a, b)` compare
//! `p(a|b) = #(b→a) / #(b→*)` with `p(b|a)` by cutting each into deciles and
//! counting pairs per decile cell.

use std::io::{self, Write};

use thiserror::Error;

use crate::graphs::{format_sig12, SessionGraph};

pub const GROUPS: usize = 10;

#[derive(Debug, Error, PartialEq)]
pub enum StatsError {
    #[error("item {0} has no outgoing transitions")]
    NoOutgoing(usize),
    #[error("item index {index} out of range for {n} items")]
    IndexOutOfRange { index: usize, n: usize },
    #[error("need at least {GROUPS} item pairs, found {0}")]
    TooFewPairs(usize),
}

/// `p(a|b)`: share of transitions out of `b` that go to `a`.
pub fn pab(g: &SessionGraph, a: usize, b: usize) -> Result<f64, StatsError> {
    let n = g.num_nodes();
    for idx in [a, b] {
        if idx >= n {
            return Err(StatsError::IndexOutOfRange { index: idx, n });
        }
    }
    let out = g.out_total(b);
    if out == 0 {
        return Err(StatsError::NoOutgoing(b));
    }
    Ok(g.pair_count(b, a) as f64 / out as f64)
}

/// Which member of an unordered pair plays `a`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Orientation {
    /// `a` is the smaller item index.
    #[default]
    LowerFirst,
    HigherFirst,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PairProbs {
    pub a: usize,
    pub b: usize,
    pub p_a_given_b: f64,
    pub p_b_given_a: f64,
}

/// Pairs joined by a transition in at least one direction where both items
/// have outgoing transitions, sorted by `(min, max)` index.
pub fn pair_probabilities(g: &SessionGraph, orientation: Orientation) -> Vec<PairProbs> {
    let mut keys: Vec<(usize, usize)> = g
        .edges()
        .filter(|&(i, j, _)| i != j)
        .map(|(i, j, _)| (i.min(j), i.max(j)))
        .filter(|&(lo, hi)| g.out_total(lo) > 0 && g.out_total(hi) > 0)
        .collect();
    keys.sort_unstable();
    keys.dedup();
    keys.into_iter()
        .map(|(lo, hi)| {
            let (a, b) = match orientation {
                Orientation::LowerFirst => (lo, hi),
                Orientation::HigherFirst => (hi, lo),
            };
            PairProbs {
                a,
                b,
                p_a_given_b: g.pair_count(b, a) as f64 / g.out_total(b) as f64,
                p_b_given_a: g.pair_count(a, b) as f64 / g.out_total(a) as f64,
            }
        })
        .collect()
}

/// Decile of each value: rank ascending (ties in input order), then
/// `floor(rank · 10 / n)`. Also returns the largest value in each decile.
fn deciles(values: &[f64]) -> (Vec<usize>, Vec<f64>) {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| values[x].total_cmp(&values[y]).then(x.cmp(&y)));
    let mut group = vec![0; n];
    let mut upper = vec![f64::NEG_INFINITY; GROUPS];
    for (rank, &i) in order.iter().enumerate() {
        let gi = rank * GROUPS / n;
        group[i] = gi;
        upper[gi] = upper[gi].max(values[i]);
    }
    (group, upper)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AsymmetryGrid {
    /// `grid[i][j]`: pairs with `p(a|b)` in decile `i` and `p(b|a)` in decile `j`.
    pub grid: [[u64; GROUPS]; GROUPS],
    /// Largest `p(a|b)` in each decile.
    pub upper_a_given_b: [f64; GROUPS],
    /// Largest `p(b|a)` in each decile.
    pub upper_b_given_a: [f64; GROUPS],
    pub pairs: usize,
    pub epsilon: Option<f64>,
    /// Pairs with `|p(a|b) - p(b|a)| >= ε` (when ε is set).
    pub asymmetric_pairs: Option<usize>,
}

pub fn build_grid(g: &SessionGraph, epsilon: Option<f64>) -> Result<AsymmetryGrid, StatsError> {
    build_grid_oriented(g, Orientation::LowerFirst, epsilon)
}

pub fn build_grid_oriented(
    g: &SessionGraph,
    orientation: Orientation,
    epsilon: Option<f64>,
) -> Result<AsymmetryGrid, StatsError> {
    let pairs = pair_probabilities(g, orientation);
    if pairs.len() < GROUPS {
        return Err(StatsError::TooFewPairs(pairs.len()));
    }
    let pa: Vec<f64> = pairs.iter().map(|p| p.p_a_given_b).collect();
    let pb: Vec<f64> = pairs.iter().map(|p| p.p_b_given_a).collect();
    let (ga, ua) = deciles(&pa);
    let (gb, ub) = deciles(&pb);
    let mut grid = [[0u64; GROUPS]; GROUPS];
    for k in 0..pairs.len() {
        grid[ga[k]][gb[k]] += 1;
    }
    let asymmetric_pairs = epsilon.map(|eps| pa.iter().zip(&pb).filter(|(x, y)| (*x - *y).abs() >= eps).count());
    Ok(AsymmetryGrid {
        grid,
        upper_a_given_b: ua.try_into().expect("ten groups"),
        upper_b_given_a: ub.try_into().expect("ten groups"),
        pairs: pairs.len(),
        epsilon,
        asymmetric_pairs,
    })
}

impl AsymmetryGrid {
    pub fn total(&self) -> u64 {
        self.grid.iter().flatten().sum()
    }

    pub fn transposed(&self) -> [[u64; GROUPS]; GROUPS] {
        let mut t = [[0; GROUPS]; GROUPS];
        for (i, row) in self.grid.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                t[j][i] = v;
            }
        }
        t
    }

    /// Ten rows of ten comma-separated counts; row = `p(a|b)` decile.
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        for row in &self.grid {
            let cells: Vec<String> = row.iter().map(u64::to_string).collect();
            writeln!(w, "{}", cells.join(","))?;
        }
        Ok(())
    }

    /// `group,upper_p_a_given_b,upper_p_b_given_a`, then summary lines.
    pub fn write_boundaries<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "group,upper_p_a_given_b,upper_p_b_given_a")?;
        for k in 0..GROUPS {
            writeln!(
                w,
                "{},{},{}",
                k,
                format_sig12(self.upper_a_given_b[k]),
                format_sig12(self.upper_b_given_a[k])
            )?;
        }
        writeln!(w, "# pairs = {}", self.pairs)?;
        if let (Some(eps), Some(n)) = (self.epsilon, self.asymmetric_pairs) {
            writeln!(w, "# epsilon = {eps}")?;
            writeln!(w, "# asymmetric_pairs = {n}")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graphs::build_session_graph;
    use crate::ingest::Session;

    #[test]
    fn single_successor_is_certain() {
        let g = build_session_graph(&[Session::new("s", vec![0, 1])], 2).unwrap();
        assert_eq!(pab(&g, 1, 0), Ok(1.0));
        assert_eq!(pab(&g, 0, 1), Err(StatsError::NoOutgoing(1)));
    }

    #[test]
    fn deciles_are_balanced() {
        let values: Vec<f64> = (0..23).map(|i| (i % 7) as f64).collect();
        let (g, _) = deciles(&values);
        let mut sizes = [0; GROUPS];
        for gi in g {
            sizes[gi] += 1;
        }
        let (lo, hi) = (sizes.iter().min().unwrap(), sizes.iter().max().unwrap());
        assert!(hi - lo <= 1, "{sizes:?}");
    }

    #[test]
    fn too_few_pairs() {
        let g = build_session_graph(&[Session::new("s", vec![0, 1, 0])], 2).unwrap();
        assert_eq!(build_grid(&g, None), Err(StatsError::TooFewPairs(1)));
    }
}
