//! Next-item ranking metrics over session prefixes.

use std::io::{self, Write};

use rayon::prelude::*;
use thiserror::Error;

use crate::ingest::{augment_prefixes, Session};
use crate::model::{Cgsr, EncodedItems, ModelError, Parameters};

pub const DEFAULT_CUTOFFS: [usize; 3] = [5, 10, 20];

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no samples to evaluate")]
    Empty,
    #[error("cutoff K must be >= 1")]
    ZeroCutoff,
    #[error("rank must be >= 1")]
    ZeroRank,
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// 1-based rank of `target`: items with a strictly higher score come first,
/// then equal scores in index order.
pub fn rank_target(scores: &[f64], target: usize) -> usize {
    let t = scores[target];
    let mut rank = 1;
    for (i, &s) in scores.iter().enumerate() {
        if s > t || (s == t && i < target) {
            rank += 1;
        }
    }
    rank
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Metrics {
    pub k: usize,
    pub hr: f64,
    pub mrr: f64,
    pub ndcg: f64,
}

pub fn metrics(ranks: &[usize], k: usize) -> Result<Metrics, EvalError> {
    if ranks.is_empty() {
        return Err(EvalError::Empty);
    }
    if k == 0 {
        return Err(EvalError::ZeroCutoff);
    }
    let (mut hits, mut rr, mut gain) = (0usize, 0.0, 0.0);
    for &r in ranks {
        if r == 0 {
            return Err(EvalError::ZeroRank);
        }
        if r <= k {
            hits += 1;
            rr += 1.0 / r as f64;
            gain += 1.0 / ((r + 1) as f64).log2();
        }
    }
    let n = ranks.len() as f64;
    Ok(Metrics {
        k,
        hr: hits as f64 / n,
        mrr: rr / n,
        ndcg: gain / n,
    })
}

/// Target ranks of an evaluation run plus metrics at each cutoff.
#[derive(Clone, Debug, PartialEq)]
pub struct RankingResult {
    pub ranks: Vec<usize>,
    pub metrics: Vec<Metrics>,
}

impl RankingResult {
    pub fn from_ranks(ranks: Vec<usize>, cutoffs: &[usize]) -> Result<Self, EvalError> {
        let metrics = cutoffs.iter().map(|&k| metrics(&ranks, k)).collect::<Result<_, _>>()?;
        Ok(Self { ranks, metrics })
    }

    pub fn at(&self, k: usize) -> Option<&Metrics> {
        self.metrics.iter().find(|m| m.k == k)
    }

    /// `metric,K,value`, one row per metric and cutoff.
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "metric,K,value")?;
        for (name, get) in [
            ("HR", (|m: &Metrics| m.hr) as fn(&Metrics) -> f64),
            ("MRR", |m| m.mrr),
            ("NDCG", |m| m.ndcg),
        ] {
            for m in &self.metrics {
                writeln!(w, "{name},{},{}", m.k, get(m))?;
            }
        }
        Ok(())
    }

    /// `key = value` lines: sample count, then every metric.
    pub fn write_summary<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "samples = {}", self.ranks.len())?;
        for m in &self.metrics {
            writeln!(w, "hr@{} = {}", m.k, m.hr)?;
            writeln!(w, "mrr@{} = {}", m.k, m.mrr)?;
            writeln!(w, "ndcg@{} = {}", m.k, m.ndcg)?;
        }
        Ok(())
    }
}

/// Ranks the next item after every prefix of every session.
pub fn evaluate(
    model: &Cgsr,
    params: &Parameters,
    sessions: &[Session],
    cutoffs: &[usize],
) -> Result<RankingResult, EvalError> {
    let encoded = model.encode_items(params)?;
    evaluate_encoded(model, params, &encoded, sessions, cutoffs)
}

pub fn evaluate_encoded(
    model: &Cgsr,
    params: &Parameters,
    encoded: &EncodedItems,
    sessions: &[Session],
    cutoffs: &[usize],
) -> Result<RankingResult, EvalError> {
    let samples = augment_prefixes(sessions);
    if samples.is_empty() {
        return Err(EvalError::Empty);
    }
    let ranks = samples
        .par_iter()
        .map(|s| {
            let scores = model.score_session(params, encoded, &s.prefix)?;
            Ok(rank_target(&scores.total, s.target))
        })
        .collect::<Result<Vec<_>, ModelError>>()?;
    RankingResult::from_ranks(ranks, cutoffs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rank_examples() {
        assert_eq!(rank_target(&[3.0, 1.0, 2.0], 0), 1);
        assert_eq!(rank_target(&[1.0, 1.0, 1.0], 2), 3);
        assert_eq!(rank_target(&[1.0, 1.0, 1.0], 0), 1);
    }

    #[test]
    fn metric_examples() {
        assert_eq!(
            metrics(&[1], 20).unwrap(),
            Metrics {
                k: 20,
                hr: 1.0,
                mrr: 1.0,
                ndcg: 1.0
            }
        );
        let m = metrics(&[3], 5).unwrap();
        assert_eq!((m.hr, m.mrr, m.ndcg), (1.0, 1.0 / 3.0, 0.5));
        let m = metrics(&[21], 20).unwrap();
        assert_eq!((m.hr, m.mrr, m.ndcg), (0.0, 0.0, 0.0));
        assert!(matches!(metrics(&[], 5), Err(EvalError::Empty)));
    }

    #[test]
    fn csv_layout() {
        let r = RankingResult::from_ranks(vec![1, 2], &[5]).unwrap();
        let mut out = Vec::new();
        r.write_csv(&mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert_eq!(text.lines().next(), Some("metric,K,value"));
        assert!(text.contains("HR,5,1\n"));
        assert!(text.contains("MRR,5,0.75\n"));
    }
}
