//! Attributing a recommendation to the items of the session.
//!
//! Session-level scores come straight from [`Cgsr::score_session`]. Item-level
//! scores project each session item through the session encoder's output
//! matrix with the item standing in for both the last item and the pooled
//! context:
//!
//! ```text
//! ca_ij = (W_c6 [x_i^c; x_i^c]) · x_j^e - γ1 (W_e6 [x_i^e; x_i^e]) · x_j^c
//! r_ij  = (W_r6 [x_i^r; x_i^r]) · x_j^r
//! ```

use std::io::{self, Write};

use thiserror::Error;

use crate::ingest::{Session, Vocabulary};
use crate::model::{Cgsr, EncodedItems, GraphKind, ModelError, Parameters, SessionParam};
use crate::numcore::Array;

#[derive(Debug, Error)]
pub enum ExplainError {
    #[error("item {0:?} is not in the vocabulary")]
    UnknownItem(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ItemAttribution {
    pub position: usize,
    pub item: usize,
    pub causality: Option<f64>,
    pub correlation: Option<f64>,
    /// 1 = largest score among the session items; ties keep session order.
    pub causality_rank: Option<usize>,
    pub correlation_rank: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExplanationReport {
    pub session_id: String,
    pub item: usize,
    pub total: f64,
    pub causality: Option<f64>,
    pub correlation: Option<f64>,
    pub preference: Option<f64>,
    /// Catalog rank of `item` under the total score.
    pub catalog_rank: usize,
    pub rows: Vec<ItemAttribution>,
}

/// `(W6 [x; x]) · y`.
fn projected_dot(w6: &Array, x: &[f64], y: &[f64]) -> f64 {
    let d = x.len();
    let mut acc = 0.0;
    for (r, &yr) in y.iter().enumerate().take(w6.rows()) {
        let row = w6.row_slice(r);
        let (left, right) = row.split_at(d);
        let mut proj = 0.0;
        for (a, xc) in left.iter().chain(right).zip(x.iter().chain(x)) {
            proj += a * xc;
        }
        acc += proj * yr;
    }
    acc
}

fn ranks_desc(values: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    let mut ranks = vec![0; values.len()];
    for (r, &i) in order.iter().enumerate() {
        ranks[i] = r + 1;
    }
    ranks
}

pub fn explain(
    model: &Cgsr,
    params: &Parameters,
    encoded: &EncodedItems,
    session: &Session,
    item: usize,
) -> Result<ExplanationReport, ExplainError> {
    let n = model.n_items();
    if item >= n {
        return Err(ExplainError::UnknownItem(item.to_string()));
    }
    let scores = model.score_session(params, encoded, &session.items)?;
    let layout = params.layout;
    let w6 = |kind| params.get(layout.session(kind, SessionParam::W6));
    let gamma1 = params.gamma(0);

    let causality: Option<Vec<f64>> = match (encoded.cause.as_ref(), encoded.effect.as_ref()) {
        (Some(xc), Some(xe)) => Some(
            session
                .items
                .iter()
                .map(|&i| {
                    let fwd = projected_dot(w6(GraphKind::Cause), xc.row_slice(i), xe.row_slice(item));
                    let bwd = projected_dot(w6(GraphKind::Effect), xe.row_slice(i), xc.row_slice(item));
                    fwd - gamma1 * bwd
                })
                .collect(),
        ),
        _ => None,
    };
    let correlation: Option<Vec<f64>> = encoded.correlation.as_ref().map(|xr| {
        session
            .items
            .iter()
            .map(|&i| projected_dot(w6(GraphKind::Correlation), xr.row_slice(i), xr.row_slice(item)))
            .collect()
    });
    let ca_ranks = causality.as_deref().map(ranks_desc);
    let r_ranks = correlation.as_deref().map(ranks_desc);

    let rows = session
        .items
        .iter()
        .enumerate()
        .map(|(pos, &i)| ItemAttribution {
            position: pos,
            item: i,
            causality: causality.as_ref().map(|v| v[pos]),
            correlation: correlation.as_ref().map(|v| v[pos]),
            causality_rank: ca_ranks.as_ref().map(|v| v[pos]),
            correlation_rank: r_ranks.as_ref().map(|v| v[pos]),
        })
        .collect();

    Ok(ExplanationReport {
        session_id: session.id.clone(),
        item,
        total: scores.total[item],
        causality: scores.causality.as_ref().map(|v| v[item]),
        correlation: scores.correlation.as_ref().map(|v| v[item]),
        preference: scores.preference.as_ref().map(|v| v[item]),
        catalog_rank: crate::eval::rank_target(&scores.total, item),
        rows,
    })
}

/// Looks `item_id` up in `vocab` before explaining.
pub fn explain_id(
    model: &Cgsr,
    params: &Parameters,
    encoded: &EncodedItems,
    vocab: &Vocabulary,
    session: &Session,
    item_id: &str,
) -> Result<ExplanationReport, ExplainError> {
    let item = vocab
        .index_of(item_id)
        .ok_or_else(|| ExplainError::UnknownItem(item_id.to_string()))?;
    explain(model, params, encoded, session, item)
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| x.to_string())
}

fn opt_rank(v: Option<usize>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| x.to_string())
}

impl ExplanationReport {
    /// Text export. Item ids are taken from `vocab` when given, otherwise
    /// the indices are printed.
    pub fn write_text<W: Write>(&self, mut w: W, vocab: Option<&Vocabulary>) -> io::Result<()> {
        let name = |i: usize| -> String {
            vocab
                .and_then(|v| v.id_of(i))
                .map_or_else(|| i.to_string(), str::to_string)
        };
        writeln!(w, "session = {}", self.session_id)?;
        writeln!(w, "item = {}", name(self.item))?;
        writeln!(w, "item_index = {}", self.item)?;
        writeln!(w, "catalog_rank = {}", self.catalog_rank)?;
        writeln!(w, "score_total = {}", self.total)?;
        writeln!(w, "score_ca = {}", opt(self.causality))?;
        writeln!(w, "score_r = {}", opt(self.correlation))?;
        writeln!(w, "score_p = {}", opt(self.preference))?;
        writeln!(w)?;
        writeln!(w, "position,item,score_ca,rank_ca,score_r,rank_r")?;
        for r in &self.rows {
            writeln!(
                w,
                "{},{},{},{},{},{}",
                r.position,
                name(r.item),
                opt(r.causality),
                opt_rank(r.causality_rank),
                opt(r.correlation),
                opt_rank(r.correlation_rank)
            )?;
        }
        Ok(())
    }

    /// `<session_id>__<item_id>.txt`
    pub fn file_name(&self, vocab: Option<&Vocabulary>) -> String {
        let item = vocab
            .and_then(|v| v.id_of(self.item))
            .map_or_else(|| self.item.to_string(), str::to_string);
        format!("{}__{}.txt", sanitize(&self.session_id), sanitize(&item))
    }
}

fn sanitize(s: &str) -> String {
    s.chars()
        .map(|c| {
            if c == '/' || c == '\\' || c.is_control() {
                '_'
            } else {
                c
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn projected_dot_duplicates_input() {
        // W6 = [1 2], x = 3, y = 5: (1*3 + 2*3) * 5
        let w6 = Array::from_vec(1, 2, vec![1.0, 2.0]);
        assert_eq!(projected_dot(&w6, &[3.0], &[5.0]), 45.0);
    }

    #[test]
    fn ranks_break_ties_by_position() {
        assert_eq!(ranks_desc(&[1.0, 3.0, 1.0, 2.0]), vec![3, 1, 4, 2]);
    }
}
