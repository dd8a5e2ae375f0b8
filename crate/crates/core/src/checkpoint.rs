//! Binary parameter snapshots.
//!
//! ```text
//! CGSR1
//! meta <key> <value>        (zero or more)
//! param <name> <rows> <cols> (one per tensor, layout order)
//! end
//! <f64 little-endian values, row-major, in param order>
//! ```

use std::collections::BTreeMap;
use std::io::{self, BufRead, Write};

use thiserror::Error;

use crate::model::{Layout, Parameters};
use crate::numcore::Array;

pub const MAGIC: &str = "CGSR1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (missing {MAGIC} header)")]
    BadMagic,
    #[error("malformed checkpoint header line {line}: {reason}")]
    Header { line: usize, reason: String },
    #[error("checkpoint manifest does not match the model layout: {0}")]
    Manifest(String),
    #[error("checkpoint data truncated")]
    Truncated,
    #[error("checkpoint has {0} trailing bytes")]
    Trailing(usize),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Parameters plus free-form metadata (model switches, seed).
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub params: Parameters,
}

impl Checkpoint {
    pub fn new(params: Parameters) -> Self {
        Self {
            meta: BTreeMap::new(),
            params,
        }
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<(), CheckpointError> {
        writeln!(w, "{MAGIC}")?;
        for (k, v) in &self.meta {
            if k.contains(char::is_whitespace) || v.contains('\n') {
                return Err(CheckpointError::Header {
                    line: 0,
                    reason: format!("meta entry {k:?} cannot be encoded"),
                });
            }
            writeln!(w, "meta {k} {v}")?;
        }
        for (name, r, c) in self.params.layout.manifest() {
            writeln!(w, "param {name} {r} {c}")?;
        }
        writeln!(w, "end")?;
        let mut buf = Vec::with_capacity(8 * self.params.num_values());
        for t in &self.params.tensors {
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        w.write_all(&buf)?;
        w.flush()?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn read<R: BufRead>(mut r: R) -> Result<Self, CheckpointError> {
        let mut line = String::new();
        r.read_line(&mut line)?;
        if line.trim_end_matches('\n') != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let mut meta = BTreeMap::new();
        let mut shapes: Vec<(String, usize, usize)> = Vec::new();
        let mut lineno = 1;
        loop {
            line.clear();
            lineno += 1;
            if r.read_line(&mut line)? == 0 {
                return Err(CheckpointError::Header {
                    line: lineno,
                    reason: "missing `end`".into(),
                });
            }
            let text = line.trim_end_matches('\n');
            if text == "end" {
                break;
            }
            let bad = |reason: &str| CheckpointError::Header {
                line: lineno,
                reason: reason.to_string(),
            };
            match text.split_once(' ') {
                Some(("meta", rest)) => {
                    let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
                    meta.insert(k.to_string(), v.to_string());
                }
                Some(("param", rest)) => {
                    let f: Vec<&str> = rest.split(' ').collect();
                    if f.len() != 3 {
                        return Err(bad("expected `param <name> <rows> <cols>`"));
                    }
                    let rows = f[1].parse().map_err(|_| bad("bad row count"))?;
                    let cols = f[2].parse().map_err(|_| bad("bad column count"))?;
                    shapes.push((f[0].to_string(), rows, cols));
                }
                _ => return Err(bad("unknown header entry")),
            }
        }

        let layout = infer_layout(&shapes)?;
        let expected = layout.manifest();
        if expected != shapes {
            let first = expected
                .iter()
                .zip(&shapes)
                .find(|(a, b)| a != b)
                .map(|(a, b)| format!("expected {a:?}, found {b:?}"))
                .unwrap_or_else(|| format!("expected {} tensors, found {}", expected.len(), shapes.len()));
            return Err(CheckpointError::Manifest(first));
        }

        let mut tensors = Vec::with_capacity(shapes.len());
        let mut bytes = [0u8; 8];
        for (_, rows, cols) in &shapes {
            let mut data = Vec::with_capacity(rows * cols);
            for _ in 0..rows * cols {
                r.read_exact(&mut bytes).map_err(|e| match e.kind() {
                    io::ErrorKind::UnexpectedEof => CheckpointError::Truncated,
                    _ => CheckpointError::Io(e),
                })?;
                data.push(f64::from_le_bytes(bytes));
            }
            tensors.push(Array::from_vec(*rows, *cols, data));
        }
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(CheckpointError::Trailing(rest.len()));
        }
        let params = Parameters::from_tensors(layout, tensors).map_err(|e| CheckpointError::Manifest(e.to_string()))?;
        Ok(Self { meta, params })
    }
}

fn infer_layout(shapes: &[(String, usize, usize)]) -> Result<Layout, CheckpointError> {
    let (name, n_items, dim) = shapes
        .first()
        .ok_or_else(|| CheckpointError::Manifest("no tensors".into()))?;
    if name != "embedding" {
        return Err(CheckpointError::Manifest(format!(
            "first tensor is {name}, expected embedding"
        )));
    }
    let heads = shapes
        .iter()
        .filter(|(n, _, _)| n.starts_with("cause.head") && n.ends_with(".w1"))
        .count();
    if *n_items == 0 || *dim == 0 || heads == 0 {
        return Err(CheckpointError::Manifest(
            "empty embedding or no attention heads".into(),
        ));
    }
    Ok(Layout::new(*n_items, *dim, heads))
}
