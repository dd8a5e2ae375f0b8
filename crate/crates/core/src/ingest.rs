//! Interaction logs to sessions, vocabulary, train/test splits and
//! prefix-augmented samples.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, Write};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("empty dataset: every session was filtered out")]
    EmptyDataset,
    #[error("invalid split: {0}")]
    InvalidSplit(String),
    #[error("item index {index} out of range for vocabulary of {n} items")]
    UnknownIndex { index: usize, n: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Interaction {
    pub session_id: String,
    pub timestamp: i64,
    pub item_id: String,
}

/// Supported input log formats.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum LogFormat {
    /// `session_id<TAB>unix_timestamp<TAB>item_id`, `#` starts a comment line.
    #[default]
    Tsv,
}

/// How interactions are grouped into sessions.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum SessionKey {
    /// The first log column is the session id.
    #[default]
    SessionId,
    /// The first log column is a user id; a session is one user's
    /// interactions within one UTC day.
    UserDay,
}

/// A session before vocabulary mapping.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawSession {
    pub id: String,
    pub start: i64,
    pub items: Vec<String>,
}

/// A session of dense item indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Session {
    pub id: String,
    /// Start time; sessions read back from a processed file use their line
    /// number, which preserves the start-time order they were written in.
    pub start: i64,
    pub items: Vec<usize>,
}

impl Session {
    pub fn new(id: impl Into<String>, items: Vec<usize>) -> Self {
        Self {
            id: id.into(),
            start: 0,
            items,
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Vocabulary {
    index: HashMap<String, usize>,
    ids: Vec<String>,
}

impl Vocabulary {
    /// Assigns indices in order of first appearance.
    pub fn from_ids<I, S>(ids: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut vocab = Vocabulary::default();
        for id in ids {
            vocab.insert(id.as_ref());
        }
        vocab
    }

    fn insert(&mut self, id: &str) -> usize {
        if let Some(&i) = self.index.get(id) {
            return i;
        }
        let i = self.ids.len();
        self.ids.push(id.to_owned());
        self.index.insert(id.to_owned(), i);
        i
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn id_of(&self, index: usize) -> Option<&str> {
        self.ids.get(index).map(String::as_str)
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    /// `item_index<TAB>item_id` per line.
    pub fn write_tsv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for (i, id) in self.ids.iter().enumerate() {
            writeln!(w, "{i}\t{id}")?;
        }
        Ok(())
    }

    pub fn read_tsv<R: BufRead>(r: R) -> Result<Self, IngestError> {
        let mut vocab = Vocabulary::default();
        for (n, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let lineno = n + 1;
            let (idx, id) = line.split_once('\t').ok_or_else(|| IngestError::Malformed {
                line: lineno,
                reason: "expected item_index<TAB>item_id".into(),
            })?;
            let idx: usize = idx.parse().map_err(|_| IngestError::Malformed {
                line: lineno,
                reason: format!("bad item index {idx:?}"),
            })?;
            if idx != vocab.len() || id.is_empty() || vocab.index.contains_key(id) {
                return Err(IngestError::Malformed {
                    line: lineno,
                    reason: "vocabulary indices must be contiguous and ids unique".into(),
                });
            }
            vocab.insert(id);
        }
        Ok(vocab)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SplitSpec {
    /// The last `fraction` of sessions (by start time) become the test set.
    LastFraction(f64),
    /// Sessions starting within `period` seconds of the latest start.
    LastPeriod(i64),
}

impl SplitSpec {
    pub fn validate(&self) -> Result<(), IngestError> {
        match *self {
            SplitSpec::LastFraction(f) if !(0.0..1.0).contains(&f) => {
                Err(IngestError::InvalidSplit(format!("fraction {f} outside [0, 1)")))
            }
            SplitSpec::LastPeriod(p) if p < 0 => Err(IngestError::InvalidSplit(format!("negative period {p}"))),
            _ => Ok(()),
        }
    }
}

impl std::str::FromStr for SplitSpec {
    type Err = IngestError;

    /// `last:0.2` or `period:604800`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || IngestError::InvalidSplit(format!("{s:?}; expected last:<fraction> or period:<seconds>"));
        let (kind, value) = s.split_once(':').ok_or_else(bad)?;
        let spec = match kind {
            "last" => SplitSpec::LastFraction(value.parse().map_err(|_| bad())?),
            "period" => SplitSpec::LastPeriod(value.parse().map_err(|_| bad())?),
            _ => return Err(bad()),
        };
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PreprocessConfig {
    pub min_item_freq: usize,
    pub min_len: usize,
    pub max_len: Option<usize>,
    pub split: SplitSpec,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            min_item_freq: 5,
            min_len: 2,
            max_len: None,
            split: SplitSpec::LastFraction(0.2),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub train: Vec<Session>,
    pub test: Vec<Session>,
    pub vocab: Vocabulary,
}

pub fn parse_log<R: BufRead>(reader: R, format: LogFormat) -> Result<Vec<Interaction>, IngestError> {
    match format {
        LogFormat::Tsv => parse_tsv(reader),
    }
}

fn parse_tsv<R: BufRead>(reader: R) -> Result<Vec<Interaction>, IngestError> {
    let mut out = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let lineno = n + 1;
        let line = line.map_err(|e| IngestError::Malformed {
            line: lineno,
            reason: e.to_string(),
        })?;
        let line = line.strip_suffix('\r').unwrap_or(&line);
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(IngestError::Malformed {
                line: lineno,
                reason: format!("expected 3 tab-separated fields, found {}", fields.len()),
            });
        }
        let timestamp: i64 = fields[1].trim().parse().map_err(|_| IngestError::Malformed {
            line: lineno,
            reason: format!("bad timestamp {:?}", fields[1]),
        })?;
        if timestamp < 0 {
            return Err(IngestError::Malformed {
                line: lineno,
                reason: "negative timestamp".into(),
            });
        }
        if fields[0].is_empty() || fields[2].is_empty() {
            return Err(IngestError::Malformed {
                line: lineno,
                reason: "empty session or item id".into(),
            });
        }
        out.push(Interaction {
            session_id: fields[0].to_owned(),
            timestamp,
            item_id: fields[2].to_owned(),
        });
    }
    Ok(out)
}

const SECONDS_PER_DAY: i64 = 86_400;

/// Groups interactions into sessions ordered by timestamp, collapsing
/// consecutive repeats of the same item. Sessions are returned in order of
/// first appearance in the input.
pub fn sessionize(interactions: &[Interaction], key: SessionKey) -> Vec<RawSession> {
    let mut order: Vec<String> = Vec::new();
    let mut groups: HashMap<String, Vec<(i64, usize, &str)>> = HashMap::new();
    for (pos, it) in interactions.iter().enumerate() {
        let k = match key {
            SessionKey::SessionId => it.session_id.clone(),
            SessionKey::UserDay => format!("{}@{}", it.session_id, it.timestamp.div_euclid(SECONDS_PER_DAY)),
        };
        groups
            .entry(k.clone())
            .or_insert_with(|| {
                order.push(k);
                Vec::new()
            })
            .push((it.timestamp, pos, it.item_id.as_str()));
    }
    order
        .into_iter()
        .map(|id| {
            let mut events = groups.remove(&id).unwrap_or_default();
            events.sort_by_key(|&(t, pos, _)| (t, pos));
            let start = events.first().map_or(0, |e| e.0);
            let mut items: Vec<String> = Vec::with_capacity(events.len());
            for (_, _, item) in events {
                if items.last().map(String::as_str) != Some(item) {
                    items.push(item.to_owned());
                }
            }
            RawSession { id, start, items }
        })
        .collect()
}

fn collapse_repeats<T: PartialEq>(items: &mut Vec<T>) {
    items.dedup();
}

/// Applies the item-frequency and length filters repeatedly until nothing
/// changes, so the result is a fixed point of the filter.
pub fn filter_sessions(sessions: &[RawSession], config: &PreprocessConfig) -> Vec<RawSession> {
    let mut current: Vec<RawSession> = sessions.to_vec();
    loop {
        let mut freq: HashMap<&str, usize> = HashMap::new();
        for s in &current {
            for item in &s.items {
                *freq.entry(item.as_str()).or_default() += 1;
            }
        }
        let next: Vec<RawSession> = current
            .iter()
            .filter_map(|s| {
                let mut items: Vec<String> = s
                    .items
                    .iter()
                    .filter(|it| freq[it.as_str()] >= config.min_item_freq)
                    .cloned()
                    .collect();
                collapse_repeats(&mut items);
                let keep = items.len() >= config.min_len && config.max_len.is_none_or(|m| items.len() <= m);
                keep.then(|| RawSession {
                    id: s.id.clone(),
                    start: s.start,
                    items,
                })
            })
            .collect();
        if next == current {
            return next;
        }
        current = next;
    }
}

/// Filters sessions, splits them by start time and maps items to a
/// vocabulary built from the training split only.
pub fn preprocess(sessions: &[RawSession], config: &PreprocessConfig) -> Result<Dataset, IngestError> {
    config.split.validate()?;
    let mut kept = filter_sessions(sessions, config);
    if kept.is_empty() {
        return Err(IngestError::EmptyDataset);
    }
    kept.sort_by(|a, b| a.start.cmp(&b.start).then_with(|| a.id.cmp(&b.id)));

    let n_test = match config.split {
        SplitSpec::LastFraction(f) => ((kept.len() as f64) * f).round() as usize,
        SplitSpec::LastPeriod(period) => {
            let latest = kept.last().map_or(0, |s| s.start);
            kept.iter().filter(|s| s.start > latest - period).count()
        }
    };
    let n_train = kept.len() - n_test.min(kept.len());
    if n_train == 0 {
        return Err(IngestError::EmptyDataset);
    }
    let (train_raw, test_raw) = kept.split_at(n_train);

    let vocab = Vocabulary::from_ids(train_raw.iter().flat_map(|s| s.items.iter()));
    let train = train_raw
        .iter()
        .map(|s| Session {
            id: s.id.clone(),
            start: s.start,
            items: s
                .items
                .iter()
                .map(|it| vocab.index_of(it).expect("train item in vocab"))
                .collect(),
        })
        .collect();
    let test = test_raw
        .iter()
        .filter_map(|s| {
            let mut items: Vec<usize> = s.items.iter().filter_map(|it| vocab.index_of(it)).collect();
            collapse_repeats(&mut items);
            (items.len() >= config.min_len).then(|| Session {
                id: s.id.clone(),
                start: s.start,
                items,
            })
        })
        .collect();
    Ok(Dataset { train, test, vocab })
}

/// One training example: a session prefix and the item that followed it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sample {
    pub session: usize,
    pub prefix: Vec<usize>,
    pub target: usize,
}

/// Expands each session `[v1..vl]` into `([v1..vk], v{k+1})` for
/// `k = 1..l-1`. `session` in each sample is the index into `sessions`.
pub fn augment_prefixes(sessions: &[Session]) -> Vec<Sample> {
    let mut out = Vec::with_capacity(sessions.iter().map(|s| s.len().saturating_sub(1)).sum());
    for (si, s) in sessions.iter().enumerate() {
        for k in 1..s.items.len() {
            out.push(Sample {
                session: si,
                prefix: s.items[..k].to_vec(),
                target: s.items[k],
            });
        }
    }
    out
}

/// One sample per session: all but the last item, predicting the last.
pub fn last_item_samples(sessions: &[Session]) -> Vec<Sample> {
    sessions
        .iter()
        .enumerate()
        .filter(|(_, s)| s.len() >= 2)
        .map(|(si, s)| Sample {
            session: si,
            prefix: s.items[..s.len() - 1].to_vec(),
            target: s.items[s.len() - 1],
        })
        .collect()
}

/// `session_id<TAB>i,j,k` per line.
pub fn write_sessions<W: Write>(mut w: W, sessions: &[Session]) -> std::io::Result<()> {
    for s in sessions {
        let items: Vec<String> = s.items.iter().map(usize::to_string).collect();
        writeln!(w, "{}\t{}", s.id, items.join(","))?;
    }
    Ok(())
}

pub fn read_sessions<R: BufRead>(r: R, n_items: Option<usize>) -> Result<Vec<Session>, IngestError> {
    let mut out = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        let lineno = n + 1;
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let (id, items) = line.split_once('\t').ok_or_else(|| IngestError::Malformed {
            line: lineno,
            reason: "expected session_id<TAB>items".into(),
        })?;
        let items = items
            .split(',')
            .map(|t| {
                let idx: usize = t.trim().parse().map_err(|_| IngestError::Malformed {
                    line: lineno,
                    reason: format!("bad item index {t:?}"),
                })?;
                match n_items {
                    Some(n) if idx >= n => Err(IngestError::UnknownIndex { index: idx, n }),
                    _ => Ok(idx),
                }
            })
            .collect::<Result<Vec<_>, _>>()?;
        out.push(Session {
            id: id.to_owned(),
            start: out.len() as i64,
            items,
        });
    }
    Ok(out)
}

/// Item occurrence counts across sessions, keyed by index.
pub fn item_counts(sessions: &[Session]) -> BTreeMap<usize, usize> {
    let mut counts = BTreeMap::new();
    for s in sessions {
        for &i in &s.items {
            *counts.entry(i).or_default() += 1;
        }
    }
    counts
}
