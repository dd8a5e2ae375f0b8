use std::path::{Path, PathBuf};

use anyhow::{ensure, Context, Result};
use cgsr::checkpoint::Checkpoint;
use cgsr::eval::{evaluate, DEFAULT_CUTOFFS};
use cgsr::explain::explain as explain_item;
use cgsr::graphs::GraphSet;
use cgsr::ingest::{
    augment_prefixes, parse_log, preprocess, read_sessions, sessionize, write_sessions, LogFormat, PreprocessConfig,
    SessionKey, SplitSpec,
};
use cgsr::stats::build_grid;
use cgsr::trainer::{train as fit, write_history, Preset};
use cgsr::{Cgsr, Parameters, Session, TrainConfig, Vocabulary};
use clap::Args;

use crate::output::Run;
use crate::GlobalArgs;

pub const TRAIN_FILE: &str = "train.sessions";
pub const TEST_FILE: &str = "test.sessions";
pub const VOCAB_FILE: &str = "vocab.tsv";
pub const CHECKPOINT_FILE: &str = "checkpoint.cgsr";

const DEFAULT_SEED: u64 = 42;

#[derive(Args, Debug)]
pub struct PrepArgs {
    /// Interaction log: `session_id<TAB>unix_timestamp<TAB>item_id`.
    #[arg(long = "in", value_name = "FILE")]
    input: PathBuf,
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// `last:<fraction>` of sessions by start time, or `period:<seconds>`.
    #[arg(long, default_value = "last:0.2")]
    split: SplitSpec,
    #[arg(long, default_value_t = 5)]
    min_item_freq: usize,
    #[arg(long, default_value_t = 2)]
    min_len: usize,
    #[arg(long)]
    max_len: Option<usize>,
    /// Treat the first column as a user id and cut sessions per UTC day.
    #[arg(long)]
    user_day: bool,
}

#[derive(Args, Debug)]
pub struct GraphsArgs {
    /// Directory written by `prep`.
    #[arg(long, value_name = "DIR")]
    data: PathBuf,
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
}

#[derive(Args, Debug)]
pub struct StatsArgs {
    #[arg(long, value_name = "DIR")]
    data: PathBuf,
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Also count pairs with |p(a|b) - p(b|a)| >= EPSILON.
    #[arg(long)]
    epsilon: Option<f64>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long, value_name = "DIR")]
    data: PathBuf,
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    /// Override one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Independent runs with seeds seed, seed+1, ...; reports mean ± std.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u32).range(1..))]
    repeat: u32,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long, value_name = "FILE")]
    checkpoint: PathBuf,
    /// Directory written by `prep`; the graphs are rebuilt from its train split.
    #[arg(long, value_name = "DIR")]
    data: PathBuf,
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Sessions to rank [default: the data directory's test split].
    #[arg(long, value_name = "FILE")]
    sessions: Option<PathBuf>,
    /// Cutoffs K.
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_CUTOFFS)]
    k: Vec<usize>,
}

#[derive(Args, Debug)]
#[command(group(clap::ArgGroup::new("target").required(true).args(["item", "top"])))]
pub struct ExplainArgs {
    #[arg(long, value_name = "FILE")]
    checkpoint: PathBuf,
    #[arg(long, value_name = "DIR")]
    data: PathBuf,
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Sessions to explain [default: the data directory's test split].
    #[arg(long, value_name = "FILE")]
    sessions: Option<PathBuf>,
    /// Explain this item id for every session; repeatable.
    #[arg(long, value_name = "ID")]
    item: Vec<String>,
    /// Explain each session's top-K recommendations.
    #[arg(long, value_name = "K", value_parser = clap::value_parser!(u32).range(1..))]
    top: Option<u32>,
}

/// Defaults, then the config file, then the preset, then explicit flags.
fn resolve_config(global: &GlobalArgs, run: &mut Run, overrides: &[String]) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    if let Some(path) = &global.config {
        let text = run.read_text(path)?;
        cfg.apply_text(&text)
            .with_context(|| format!("in {}", path.display()))?;
    }
    if let Some(name) = &global.preset {
        name.parse::<Preset>()?.apply(&mut cfg);
    }
    if let Some(seed) = global.seed {
        cfg.seed = seed;
    }
    for o in overrides {
        let (k, v) = o
            .split_once('=')
            .with_context(|| format!("--set {o:?}: expected KEY=VALUE"))?;
        cfg.set(k.trim(), v.trim())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// A flag combination that makes no sense; reported with exit code 2 like
/// the parser's own usage errors.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn reject_model_flags(global: &GlobalArgs, command: &str, why: &str) -> Result<()> {
    if global.config.is_some() || global.preset.is_some() {
        return Err(UsageError(format!("--config and --preset have no effect on `{command}`: {why}")).into());
    }
    Ok(())
}

struct Data {
    train: Vec<Session>,
    vocab: Vocabulary,
}

fn load_sessions(run: &mut Run, path: &Path, n_items: usize) -> Result<Vec<Session>> {
    let bytes = run.read(path)?;
    read_sessions(&bytes[..], Some(n_items)).with_context(|| format!("in {}", path.display()))
}

fn load_data(run: &mut Run, dir: &Path) -> Result<Data> {
    let vocab_path = dir.join(VOCAB_FILE);
    let bytes = run.read(&vocab_path)?;
    let vocab = Vocabulary::read_tsv(&bytes[..]).with_context(|| format!("in {}", vocab_path.display()))?;
    ensure!(!vocab.is_empty(), "{} is empty", vocab_path.display());
    let train = load_sessions(run, &dir.join(TRAIN_FILE), vocab.len())?;
    Ok(Data { train, vocab })
}

fn labeler(vocab: &Vocabulary) -> impl Fn(usize) -> String + '_ {
    move |i| vocab.id_of(i).map_or_else(|| i.to_string(), str::to_string)
}

pub fn prep(global: &GlobalArgs, a: PrepArgs) -> Result<()> {
    reject_model_flags(global, "prep", "it only reads the log")?;
    let seed = global.seed.unwrap_or(DEFAULT_SEED);
    let mut run = Run::new("prep", seed, &a.out, &global.expect_digest)?;
    let config = PreprocessConfig {
        min_item_freq: a.min_item_freq,
        min_len: a.min_len,
        max_len: a.max_len,
        split: a.split,
    };
    let key = if a.user_day {
        SessionKey::UserDay
    } else {
        SessionKey::SessionId
    };
    run.set_config([
        ("min_item_freq", a.min_item_freq.to_string()),
        ("min_len", a.min_len.to_string()),
        ("max_len", a.max_len.map_or_else(|| "none".into(), |m| m.to_string())),
        (
            "split",
            match a.split {
                SplitSpec::LastFraction(f) => format!("last:{f}"),
                SplitSpec::LastPeriod(p) => format!("period:{p}"),
            },
        ),
        (
            "session_key",
            if a.user_day { "user_day" } else { "session_id" }.to_string(),
        ),
    ]);

    let bytes = run.read(&a.input)?;
    let events = parse_log(&bytes[..], LogFormat::Tsv).with_context(|| format!("in {}", a.input.display()))?;
    let ds = preprocess(&sessionize(&events, key), &config)?;
    run.write_with(TRAIN_FILE, |w| write_sessions(w, &ds.train))?;
    run.write_with(TEST_FILE, |w| write_sessions(w, &ds.test))?;
    run.write_with(VOCAB_FILE, |w| ds.vocab.write_tsv(w))?;
    run.finish()?;
    eprintln!(
        "prep: {} train sessions, {} test sessions, {} items",
        ds.train.len(),
        ds.test.len(),
        ds.vocab.len()
    );
    Ok(())
}

pub fn graphs(global: &GlobalArgs, a: GraphsArgs) -> Result<()> {
    let mut run = Run::new("graphs", 0, &a.out, &global.expect_digest)?;
    let cfg = resolve_config(global, &mut run, &[])?;
    let mut run = run.with_seed(cfg.seed);
    run.set_config(cfg.to_key_values());
    let data = load_data(&mut run, &a.data)?;
    let g = GraphSet::build(&data.train, data.vocab.len(), cfg.causal)?;
    let label = labeler(&data.vocab);
    run.write_with("session.csv", |w| g.session.write_csv_labeled(w, &label))?;
    run.write_with("effect.csv", |w| g.effect.write_csv_labeled(w, &label))?;
    run.write_with("cause.csv", |w| g.cause.write_csv_labeled(w, &label))?;
    run.write_with("correlation.csv", |w| g.correlation.write_csv_labeled(w, &label))?;
    run.finish()?;
    Ok(())
}

pub fn stats(global: &GlobalArgs, a: StatsArgs) -> Result<()> {
    reject_model_flags(global, "stats", "the grid depends only on the transition counts")?;
    let mut run = Run::new(
        "stats",
        global.seed.unwrap_or(DEFAULT_SEED),
        &a.out,
        &global.expect_digest,
    )?;
    if let Some(eps) = a.epsilon {
        ensure!(eps.is_finite() && eps >= 0.0, "--epsilon must be a non-negative number");
        run.set_config([("epsilon", eps.to_string())]);
    }
    let data = load_data(&mut run, &a.data)?;
    let g = cgsr::graphs::build_session_graph(&data.train, data.vocab.len())?;
    let grid = build_grid(&g, a.epsilon)?;
    run.write_with("grid.csv", |w| grid.write_csv(w))?;
    run.write_with("grid_boundaries.csv", |w| grid.write_boundaries(w))?;
    run.finish()?;
    Ok(())
}

/// Best-epoch validation and test metrics at K = 20 of one training run.
struct RunSummary {
    seed: u64,
    best_epoch: usize,
    val: Option<(f64, f64, f64)>,
    test: Option<(f64, f64, f64)>,
}

/// Output name and accessor of one repeat-summary statistic.
type SummaryColumn = (&'static str, fn(&RunSummary) -> Option<f64>);

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn fmt_triplet(t: Option<(f64, f64, f64)>) -> String {
    match t {
        Some((a, b, c)) => format!("{a},{b},{c}"),
        None => ",,".to_string(),
    }
}

pub fn train(global: &GlobalArgs, a: TrainArgs) -> Result<()> {
    let mut run = Run::new("train", 0, &a.out, &global.expect_digest)?;
    let mut overrides = a.overrides.clone();
    if let Some(e) = a.epochs {
        overrides.push(format!("epochs={e}"));
    }
    let cfg = resolve_config(global, &mut run, &overrides)?;
    let mut run = run.with_seed(cfg.seed);
    run.set_config(cfg.to_key_values());
    let data = load_data(&mut run, &a.data)?;
    let test_path = a.data.join(TEST_FILE);
    let test = if test_path.exists() {
        load_sessions(&mut run, &test_path, data.vocab.len())?
    } else {
        Vec::new()
    };
    let has_test = !augment_prefixes(&test).is_empty();

    let mut summaries = Vec::new();
    for r in 0..a.repeat {
        let cfg_r = TrainConfig {
            seed: cfg.seed.wrapping_add(r.into()),
            ..cfg.clone()
        };
        let prefix = if a.repeat > 1 {
            format!("run-{}/", r + 1)
        } else {
            String::new()
        };
        let (model, outcome) = fit(&data.train, data.vocab.len(), &cfg_r)?;
        run.write(
            &format!("{prefix}{CHECKPOINT_FILE}"),
            &cfg_r.checkpoint(outcome.params.clone()).to_bytes(),
        )?;
        run.write_with(&format!("{prefix}history.csv"), |w| write_history(w, &outcome.history))?;
        run.write(&format!("{prefix}config.txt"), cfg_r.to_text().as_bytes())?;
        let test_m = if has_test && a.repeat > 1 {
            let m = evaluate(&model, &outcome.params, &test, &[20])?.metrics[0];
            Some((m.hr, m.mrr, m.ndcg))
        } else {
            None
        };
        let val = outcome
            .history
            .iter()
            .find(|h| h.epoch == outcome.best_epoch)
            .and_then(|h| h.val);
        eprintln!(
            "train: run {} of {}, {} epochs, best epoch {}{}",
            r + 1,
            a.repeat,
            outcome.history.len(),
            outcome.best_epoch,
            val.map_or_else(String::new, |v| format!(", val MRR@20 {:.4}", v.1))
        );
        summaries.push(RunSummary {
            seed: cfg_r.seed,
            best_epoch: outcome.best_epoch,
            val,
            test: test_m,
        });
    }

    if a.repeat > 1 {
        run.write_with("repeat.csv", |w| {
            use std::io::Write;
            writeln!(
                w,
                "run,seed,best_epoch,val_hr20,val_mrr20,val_ndcg20,test_hr20,test_mrr20,test_ndcg20"
            )?;
            for (i, s) in summaries.iter().enumerate() {
                writeln!(
                    w,
                    "{},{},{},{},{}",
                    i + 1,
                    s.seed,
                    s.best_epoch,
                    fmt_triplet(s.val),
                    fmt_triplet(s.test)
                )?;
            }
            Ok(())
        })?;
        run.write_with("repeat_summary.txt", |w| {
            use std::io::Write;
            writeln!(w, "runs = {}", summaries.len())?;
            let columns: [SummaryColumn; 6] = [
                ("val_hr20", |s| s.val.map(|v| v.0)),
                ("val_mrr20", |s| s.val.map(|v| v.1)),
                ("val_ndcg20", |s| s.val.map(|v| v.2)),
                ("test_hr20", |s| s.test.map(|v| v.0)),
                ("test_mrr20", |s| s.test.map(|v| v.1)),
                ("test_ndcg20", |s| s.test.map(|v| v.2)),
            ];
            for (name, get) in columns {
                let values: Option<Vec<f64>> = summaries.iter().map(get).collect();
                if let Some(values) = values {
                    let (mean, std) = mean_std(&values);
                    writeln!(w, "{name} = {mean} ± {std}")?;
                }
            }
            Ok(())
        })?;
    }
    run.finish()?;
    Ok(())
}

struct Loaded {
    model: Cgsr,
    params: Parameters,
    cfg: TrainConfig,
    data: Data,
}

fn load_model(run: &mut Run, checkpoint: &Path, data_dir: &Path) -> Result<Loaded> {
    let bytes = run.read(checkpoint)?;
    let ck = Checkpoint::read(&bytes[..]).with_context(|| format!("in {}", checkpoint.display()))?;
    let cfg = TrainConfig::from_checkpoint(&ck)?;
    let data = load_data(run, data_dir)?;
    ensure!(
        ck.params.layout.n_items == data.vocab.len(),
        "checkpoint covers {} items but {} lists {}",
        ck.params.layout.n_items,
        data_dir.join(VOCAB_FILE).display(),
        data.vocab.len()
    );
    let graphs = GraphSet::build(&data.train, data.vocab.len(), cfg.causal)?;
    let model = Cgsr::new(cfg.model.clone(), &graphs)?;
    Ok(Loaded {
        model,
        params: ck.params,
        cfg,
        data,
    })
}

fn checkpoint_only(global: &GlobalArgs, command: &str) -> Result<()> {
    reject_model_flags(global, command, "model settings come from the checkpoint")?;
    if global.seed.is_some() {
        return Err(UsageError(format!(
            "--seed has no effect on `{command}`: the checkpoint records its seed"
        ))
        .into());
    }
    Ok(())
}

pub fn eval(global: &GlobalArgs, a: EvalArgs) -> Result<()> {
    checkpoint_only(global, "eval")?;
    ensure!(a.k.iter().all(|&k| k > 0), "--k values must be >= 1");
    let mut run = Run::new("eval", 0, &a.out, &global.expect_digest)?;
    let m = load_model(&mut run, &a.checkpoint, &a.data)?;
    let mut run = run.with_seed(m.cfg.seed);
    run.set_config(m.cfg.to_key_values());
    let path = a.sessions.unwrap_or_else(|| a.data.join(TEST_FILE));
    let sessions = load_sessions(&mut run, &path, m.data.vocab.len())?;
    let result = evaluate(&m.model, &m.params, &sessions, &a.k)?;
    run.write_with("metrics.csv", |w| result.write_csv(w))?;
    run.write_with("summary.txt", |w| result.write_summary(w))?;
    run.finish()?;
    for x in &result.metrics {
        eprintln!(
            "eval: HR@{k} {:.4}  MRR@{k} {:.4}  NDCG@{k} {:.4}",
            x.hr,
            x.mrr,
            x.ndcg,
            k = x.k
        );
    }
    Ok(())
}

pub fn explain(global: &GlobalArgs, a: ExplainArgs) -> Result<()> {
    checkpoint_only(global, "explain")?;
    let mut run = Run::new("explain", 0, &a.out, &global.expect_digest)?;
    let m = load_model(&mut run, &a.checkpoint, &a.data)?;
    let mut run = run.with_seed(m.cfg.seed);
    run.set_config(m.cfg.to_key_values());
    let path = a.sessions.unwrap_or_else(|| a.data.join(TEST_FILE));
    let sessions = load_sessions(&mut run, &path, m.data.vocab.len())?;
    let vocab = &m.data.vocab;
    let fixed: Vec<usize> = a
        .item
        .iter()
        .map(|id| {
            vocab
                .index_of(id)
                .with_context(|| format!("item {id:?} is not in the vocabulary"))
        })
        .collect::<Result<_>>()?;
    let encoded = m.model.encode_items(&m.params)?;
    let mut count = 0;
    for s in sessions.iter().filter(|s| !s.items.is_empty()) {
        let targets: Vec<usize> = match a.top {
            Some(k) => m
                .model
                .recommend(&m.params, &encoded, &s.items, k as usize)?
                .into_iter()
                .map(|(i, _)| i)
                .collect(),
            None => fixed.clone(),
        };
        for item in targets {
            let report = explain_item(&m.model, &m.params, &encoded, s, item)?;
            let name = report.file_name(Some(vocab));
            run.write_with(&name, |w| report.write_text(w, Some(vocab)))?;
            count += 1;
        }
    }
    run.finish()?;
    eprintln!("explain: {count} reports");
    Ok(())
}
