use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn cgsr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cgsr"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = cgsr(args);
    assert!(
        out.status.success(),
        "cgsr {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Items 1..5 in three sessions whose effect weights are known by hand.
const WORKED_EXAMPLE: &str = "\
s1\t10\t1
s1\t11\t2
s1\t12\t3
s1\t13\t5
s1\t14\t4
s2\t20\t2
s2\t21\t3
s2\t22\t5
s3\t30\t1
s3\t31\t3
s3\t32\t2
";

/// A larger log: 60 sessions walking short paths over 12 items.
fn synthetic_log() -> String {
    let mut out = String::new();
    for s in 0..60u32 {
        let start = (s * 7) % 12;
        let len = 3 + (s % 4);
        for k in 0..len {
            let item = (start + k * (1 + s % 3)) % 12;
            out.push_str(&format!("u{s}\t{}\titem{item}\n", 1000 * s + k));
        }
    }
    out
}

fn prep_dir(log: &str, dir: &Path, extra: &[&str]) {
    let log_path = dir.join("log.tsv");
    fs::write(&log_path, log).unwrap();
    let data = dir.join("data");
    let mut args = vec!["prep", "--in", p(&log_path), "--out", p(&data)];
    args.extend_from_slice(extra);
    ok(&args);
}

const TINY: &[&str] = &[
    "--set",
    "dim=4",
    "--set",
    "heads=2",
    "--set",
    "batch_size=8",
    "--epochs",
    "2",
];

#[test]
fn eval_without_checkpoint_is_a_usage_error() {
    let out = cgsr(&["eval", "--data", "d", "--out", "o"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--checkpoint"));
}

#[test]
fn contradictory_flags_are_usage_errors() {
    let both = cgsr(&[
        "explain",
        "--checkpoint",
        "c",
        "--data",
        "d",
        "--out",
        "o",
        "--item",
        "x",
        "--top",
        "3",
    ]);
    assert_eq!(both.status.code(), Some(2));
    let preset = cgsr(&[
        "--preset",
        "amazon",
        "eval",
        "--checkpoint",
        "c",
        "--data",
        "d",
        "--out",
        "o",
    ]);
    assert_eq!(preset.status.code(), Some(2));
    let unknown = cgsr(&["--preset", "movielens", "train", "--data", "d", "--out", "o"]);
    assert_eq!(unknown.status.code(), Some(2));
}

#[test]
fn prep_writes_sessions_vocabulary_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    prep_dir(
        &synthetic_log(),
        dir.path(),
        &["--split", "last:0.2", "--min-item-freq", "1"],
    );
    let data = dir.path().join("data");
    let train = fs::read_to_string(data.join("train.sessions")).unwrap();
    let test = fs::read_to_string(data.join("test.sessions")).unwrap();
    assert_eq!(train.lines().count(), 48);
    assert_eq!(test.lines().count(), 12);
    assert!(train.starts_with("u0\t0,1,2\n"), "{train}");

    let m: Value = serde_json::from_str(&fs::read_to_string(data.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["command"], "prep");
    assert_eq!(m["seed"], 42);
    let recorded = m["outputs"]["train.sessions"].as_str().unwrap();
    assert_eq!(recorded.len(), 64);
    let inputs = m["inputs"].as_object().unwrap();
    assert_eq!(inputs.len(), 1);
    assert!(m["wall_time_secs"].as_f64().is_some());
    // no stray temporary files
    let mut names: Vec<String> = fs::read_dir(&data)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert_eq!(names, ["manifest.json", "test.sessions", "train.sessions", "vocab.tsv"]);
}

#[test]
fn worked_example_graph_export() {
    let dir = tempfile::tempdir().unwrap();
    prep_dir(
        WORKED_EXAMPLE,
        dir.path(),
        &["--split", "last:0", "--min-item-freq", "1"],
    );
    let out = dir.path().join("graphs");
    ok(&["graphs", "--data", p(&dir.path().join("data")), "--out", p(&out)]);
    let effect = fs::read_to_string(out.join("effect.csv")).unwrap();
    let lines: Vec<&str> = effect.lines().collect();
    assert_eq!(lines[0], "src,dst,weight");
    for row in [
        "1,2,0.500000000000",
        "1,3,0.500000000000",
        "2,3,0.500000000000",
        "3,2,0.00000000000",
        "3,5,0.666666666667",
        "5,4,1.00000000000",
    ] {
        assert!(lines.contains(&row), "missing {row} in\n{effect}");
    }
    assert_eq!(lines.len(), 7);
    let cause = fs::read_to_string(out.join("cause.csv")).unwrap();
    assert!(cause.contains("\n5,3,0.666666666667\n"));
    let corr = fs::read_to_string(out.join("correlation.csv")).unwrap();
    assert!(corr.starts_with("a,b,w1,chain,fork,collider\n"));
    assert!(corr.contains("\n2,3,1.20000000000,"), "{corr}");
    assert!(fs::read_to_string(out.join("session.csv"))
        .unwrap()
        .starts_with("src,dst,count\n"));

    let ablated = dir.path().join("graphs-cc");
    ok(&[
        "graphs",
        "--data",
        p(&dir.path().join("data")),
        "--out",
        p(&ablated),
        "--config",
        p(&write_config(dir.path(), "keep_common_cause = true\n")),
    ]);
    let effect = fs::read_to_string(ablated.join("effect.csv")).unwrap();
    assert!(effect.contains("\n3,2,0.333333333333\n"), "{effect}");
}

fn write_config(dir: &Path, text: &str) -> std::path::PathBuf {
    let path = dir.join("run.conf");
    fs::write(&path, text).unwrap();
    path
}

#[test]
fn stats_grid_and_boundaries() {
    let dir = tempfile::tempdir().unwrap();
    prep_dir(
        &synthetic_log(),
        dir.path(),
        &["--split", "last:0", "--min-item-freq", "1"],
    );
    let out = dir.path().join("stats");
    ok(&[
        "stats",
        "--data",
        p(&dir.path().join("data")),
        "--out",
        p(&out),
        "--epsilon",
        "0.2",
    ]);
    let grid = fs::read_to_string(out.join("grid.csv")).unwrap();
    let rows: Vec<Vec<u64>> = grid
        .lines()
        .map(|l| l.split(',').map(|c| c.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 10);
    assert!(rows.iter().all(|r| r.len() == 10));
    let total: u64 = rows.iter().flatten().sum();
    let bounds = fs::read_to_string(out.join("grid_boundaries.csv")).unwrap();
    assert!(bounds.contains(&format!("# pairs = {total}\n")), "{bounds}");
    assert!(bounds.contains("# epsilon = 0.2\n"));
}

#[test]
fn train_eval_explain_pipeline_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    prep_dir(
        &synthetic_log(),
        dir.path(),
        &["--split", "last:0.2", "--min-item-freq", "1"],
    );
    let data = dir.path().join("data");
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let mut args = vec!["--threads", "1", "train", "--data", p(&data), "--out", p(&a)];
    args.extend_from_slice(TINY);
    ok(&args);
    let mut args = vec!["--threads", "3", "train", "--data", p(&data), "--out", p(&b)];
    args.extend_from_slice(TINY);
    ok(&args);
    for f in ["checkpoint.cgsr", "history.csv", "config.txt"] {
        assert_eq!(
            fs::read(a.join(f)).unwrap(),
            fs::read(b.join(f)).unwrap(),
            "{f} differs"
        );
    }
    let history = fs::read_to_string(a.join("history.csv")).unwrap();
    assert_eq!(history.lines().count(), 3);
    assert!(fs::read_to_string(a.join("config.txt")).unwrap().contains("dim = 4\n"));

    let ck = a.join("checkpoint.cgsr");
    let ev = dir.path().join("eval");
    ok(&[
        "eval",
        "--checkpoint",
        p(&ck),
        "--data",
        p(&data),
        "--out",
        p(&ev),
        "--k",
        "1,20",
    ]);
    let metrics = fs::read_to_string(ev.join("metrics.csv")).unwrap();
    let lines: Vec<&str> = metrics.lines().collect();
    assert_eq!(lines[0], "metric,K,value");
    assert_eq!(lines.len(), 7);
    assert!(lines[1].starts_with("HR,1,"));
    assert!(fs::read_to_string(ev.join("summary.txt"))
        .unwrap()
        .starts_with("samples = "));
    let ev2 = dir.path().join("eval2");
    ok(&[
        "eval",
        "--checkpoint",
        p(&ck),
        "--data",
        p(&data),
        "--out",
        p(&ev2),
        "--k",
        "1,20",
    ]);
    assert_eq!(
        fs::read(ev.join("metrics.csv")).unwrap(),
        fs::read(ev2.join("metrics.csv")).unwrap()
    );

    let ex = dir.path().join("explain");
    ok(&[
        "explain",
        "--checkpoint",
        p(&ck),
        "--data",
        p(&data),
        "--out",
        p(&ex),
        "--top",
        "2",
    ]);
    let test_sessions = fs::read_to_string(data.join("test.sessions")).unwrap();
    let first_id = test_sessions.lines().next().unwrap().split('\t').next().unwrap();
    let reports: Vec<String> = fs::read_dir(&ex)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n.ends_with(".txt"))
        .collect();
    assert_eq!(reports.len(), 2 * test_sessions.lines().count());
    assert!(reports.iter().any(|n| n.starts_with(&format!("{first_id}__item"))));

    let ex2 = dir.path().join("explain-one");
    ok(&[
        "explain",
        "--checkpoint",
        p(&ck),
        "--data",
        p(&data),
        "--out",
        p(&ex2),
        "--item",
        "item3",
    ]);
    let report = fs::read_to_string(ex2.join(format!("{first_id}__item3.txt"))).unwrap();
    assert!(report.contains("item = item3\n"));
    assert!(report.contains("position,item,score_ca,rank_ca,score_r,rank_r\n"));

    let missing = cgsr(&[
        "explain",
        "--checkpoint",
        p(&ck),
        "--data",
        p(&data),
        "--out",
        p(&ex2),
        "--item",
        "nope",
    ]);
    assert_eq!(missing.status.code(), Some(1));
}

#[test]
fn repeated_runs_report_mean_and_spread() {
    let dir = tempfile::tempdir().unwrap();
    prep_dir(
        &synthetic_log(),
        dir.path(),
        &["--split", "last:0.2", "--min-item-freq", "1"],
    );
    let out = dir.path().join("rep");
    let data = dir.path().join("data");
    let mut args = vec![
        "--seed",
        "5",
        "train",
        "--data",
        p(&data),
        "--out",
        p(&out),
        "--repeat",
        "2",
    ];
    args.extend_from_slice(TINY);
    ok(&args);
    let table = fs::read_to_string(out.join("repeat.csv")).unwrap();
    let rows: Vec<&str> = table.lines().collect();
    assert_eq!(rows.len(), 3);
    assert!(rows[1].starts_with("1,5,") && rows[2].starts_with("2,6,"), "{table}");
    let summary = fs::read_to_string(out.join("repeat_summary.txt")).unwrap();
    assert!(summary.starts_with("runs = 2\n"));
    assert!(summary.contains("test_mrr20 = ") && summary.contains(" ± "));
    assert!(out.join("run-2/checkpoint.cgsr").exists());
}

#[test]
fn digest_expectations() {
    let dir = tempfile::tempdir().unwrap();
    prep_dir(
        WORKED_EXAMPLE,
        dir.path(),
        &["--split", "last:0", "--min-item-freq", "1"],
    );
    let data = dir.path().join("data");
    let manifest = data.join("manifest.json");
    let out = dir.path().join("g");
    ok(&[
        "graphs",
        "--data",
        p(&data),
        "--out",
        p(&out),
        "--expect-digest",
        p(&manifest),
    ]);

    let m: Value = serde_json::from_str(&fs::read_to_string(&manifest).unwrap()).unwrap();
    let vocab_digest = m["outputs"]["vocab.tsv"].as_str().unwrap();
    let spec = format!("{}={vocab_digest}", data.join("vocab.tsv").display());
    ok(&["graphs", "--data", p(&data), "--out", p(&out), "--expect-digest", &spec]);

    fs::write(data.join("train.sessions"), "s1\t0,1\n").unwrap();
    let bad = cgsr(&[
        "graphs",
        "--data",
        p(&data),
        "--out",
        p(&out),
        "--expect-digest",
        p(&manifest),
    ]);
    assert_eq!(bad.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("changed since its manifest"));

    let wrong = format!("{}={}", data.join("vocab.tsv").display(), "0".repeat(64));
    let bad = cgsr(&[
        "graphs",
        "--data",
        p(&data),
        "--out",
        p(&out),
        "--expect-digest",
        &wrong,
    ]);
    assert!(String::from_utf8_lossy(&bad.stderr).contains("digest mismatch"));
}

#[test]
fn config_file_and_flags_layer() {
    let dir = tempfile::tempdir().unwrap();
    prep_dir(
        &synthetic_log(),
        dir.path(),
        &["--split", "last:0.2", "--min-item-freq", "1"],
    );
    let conf = write_config(
        dir.path(),
        "# small\nseed = 9\nheads = 1\nlearning_rate = 0.5\nepochs = 1\n",
    );
    let out = dir.path().join("t");
    ok(&[
        "--config",
        p(&conf),
        "--preset",
        "gowalla",
        "train",
        "--data",
        p(&dir.path().join("data")),
        "--out",
        p(&out),
        "--set",
        "dim=3",
    ]);
    let cfg = fs::read_to_string(out.join("config.txt")).unwrap();
    // the preset overrides the file, explicit flags override both
    for line in [
        "seed = 9\n",
        "heads = 1\n",
        "learning_rate = 0.001\n",
        "batch_size = 40\n",
        "dim = 3\n",
    ] {
        assert!(cfg.contains(line), "{line:?} missing from\n{cfg}");
    }
    let m: Value = serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["seed"], 9);
    assert_eq!(m["config"]["dim"], "3");

    let bad = write_config(
        dir.path(),
        "disable_causality = true\ndisable_correlation = true\ndisable_preference = true\n",
    );
    let r = cgsr(&[
        "--config",
        p(&bad),
        "train",
        "--data",
        p(&dir.path().join("data")),
        "--out",
        p(&out),
    ]);
    assert_eq!(r.status.code(), Some(1));
}
