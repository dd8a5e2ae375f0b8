//! Atomic file output, content digests and the per-run manifest.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MANIFEST: &str = "manifest.json";

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes `bytes` next to `path` under a temporary name, then renames it into
/// place so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let name = path
        .file_name()
        .context("output path has no file name")?
        .to_string_lossy();
    let tmp = dir.join(format!(".{name}.tmp-{}", std::process::id()));
    let result = (|| -> io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp);
        return Err(e).with_context(|| format!("writing {}", path.display()));
    }
    Ok(())
}

/// Everything a command read and wrote, plus enough context to rerun it.
#[derive(Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub config: BTreeMap<String, String>,
    /// Input path → sha256 of its contents.
    pub inputs: BTreeMap<String, String>,
    /// Output file name (relative to the output directory) → sha256.
    pub outputs: BTreeMap<String, String>,
    pub started_unix: u64,
    pub wall_time_secs: f64,
}

/// Collects inputs and outputs of one command run.
pub struct Run {
    command: String,
    seed: u64,
    config: BTreeMap<String, String>,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
    expected: Vec<Expectation>,
    out_dir: PathBuf,
    started: Instant,
    started_unix: u64,
}

impl Run {
    pub fn new(command: &str, seed: u64, out_dir: &Path, expect: &[String]) -> Result<Self> {
        let expected = expect.iter().map(|e| Expectation::parse(e)).collect::<Result<_>>()?;
        Ok(Self {
            command: command.to_string(),
            seed,
            config: BTreeMap::new(),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            expected,
            out_dir: out_dir.to_path_buf(),
            started: Instant::now(),
            started_unix: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
        })
    }

    /// The seed is often known only after the config has been read.
    pub fn with_seed(self, seed: u64) -> Self {
        Self { seed, ..self }
    }

    pub fn set_config<K: Into<String>>(&mut self, entries: impl IntoIterator<Item = (K, String)>) {
        self.config.extend(entries.into_iter().map(|(k, v)| (k.into(), v)));
    }

    /// Reads an input file, records its digest and checks it against any
    /// `--expect-digest` given for it.
    pub fn read(&mut self, path: &Path) -> Result<Vec<u8>> {
        let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        let digest = sha256_hex(&bytes);
        for e in &self.expected {
            e.check(path, &digest)?;
        }
        self.inputs.insert(path.display().to_string(), digest);
        Ok(bytes)
    }

    pub fn read_text(&mut self, path: &Path) -> Result<String> {
        String::from_utf8(self.read(path)?).with_context(|| format!("{} is not UTF-8", path.display()))
    }

    /// Writes `name` (relative to the output directory) atomically.
    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        write_atomic(&self.out_dir.join(name), bytes)?;
        self.outputs.insert(name.to_string(), sha256_hex(bytes));
        Ok(())
    }

    pub fn write_with(&mut self, name: &str, f: impl FnOnce(&mut Vec<u8>) -> io::Result<()>) -> Result<()> {
        let mut buf = Vec::new();
        f(&mut buf).with_context(|| format!("rendering {name}"))?;
        self.write(name, &buf)
    }

    /// Fails if an `--expect-digest` named a file this run never read.
    fn check_all_expectations_used(&self) -> Result<()> {
        for e in &self.expected {
            if let Expectation::File { path, .. } = e {
                if !self.inputs.contains_key(&path.display().to_string()) {
                    bail!(
                        "--expect-digest names {}, which this command does not read",
                        path.display()
                    );
                }
            }
        }
        Ok(())
    }

    pub fn finish(self) -> Result<RunManifest> {
        self.check_all_expectations_used()?;
        let manifest = RunManifest {
            command: self.command,
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed: self.seed,
            config: self.config,
            inputs: self.inputs,
            outputs: self.outputs,
            started_unix: self.started_unix,
            wall_time_secs: self.started.elapsed().as_secs_f64(),
        };
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        write_atomic(&self.out_dir.join(MANIFEST), text.as_bytes())?;
        Ok(manifest)
    }
}

/// One `--expect-digest` argument: either `PATH=SHA256` for a single input,
/// or the path of an earlier manifest whose outputs are checked against any
/// input with the same file name in the same directory.
enum Expectation {
    File {
        path: PathBuf,
        digest: String,
    },
    Manifest {
        dir: PathBuf,
        outputs: BTreeMap<String, String>,
    },
}

impl Expectation {
    fn parse(arg: &str) -> Result<Self> {
        if let Some((path, digest)) = arg.rsplit_once('=') {
            let digest = digest.trim().to_ascii_lowercase();
            if digest.len() != 64 || !digest.chars().all(|c| c.is_ascii_hexdigit()) {
                bail!("--expect-digest {arg:?}: expected PATH=<64 hex digits>");
            }
            return Ok(Expectation::File {
                path: PathBuf::from(path),
                digest,
            });
        }
        let path = Path::new(arg);
        let text = fs::read_to_string(path).with_context(|| format!("reading manifest {arg}"))?;
        let m: RunManifest = serde_json::from_str(&text).with_context(|| format!("parsing manifest {arg}"))?;
        Ok(Expectation::Manifest {
            dir: path.parent().unwrap_or(Path::new("")).to_path_buf(),
            outputs: m.outputs,
        })
    }

    fn check(&self, input: &Path, actual: &str) -> Result<()> {
        match self {
            Expectation::File { path, digest } if path == input => {
                if digest != actual {
                    bail!(
                        "digest mismatch for {}: expected {digest}, found {actual}",
                        input.display()
                    );
                }
            }
            Expectation::Manifest { dir, outputs } => {
                let same_dir = input.parent().unwrap_or(Path::new("")) == dir.as_path();
                let recorded = input
                    .file_name()
                    .and_then(|n| outputs.get(n.to_string_lossy().as_ref()));
                if let (true, Some(digest)) = (same_dir, recorded) {
                    if digest != actual {
                        bail!(
                            "{} changed since its manifest was written: expected {digest}, found {actual}",
                            input.display()
                        );
                    }
                }
            }
            _ => {}
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn digest_of_empty_input() {
        assert_eq!(
            sha256_hex(b""),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
    }

    #[test]
    fn atomic_write_leaves_no_temp_files() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.txt");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(fs::read(&p).unwrap(), b"two");
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
    }

    #[test]
    fn malformed_expectation() {
        assert!(Expectation::parse("x=abc").is_err());
    }
}
