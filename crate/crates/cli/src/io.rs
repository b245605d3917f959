//! Artifact files: fixed-precision JSON, the JSON-lines dataset, manifests.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Component, Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context};
use dynacal_core::datagen::TransitionRecord;
use dynacal_core::{Action, JointState, PhysParams};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::ser::{CompactFormatter, Formatter};

/// Writes every float as `d.dddddddddddddddde±x` (17 significant digits).
#[derive(Debug, Clone, Copy, Default)]
pub struct Sig17;

impl Formatter for Sig17 {
    fn write_f64<W: ?Sized + Write>(&mut self, w: &mut W, v: f64) -> std::io::Result<()> {
        if v.is_finite() {
            write!(w, "{v:.16e}")
        } else {
            // serde_json's own behavior for non-finite values
            CompactFormatter.write_null(w)
        }
    }

    fn write_f32<W: ?Sized + Write>(&mut self, w: &mut W, v: f32) -> std::io::Result<()> {
        self.write_f64(w, v as f64)
    }
}

pub fn to_json_bytes<T: Serialize + ?Sized>(value: &T) -> anyhow::Result<Vec<u8>> {
    let mut buf = Vec::new();
    write_json_to(&mut buf, value)?;
    Ok(buf)
}

fn write_json_to<W: Write, T: Serialize + ?Sized>(w: W, value: &T) -> anyhow::Result<()> {
    let mut ser = serde_json::Serializer::with_formatter(w, Sig17);
    value.serialize(&mut ser)?;
    Ok(())
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut bytes = to_json_bytes(value)?;
    bytes.push(b'\n');
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> anyhow::Result<usize> {
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut w = BufWriter::new(file);
    let mut n = 0;
    for row in rows {
        write_json_to(&mut w, &row)?;
        w.write_all(b"\n")?;
        n += 1;
    }
    w.flush()?;
    Ok(n)
}

/// Blank lines are skipped; a bad line is reported by its 1-based number.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> anyhow::Result<Vec<T>> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.with_context(|| format!("{}:{}", path.display(), i + 1))?;
        if line.trim().is_empty() {
            continue;
        }
        let row = serde_json::from_str(&line).with_context(|| format!("{} line {}: malformed record", path.display(), i + 1))?;
        out.push(row);
    }
    Ok(out)
}

/// One dataset line. Field order is the on-disk key order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetLine {
    pub f: f64,
    pub p: f64,
    pub d: f64,
    pub state_q: Vec<f64>,
    pub state_qd: Vec<f64>,
    pub action: Vec<f64>,
    pub next_q: Vec<f64>,
    pub next_qd: Vec<f64>,
}

impl From<&TransitionRecord> for DatasetLine {
    fn from(r: &TransitionRecord) -> Self {
        Self {
            f: r.params.f,
            p: r.params.p,
            d: r.params.d,
            state_q: r.state.q.clone(),
            state_qd: r.state.qd.clone(),
            action: r.action.target_q.clone(),
            next_q: r.next_state.q.clone(),
            next_qd: r.next_state.qd.clone(),
        }
    }
}

impl DatasetLine {
    pub fn into_record(self) -> anyhow::Result<TransitionRecord> {
        let n = self.state_q.len();
        let lens = [self.state_qd.len(), self.action.len(), self.next_q.len(), self.next_qd.len()];
        if n == 0 || lens.iter().any(|&l| l != n) {
            bail!("joint vectors disagree in length: {n} vs {lens:?}");
        }
        Ok(TransitionRecord {
            params: PhysParams::new(self.f, self.p, self.d),
            state: JointState::new(self.state_q, self.state_qd),
            action: Action::new(self.action),
            next_state: JointState::new(self.next_q, self.next_qd),
        })
    }
}

pub fn read_dataset(path: &Path) -> anyhow::Result<Vec<TransitionRecord>> {
    let lines: Vec<DatasetLine> = read_jsonl(path)?;
    let records = lines
        .into_iter()
        .enumerate()
        .map(|(i, l)| l.into_record().with_context(|| format!("{} record {}", path.display(), i + 1)))
        .collect::<anyhow::Result<Vec<_>>>()?;
    if records.is_empty() {
        bail!("dataset {} is empty", path.display());
    }
    Ok(records)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    pub tool_version: String,
    /// Name -> path, relative to the output directory.
    pub artifacts: BTreeMap<String, String>,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub elapsed_seconds: f64,
}

impl RunManifest {
    pub fn new(command: &str, config_hash: String) -> Self {
        let now = unix_now();
        Self {
            command: command.to_string(),
            config_hash,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            artifacts: BTreeMap::new(),
            started_unix: now,
            finished_unix: now,
            elapsed_seconds: 0.0,
        }
    }

    pub fn add(&mut self, name: &str, file: &str) {
        self.artifacts.insert(name.to_string(), file.to_string());
    }

    pub fn finish(&mut self, elapsed_seconds: f64) {
        self.finished_unix = unix_now();
        self.elapsed_seconds = elapsed_seconds;
    }

    pub fn write(&self, path: &Path) -> anyhow::Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
    }
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

/// The only place commands write to.
#[derive(Debug, Clone)]
pub struct OutDir {
    root: PathBuf,
}

impl OutDir {
    pub fn create(root: &Path) -> anyhow::Result<Self> {
        fs::create_dir_all(root).with_context(|| format!("creating output dir {}", root.display()))?;
        Ok(Self { root: root.to_path_buf() })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// `name` must be a plain relative path that stays inside the directory.
    pub fn file(&self, name: &str) -> anyhow::Result<PathBuf> {
        let p = Path::new(name);
        if name.is_empty() || !p.components().all(|c| matches!(c, Component::Normal(_))) {
            bail!("output name {name:?} must stay inside the output directory");
        }
        Ok(self.root.join(p))
    }
}
