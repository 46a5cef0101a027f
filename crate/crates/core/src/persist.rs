//! On-disk formats. Every file starts with a header line naming its kind and
//! format version and carrying the SHA-256 of the body, so truncated, edited
//! or foreign files fail to load instead of being misread.
//!
//! Floats are written in Rust's shortest round-trip notation, so
//! `load(persist(x)) == x` bit for bit.

use crate::error::{Error, Result};
use crate::metrics::{MetricsReport, SnapshotStore};
use crate::model::{DenoiserModel, LoraAdapter, ModelConfig};
use crate::regularizers::{DegeneracyRecord, FisherState};
use crate::workflow::{EventLog, Phase, RunOutput};
use crate::Tensor;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::Path;

pub const FORMAT_VERSION: u32 = 1;

fn digest(body: &str) -> String {
    Sha256::digest(body.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
}

/// Prepends the header line for `kind`.
pub fn seal(kind: &str, body: &str) -> String {
    format!("# dclab {kind} v{FORMAT_VERSION} sha256={}\n{body}", digest(body))
}

/// Verifies the header line and returns the body.
pub fn unseal<'a>(kind: &str, text: &'a str) -> Result<&'a str> {
    let (header, body) = text.split_once('\n').ok_or_else(|| Error::Load(format!("{kind}: missing header")))?;
    let expected = format!("# dclab {kind} v");
    let rest = header
        .strip_prefix(&expected)
        .ok_or_else(|| Error::Load(format!("{kind}: unrecognized header {header:?}")))?;
    let (version, sum) = rest
        .split_once(" sha256=")
        .ok_or_else(|| Error::Load(format!("{kind}: malformed header {header:?}")))?;
    if version != FORMAT_VERSION.to_string() {
        return Err(Error::Load(format!("{kind}: unsupported version {version:?} (expected {FORMAT_VERSION})")));
    }
    if sum != digest(body) {
        return Err(Error::Load(format!("{kind}: checksum mismatch, file is corrupt")));
    }
    Ok(body)
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, text)?;
    Ok(())
}

fn parse<T: std::str::FromStr>(field: &str, what: &str) -> Result<T> {
    field.parse().map_err(|_| Error::Load(format!("cannot parse {what} from {field:?}")))
}

pub const SNAPSHOT_COLUMNS: &str = "task_id,concept_id,x0,x1,snapshot_task";

/// Snapshot CSV: one row per point. Target sets are stored with
/// `snapshot_task = 0`; generated sets `X_{i,j}` with `snapshot_task = i`.
pub fn snapshots_to_csv(store: &SnapshotStore) -> String {
    let d = store.dim;
    let coords: Vec<String> = (0..d).map(|k| format!("x{k}")).collect();
    let mut body = format!("task_id,concept_id,{},snapshot_task\n", coords.join(","));
    let mut row = |task: usize, concept: usize, points: &[f64]| {
        for p in points.chunks(d) {
            let xs: Vec<String> = p.iter().map(|v| format!("{v:?}")).collect();
            body.push_str(&format!("{concept},{concept},{},{task}\n", xs.join(",")));
        }
    };
    for (&j, points) in &store.targets {
        row(0, j, points);
    }
    for (&(i, j), points) in &store.cells {
        row(i, j, points);
    }
    seal("snapshots", &body)
}

pub fn snapshots_from_csv(text: &str) -> Result<SnapshotStore> {
    let body = unseal("snapshots", text)?;
    let mut lines = body.lines();
    let header = lines.next().ok_or_else(|| Error::Load("snapshots: missing column header".into()))?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.len() < 4 || cols[..2] != ["task_id", "concept_id"] || cols.last() != Some(&"snapshot_task") {
        return Err(Error::Load(format!("snapshots: unexpected columns {header:?}")));
    }
    let d = cols.len() - 3;
    let mut store = SnapshotStore::new(d);
    for line in lines.filter(|l| !l.is_empty()) {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != d + 3 {
            return Err(Error::Load(format!("snapshots: bad row {line:?}")));
        }
        let j: usize = parse(f[1], "concept id")?;
        let i: usize = parse(f[d + 2], "snapshot task")?;
        let pts = if i == 0 { store.targets.entry(j).or_default() } else { store.cells.entry((i, j)).or_default() };
        for v in &f[2..d + 2] {
            pts.push(parse(v, "coordinate")?);
        }
    }
    Ok(store)
}

/// Event log CSV; named scalars are packed as `name=value;name=value`.
pub fn events_to_csv(log: &EventLog) -> String {
    let mut body = String::from("task,phase,iteration,values\n");
    for e in &log.events {
        let vals: Vec<String> = e.values.iter().map(|(k, v)| format!("{k}={v:?}")).collect();
        body.push_str(&format!("{},{},{},{}\n", e.task, e.phase, e.iteration, vals.join(";")));
    }
    seal("events", &body)
}

pub fn events_from_csv(text: &str) -> Result<EventLog> {
    let body = unseal("events", text)?;
    let mut lines = body.lines();
    if lines.next() != Some("task,phase,iteration,values") {
        return Err(Error::Load("events: unexpected columns".into()));
    }
    let mut log = EventLog::default();
    for line in lines.filter(|l| !l.is_empty()) {
        let f: Vec<&str> = line.splitn(4, ',').collect();
        if f.len() != 4 {
            return Err(Error::Load(format!("events: bad row {line:?}")));
        }
        let mut values = Vec::new();
        for kv in f[3].split(';').filter(|s| !s.is_empty()) {
            let (k, v) = kv.split_once('=').ok_or_else(|| Error::Load(format!("events: bad value {kv:?}")))?;
            values.push((k.to_string(), parse(v, "event value")?));
        }
        log.events.push(crate::workflow::Event {
            task: parse(f[0], "task")?,
            phase: f[1].parse::<Phase>()?,
            iteration: parse(f[2], "iteration")?,
            values,
        });
    }
    Ok(log)
}

/// C-LoRA trace CSV: `iteration,task,forget,norm_1,...`.
pub fn degeneracy_to_csv(records: &[DegeneracyRecord]) -> String {
    let width = records.iter().map(|r| r.norms.len()).max().unwrap_or(0);
    let norms: Vec<String> = (1..=width).map(|i| format!("norm_{i}")).collect();
    let mut body = format!("iteration,task,forget{}{}\n", if width > 0 { "," } else { "" }, norms.join(","));
    for r in records {
        let mut cells: Vec<String> = vec![r.iteration.to_string(), r.task.to_string(), format!("{:?}", r.forget)];
        cells.extend((0..width).map(|i| r.norms.get(i).map(|v| format!("{v:?}")).unwrap_or_default()));
        body.push_str(&cells.join(","));
        body.push('\n');
    }
    seal("degeneracy", &body)
}

pub fn degeneracy_from_csv(text: &str) -> Result<Vec<DegeneracyRecord>> {
    let body = unseal("degeneracy", text)?;
    let mut out = Vec::new();
    for line in body.lines().skip(1).filter(|l| !l.is_empty()) {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() < 3 {
            return Err(Error::Load(format!("degeneracy: bad row {line:?}")));
        }
        out.push(DegeneracyRecord {
            iteration: parse(f[0], "iteration")?,
            task: parse(f[1], "task")?,
            forget: parse(f[2], "forget")?,
            norms: f[3..].iter().filter(|s| !s.is_empty()).map(|s| parse(s, "norm")).collect::<Result<_>>()?,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct StoredTensor {
    shape: Vec<usize>,
    values: Vec<f64>,
}

impl StoredTensor {
    fn of(t: &Tensor) -> Self {
        Self { shape: t.shape().to_vec(), values: t.values().to_vec() }
    }

    fn tensor(&self) -> Result<Tensor> {
        Tensor::new(self.shape.clone(), self.values.clone()).map_err(|e| Error::Load(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct StoredAdapter {
    prefix: String,
    task_id: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Checkpoint {
    config: ModelConfig,
    frozen_rows: Vec<bool>,
    adapters: Vec<StoredAdapter>,
    params: BTreeMap<String, StoredTensor>,
}

/// Model checkpoint: a flat `{name → shape + values}` map in JSON.
pub fn model_to_json(model: &DenoiserModel) -> Result<String> {
    let ck = Checkpoint {
        config: model.config,
        frozen_rows: model.embedding.frozen.clone(),
        adapters: model.adapters.iter().map(|a| StoredAdapter { prefix: a.prefix.clone(), task_id: a.task_id }).collect(),
        params: model.params().iter().map(|p| (p.name.clone(), StoredTensor::of(&p.tensor))).collect(),
    };
    Ok(seal("checkpoint", &serde_json::to_string(&ck)?))
}

pub fn model_from_json(text: &str) -> Result<DenoiserModel> {
    let body = unseal("checkpoint", text)?;
    let ck: Checkpoint = serde_json::from_str(body).map_err(|e| Error::Load(format!("checkpoint: {e}")))?;
    let take = |name: &str| -> Result<Tensor> {
        ck.params.get(name).ok_or_else(|| Error::Load(format!("checkpoint lacks {name}")))?.tensor()
    };
    let mut model = DenoiserModel::zeros(ck.config, ck.frozen_rows.len().saturating_sub(1));
    for (i, &frozen) in ck.frozen_rows.iter().enumerate() {
        if frozen {
            model.embedding.freeze(i);
        }
    }
    for a in &ck.adapters {
        let pair = |role: &str| -> Result<(Tensor, Tensor)> {
            Ok((take(&format!("{}.{role}.a", a.prefix))?, take(&format!("{}.{role}.b", a.prefix))?))
        };
        let adapter = LoraAdapter::from_factors(&a.prefix, a.task_id, pair("key")?, pair("value")?)?;
        model.adapters.push(adapter);
    }
    for p in model.params_mut() {
        let t = take(&p.name)?;
        if t.shape() != p.tensor.shape() {
            return Err(Error::Load(format!("checkpoint shape mismatch for {}", p.name)));
        }
        p.tensor.values_mut().copy_from_slice(t.values());
    }
    let expected = model.params().len();
    if ck.params.len() != expected {
        return Err(Error::Load(format!("checkpoint has {} tensors, model needs {expected}", ck.params.len())));
    }
    model.set_trainable(|_| false);
    Ok(model)
}

pub fn fisher_to_json(state: &FisherState) -> Result<String> {
    Ok(seal("fisher", &serde_json::to_string(state)?))
}

pub fn fisher_from_json(text: &str) -> Result<FisherState> {
    let body = unseal("fisher", text)?;
    serde_json::from_str(body).map_err(|e| Error::Load(format!("fisher: {e}")))
}

pub fn save(path: &Path, text: &str) -> Result<()> {
    write(path, text)
}

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const FISHER_FILE: &str = "fisher.json";
pub const SNAPSHOT_FILE: &str = "snapshots.csv";
pub const EVENT_FILE: &str = "events.csv";
pub const DEGENERACY_FILE: &str = "degeneracy.csv";
pub const METRICS_FILE: &str = "metrics.csv";
pub const TIMINGS_FILE: &str = "timings.json";

/// Writes every artifact of one seed's run into `dir`.
pub fn write_seed(dir: &Path, out: &RunOutput) -> Result<()> {
    save(&dir.join(CHECKPOINT_FILE), &model_to_json(&out.model)?)?;
    if let Some(f) = &out.fisher {
        save(&dir.join(FISHER_FILE), &fisher_to_json(f)?)?;
    }
    save(&dir.join(SNAPSHOT_FILE), &snapshots_to_csv(&out.store))?;
    save(&dir.join(EVENT_FILE), &events_to_csv(&out.log))?;
    if !out.degeneracy.is_empty() {
        save(&dir.join(DEGENERACY_FILE), &degeneracy_to_csv(&out.degeneracy))?;
    }
    save(&dir.join(METRICS_FILE), &out.report.to_csv())?;
    save(&dir.join(TIMINGS_FILE), &serde_json::to_string_pretty(&out.timings)?)
}

/// The reproducible artifacts of one seed's run, as read back from disk.
#[derive(Debug, Clone, PartialEq)]
pub struct SeedArtifacts {
    pub store: SnapshotStore,
    pub log: EventLog,
    pub report: MetricsReport,
    pub degeneracy: Vec<DegeneracyRecord>,
}

pub fn read_seed(dir: &Path) -> Result<SeedArtifacts> {
    let degeneracy_path = dir.join(DEGENERACY_FILE);
    Ok(SeedArtifacts {
        store: snapshots_from_csv(&load(&dir.join(SNAPSHOT_FILE))?)?,
        log: events_from_csv(&load(&dir.join(EVENT_FILE))?)?,
        report: MetricsReport::from_csv(&load(&dir.join(METRICS_FILE))?)?,
        degeneracy: if degeneracy_path.exists() { degeneracy_from_csv(&load(&degeneracy_path)?)? } else { Vec::new() },
    })
}

pub fn load(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::Load(format!("{}: {e}", path.display())))
}
