//! Files exchanged between pipeline commands.
//!
//! Floats are written with Rust's shortest round-trip formatting, so reading
//! an artifact back yields bit-identical values.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use hgp_core::gp_path_sampler::{worst_case_constraint, PathStatus, TrajectoryEnsemble};
use hgp_core::map_trainer::{MapSolution, TrainingData};
use hgp_core::Matrix;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::model::{Architecture, CONTROL_NAMES, STATE_NAMES};

pub const DATASET: &str = "dataset.csv";
pub const MODEL: &str = "model.json";
pub const CV_TABLE: &str = "cross_validation.csv";
pub const CV_SUMMARY: &str = "cv_summary.json";
pub const BACKOFF_TABLE: &str = "backoff_table.csv";
pub const BACKOFF_LOG: &str = "backoff_log.jsonl";
pub const BACKOFF_SUMMARY: &str = "backoff_summary.json";
pub const BACKOFF_ENSEMBLE: &str = "backoff_ensemble.csv";
pub const ROLLOUTS: &str = "plant_rollouts.csv";
pub const EVALUATE_SUMMARY: &str = "evaluate_summary.json";
pub const REPORT_DIR: &str = "report";

pub const STATE_UNITS: [&str; 4] = ["g/L", "mg/L", "mg/g", "mg/L"];
pub const CONTROL_UNITS: [&str; 2] = ["umol/m2/s", "mg/L/h"];

#[derive(Debug, thiserror::Error)]
pub enum ArtifactError {
    #[error("{path} not found; run `{command}` first")]
    Missing { path: String, command: &'static str },
    #[error("{path} is malformed: {reason}")]
    Malformed { path: String, reason: String },
    #[error("cannot write {path}: {source}")]
    Write { path: String, source: std::io::Error },
}

fn malformed(path: &Path, reason: impl ToString) -> ArtifactError {
    ArtifactError::Malformed { path: path.display().to_string(), reason: reason.to_string() }
}

/// Reads a prerequisite, naming the command that produces it when absent.
pub fn read_required(path: &Path, command: &'static str) -> Result<String, ArtifactError> {
    match fs::read_to_string(path) {
        Ok(s) => Ok(s),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Err(ArtifactError::Missing { path: path.display().to_string(), command }),
        Err(e) => Err(malformed(path, e)),
    }
}

pub fn write_text(path: &Path, text: &str) -> Result<(), ArtifactError> {
    let wrap = |source| ArtifactError::Write { path: path.display().to_string(), source };
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(wrap)?;
    }
    fs::write(path, text).map_err(wrap)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), ArtifactError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| malformed(path, e))?;
    text.push('\n');
    write_text(path, &text)
}

pub fn read_json<T: DeserializeOwned>(path: &Path, command: &'static str) -> Result<T, ArtifactError> {
    let text = read_required(path, command)?;
    serde_json::from_str(&text).map_err(|e| malformed(path, e))
}

/// Append-only JSON lines; the file is truncated when opened.
pub struct JsonLog {
    path: PathBuf,
    file: fs::File,
}

impl JsonLog {
    pub fn create(path: &Path) -> Result<Self, ArtifactError> {
        let wrap = |source| ArtifactError::Write { path: path.display().to_string(), source };
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(wrap)?;
        }
        Ok(Self { path: path.to_path_buf(), file: fs::File::create(path).map_err(wrap)? })
    }

    pub fn append<T: Serialize>(&mut self, value: &T) -> Result<(), ArtifactError> {
        let line = serde_json::to_string(value).map_err(|e| malformed(&self.path, e))?;
        writeln!(self.file, "{line}").and_then(|_| self.file.flush()).map_err(|source| ArtifactError::Write { path: self.path.display().to_string(), source })
    }
}

pub fn read_json_lines<T: DeserializeOwned>(path: &Path, command: &'static str) -> Result<Vec<T>, ArtifactError> {
    read_required(path, command)?.lines().filter(|l| !l.trim().is_empty()).map(|l| serde_json::from_str(l).map_err(|e| malformed(path, e))).collect()
}

fn csv_text(header: &[String], rows: impl Iterator<Item = Vec<String>>) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    for r in rows {
        w.write_record(&r).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 fields")
}

/// Header row and parsed records of a CSV file.
fn csv_rows(path: &Path, text: &str) -> Result<(Vec<String>, Vec<csv::StringRecord>), ArtifactError> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let header = r.headers().map_err(|e| malformed(path, e))?.iter().map(str::to_string).collect();
    let rows = r.records().collect::<Result<Vec<_>, _>>().map_err(|e| malformed(path, e))?;
    Ok((header, rows))
}

fn field<T: std::str::FromStr>(path: &Path, rec: &csv::StringRecord, i: usize) -> Result<T, ArtifactError> {
    rec.get(i).and_then(|s| s.trim().parse().ok()).ok_or_else(|| malformed(path, format!("line {}: bad field {}", rec.position().map_or(0, |p| p.line()), i + 1)))
}

fn fmt(v: f64) -> String {
    format!("{v}")
}

pub fn dataset_header() -> Vec<String> {
    let mut h = vec!["sobol_index".to_string()];
    h.extend(STATE_NAMES.iter().zip(STATE_UNITS).map(|(n, u)| format!("{n} [{u}]")));
    h.extend(CONTROL_NAMES.iter().zip(CONTROL_UNITS).map(|(n, u)| format!("{n} [{u}]")));
    h.extend(STATE_NAMES.iter().zip(STATE_UNITS).map(|(n, u)| format!("next_{n} [{u}]")));
    h
}

/// Design rows `(x, u)` with their noisy next-state measurements.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetFile {
    pub sobol_index: Vec<usize>,
    pub data: TrainingData,
}

impl DatasetFile {
    pub fn to_csv(&self) -> String {
        let z = &self.data.inputs_z;
        let y = &self.data.outputs_y;
        let rows = (0..z.rows()).map(|i| std::iter::once(self.sobol_index[i].to_string()).chain(z.row(i).iter().chain(y.row(i)).map(|&v| fmt(v))).collect());
        csv_text(&dataset_header(), rows)
    }

    pub fn read(path: &Path) -> Result<Self, ArtifactError> {
        let text = read_required(path, "gen-data")?;
        let (header, rows) = csv_rows(path, &text)?;
        if header != dataset_header() {
            return Err(malformed(path, "unexpected header"));
        }
        if rows.is_empty() {
            return Err(malformed(path, "no rows"));
        }
        let mut index = Vec::with_capacity(rows.len());
        let mut z = Matrix::zeros(rows.len(), 6);
        let mut y = Matrix::zeros(rows.len(), 4);
        for (i, r) in rows.iter().enumerate() {
            index.push(field(path, r, 0)?);
            for j in 0..6 {
                z[(i, j)] = field(path, r, 1 + j)?;
            }
            for j in 0..4 {
                y[(i, j)] = field(path, r, 7 + j)?;
            }
        }
        let data = TrainingData::new(z, y).map_err(|e| malformed(path, e))?;
        Ok(Self { sobol_index: index, data })
    }
}

/// Trained model: raw inputs, MAP solution and its normalization maps.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelArtifact {
    pub architecture: Architecture,
    pub seed: u64,
    pub data_fingerprint: u64,
    /// Raw design inputs Z, N × 6.
    pub inputs_z: Matrix,
    pub solution: MapSolution,
}

fn status_text(s: PathStatus) -> String {
    match s {
        PathStatus::Completed => "completed".into(),
        PathStatus::PolicyFailed(k) => format!("policy_failed@{k}"),
        PathStatus::StepFailed(k) => format!("step_failed@{k}"),
    }
}

fn parse_status(s: &str) -> Option<PathStatus> {
    if s == "completed" {
        return Some(PathStatus::Completed);
    }
    let (kind, k) = s.split_once('@')?;
    let k = k.parse().ok()?;
    match kind {
        "policy_failed" => Some(PathStatus::PolicyFailed(k)),
        "step_failed" => Some(PathStatus::StepFailed(k)),
        _ => None,
    }
}

pub const CONSTRAINT_NAMES: [&str; 3] = ["g1", "g2", "g3"];

fn trajectory_header() -> Vec<String> {
    ["policy", "sample", "step", "status"].iter().chain(STATE_NAMES.iter()).chain(CONTROL_NAMES.iter()).chain(CONSTRAINT_NAMES.iter()).map(|s| s.to_string()).collect()
}

/// Closed-loop trajectories of one or more policies, one row per (path, step).
///
/// Controls at the last step and entries after a failure are `NaN`.
pub fn trajectories_to_csv(groups: &[(&str, &TrajectoryEnsemble)]) -> String {
    let mut rows = Vec::new();
    for (name, ens) in groups {
        for s in 0..ens.len() {
            let states = &ens.states[s];
            for k in 0..states.rows() {
                let mut r = vec![name.to_string(), ens.seeds[s].to_string(), k.to_string(), status_text(ens.status[s])];
                r.extend(states.row(k).iter().map(|&v| fmt(v)));
                let u = &ens.controls[s];
                r.extend((0..u.cols()).map(|j| fmt(if k < u.rows() { u[(k, j)] } else { f64::NAN })));
                r.extend(ens.constraint_values[s].row(k).iter().map(|&v| fmt(v)));
                rows.push(r);
            }
        }
    }
    csv_text(&trajectory_header(), rows.into_iter())
}

/// Inverse of [`trajectories_to_csv`]; the worst-case values are recomputed.
pub fn read_trajectories(path: &Path, command: &'static str) -> Result<Vec<(String, TrajectoryEnsemble)>, ArtifactError> {
    let text = read_required(path, command)?;
    let (header, rows) = csv_rows(path, &text)?;
    if header != trajectory_header() {
        return Err(malformed(path, "unexpected header"));
    }
    struct Acc {
        name: String,
        ens: TrajectoryEnsemble,
        rows: Vec<[Vec<f64>; 3]>,
    }
    let mut groups: Vec<Acc> = Vec::new();
    let flush = |acc: &mut Acc| {
        if acc.rows.is_empty() {
            return;
        }
        let t1 = acc.rows.len();
        let x = Matrix::from_fn(t1, 4, |k, j| acc.rows[k][0][j]);
        let u = Matrix::from_fn(t1 - 1, 2, |k, j| acc.rows[k][1][j]);
        let g = Matrix::from_fn(t1, 3, |k, j| acc.rows[k][2][j]);
        let done = acc.ens.status.last().is_some_and(PathStatus::is_completed);
        acc.ens.worst_case.push(if done { worst_case_constraint(&g) } else { f64::INFINITY });
        acc.ens.states.push(x);
        acc.ens.controls.push(u);
        acc.ens.constraint_values.push(g);
        acc.rows.clear();
    };
    let empty = || TrajectoryEnsemble { states: vec![], controls: vec![], constraint_values: vec![], worst_case: vec![], seeds: vec![], status: vec![] };
    for r in &rows {
        let name = r.get(0).unwrap_or_default().to_string();
        let seed: u64 = field(path, r, 1)?;
        let step: usize = field(path, r, 2)?;
        let status = parse_status(r.get(3).unwrap_or_default()).ok_or_else(|| malformed(path, "bad status"))?;
        let vals = |from: usize, n: usize| (0..n).map(|j| field::<f64>(path, r, from + j)).collect::<Result<Vec<_>, _>>();
        let row = [vals(4, 4)?, vals(8, 2)?, vals(10, 3)?];
        if groups.last().is_none_or(|a| a.name != name) {
            if let Some(last) = groups.last_mut() {
                flush(last);
            }
            groups.push(Acc { name: name.clone(), ens: empty(), rows: Vec::new() });
        }
        let acc = groups.last_mut().expect("pushed above");
        if step == 0 {
            flush(acc);
            acc.ens.seeds.push(seed);
            acc.ens.status.push(status);
        } else if acc.ens.seeds.last() != Some(&seed) || acc.rows.len() != step {
            return Err(malformed(path, format!("rows of sample {seed} are out of order")));
        }
        acc.rows.push(row);
    }
    if let Some(last) = groups.last_mut() {
        flush(last);
    }
    Ok(groups.into_iter().map(|a| (a.name, a.ens)).collect())
}

/// Serializes rows of named numeric columns.
pub fn table_to_csv(header: &[&str], rows: &[Vec<String>]) -> String {
    csv_text(&header.iter().map(|s| s.to_string()).collect::<Vec<_>>(), rows.iter().cloned())
}

pub fn read_table(path: &Path, command: &'static str) -> Result<(Vec<String>, Vec<Vec<String>>), ArtifactError> {
    let text = read_required(path, command)?;
    let (h, rows) = csv_rows(path, &text)?;
    Ok((h, rows.iter().map(|r| r.iter().map(str::to_string).collect()).collect()))
}

pub fn num(v: f64) -> String {
    fmt(v)
}
