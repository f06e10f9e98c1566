//! Problem ingestion and report emission.
//!
//! Every document read by the tool is JSON with a top-level
//! `schema_version`. CSV is written, never read.

use crate::bolza::{BolzaProblem, DualBolzaProblem};
use crate::lcontrol::LcProblem;
use crate::probspace::Process;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use std::fmt::Write as _;
use std::path::Path;
use thiserror::Error;

pub const SCHEMA_VERSION: u64 = 1;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    File { path: String, source: std::io::Error },
    #[error("malformed JSON at line {line}, column {column}: {msg}")]
    Syntax { line: usize, column: usize, msg: String },
    #[error("at `{path}`: {msg}")]
    Schema { path: String, msg: String },
    #[error("missing `schema_version` (expected {expected})")]
    MissingVersion { expected: u64 },
    #[error("schema_version {found} is not supported (expected {expected})")]
    VersionMismatch { found: String, expected: u64 },
    #[error("trajectory: {0}")]
    Trajectory(String),
}

/// Raw input bytes with their digest.
#[derive(Debug, Clone)]
pub struct Input {
    pub path: String,
    pub bytes: Vec<u8>,
    pub sha256: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

pub fn read_input(path: &Path) -> Result<Input, IoError> {
    let bytes = std::fs::read(path).map_err(|source| IoError::File { path: path.display().to_string(), source })?;
    Ok(Input { path: path.display().to_string(), sha256: sha256_hex(&bytes), bytes })
}

pub fn write_file(path: &Path, contents: &str) -> Result<(), IoError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|source| IoError::File { path: dir.display().to_string(), source })?;
    }
    std::fs::write(path, contents).map_err(|source| IoError::File { path: path.display().to_string(), source })
}

/// Parses JSON, checks and strips `schema_version`.
pub fn parse_value(bytes: &[u8]) -> Result<Value, IoError> {
    let mut v: Value = serde_json::from_slice(bytes).map_err(|e| {
        let (line, column) = (e.line(), e.column());
        let full = e.to_string();
        let msg = full.strip_suffix(&format!(" at line {line} column {column}")).unwrap_or(&full).to_string();
        IoError::Syntax { line, column, msg }
    })?;
    let Some(obj) = v.as_object_mut() else {
        return Err(IoError::Schema { path: ".".into(), msg: "expected a JSON object".into() });
    };
    match obj.remove("schema_version") {
        None => Err(IoError::MissingVersion { expected: SCHEMA_VERSION }),
        Some(Value::Number(n)) if n.as_u64() == Some(SCHEMA_VERSION) => Ok(v),
        Some(other) => Err(IoError::VersionMismatch { found: other.to_string(), expected: SCHEMA_VERSION }),
    }
}

/// Deserializes with the JSON path of the first offending field.
pub fn from_value<T: DeserializeOwned>(v: Value) -> Result<T, IoError> {
    serde_path_to_error::deserialize(v).map_err(|e| {
        let path = e.path().to_string();
        IoError::Schema { path, msg: e.into_inner().to_string() }
    })
}

pub fn parse_document<T: DeserializeOwned>(bytes: &[u8]) -> Result<T, IoError> {
    from_value(parse_value(bytes)?)
}

/// `x` as a JSON object with `schema_version` prepended.
pub fn to_document<T: Serialize>(x: &T) -> Value {
    let mut doc = serde_json::Map::new();
    doc.insert("schema_version".into(), Value::from(SCHEMA_VERSION));
    match serde_json::to_value(x).expect("documents serialize") {
        Value::Object(m) => doc.extend(m),
        other => {
            doc.insert("value".into(), other);
        }
    }
    Value::Object(doc)
}

pub fn to_pretty(v: &impl Serialize) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("reports serialize");
    s.push('\n');
    s
}

/// The problem kinds the tool reads.
#[derive(Debug, Clone)]
pub enum ProblemDoc {
    Bolza(BolzaProblem),
    Dual(DualBolzaProblem),
    Lc(LcProblem),
}

/// Dispatches on the keys present: `A` marks a linear-convex problem, `eta`
/// a dual Bolza problem, anything else is read as a primal Bolza problem.
pub fn parse_problem(bytes: &[u8]) -> Result<ProblemDoc, IoError> {
    let v = parse_value(bytes)?;
    let has = |k: &str| v.get(k).is_some();
    if has("A") {
        from_value(v).map(ProblemDoc::Lc)
    } else if has("eta") {
        from_value(v).map(ProblemDoc::Dual)
    } else {
        from_value(v).map(ProblemDoc::Bolza)
    }
}

/// One node of a trajectory table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectoryRow {
    pub t: usize,
    pub atom: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub u: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectoryDoc {
    pub rows: Vec<TrajectoryRow>,
}

/// Rows `(t, atom)` over the window of `x` or `p` (which must agree when both
/// are given); `u` fills the rows inside its own window.
pub fn trajectory_rows(x: Option<&Process>, p: Option<&Process>, u: Option<&Process>) -> Vec<TrajectoryRow> {
    let Some(w) = x.or(p) else { return Vec::new() };
    let pick = |q: Option<&Process>, t: usize, a: usize| q.filter(|q| q.first <= t && t <= q.last).map(|q| q.get(t, a).to_vec());
    let mut rows = Vec::new();
    for t in w.first..=w.last {
        for a in 0..w.atoms() {
            rows.push(TrajectoryRow { t, atom: a, x: pick(x, t, a), p: pick(p, t, a), u: pick(u, t, a) });
        }
    }
    rows
}

/// Rebuilds `(x, p)` on `[first, last]`; every node must appear once with
/// both vectors of length `n`.
pub fn processes_from_rows(rows: &[TrajectoryRow], n: usize, first: usize, last: usize, atoms: usize) -> Result<(Process, Process), IoError> {
    let mut x = Process::zeros(n, first, last, atoms);
    let mut p = Process::zeros(n, first, last, atoms);
    let mut seen = vec![vec![false; atoms]; last - first + 1];
    for (i, r) in rows.iter().enumerate() {
        if r.t < first || r.t > last || r.atom >= atoms {
            return Err(IoError::Trajectory(format!("row {i}: node (t={}, atom={}) outside the problem window", r.t, r.atom)));
        }
        if std::mem::replace(&mut seen[r.t - first][r.atom], true) {
            return Err(IoError::Trajectory(format!("row {i}: node (t={}, atom={}) repeated", r.t, r.atom)));
        }
        for (name, val, dst) in [("x", &r.x, &mut x), ("p", &r.p, &mut p)] {
            match val {
                Some(v) if v.len() == n => dst.at_mut(r.t)[r.atom] = v.clone(),
                Some(v) => return Err(IoError::Trajectory(format!("row {i}: `{name}` has length {}, expected {n}", v.len()))),
                None => return Err(IoError::Trajectory(format!("row {i}: missing `{name}`"))),
            }
        }
    }
    if let Some((k, a)) = seen.iter().enumerate().find_map(|(k, s)| s.iter().position(|b| !b).map(|a| (k, a))) {
        return Err(IoError::Trajectory(format!("node (t={}, atom={a}) missing", first + k)));
    }
    Ok((x, p))
}

/// CSV with columns `t, atom, x_1.., p_1.., u_1..`; a block appears when any
/// row carries it, absent entries are left empty.
pub fn rows_csv(rows: &[TrajectoryRow]) -> String {
    let width = |f: fn(&TrajectoryRow) -> &Option<Vec<f64>>| rows.iter().filter_map(|r| f(r).as_ref().map(Vec::len)).max().unwrap_or(0);
    let blocks: [(&str, fn(&TrajectoryRow) -> &Option<Vec<f64>>); 3] = [("x", |r| &r.x), ("p", |r| &r.p), ("u", |r| &r.u)];
    let widths: Vec<usize> = blocks.iter().map(|(_, f)| width(*f)).collect();
    let mut out = String::from("t,atom");
    for ((name, _), w) in blocks.iter().zip(&widths) {
        for i in 1..=*w {
            let _ = write!(out, ",{name}{i}");
        }
    }
    out.push('\n');
    for r in rows {
        let _ = write!(out, "{},{}", r.t, r.atom);
        for ((_, f), w) in blocks.iter().zip(&widths) {
            for i in 0..*w {
                match f(r) {
                    Some(v) => {
                        let _ = write!(out, ",{}", v[i]);
                    }
                    None => out.push(','),
                }
            }
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn version_is_checked_and_stripped() {
        let v = parse_value(br#"{"schema_version": 1, "a": 2}"#).unwrap();
        assert_eq!(v, serde_json::json!({"a": 2}));
        assert!(matches!(parse_value(br#"{"a": 2}"#), Err(IoError::MissingVersion { .. })));
        assert!(matches!(parse_value(br#"{"schema_version": 2}"#), Err(IoError::VersionMismatch { .. })));
        assert!(matches!(parse_value(b"{\"schema_version\": 1,"), Err(IoError::Syntax { .. })));
    }

    #[test]
    fn schema_errors_carry_paths() {
        let doc = br#"{"schema_version": 1, "rows": [{"t": 0, "atom": 0, "x": [1.0]}, {"t": 1, "atom": "zero"}]}"#;
        match parse_document::<TrajectoryDoc>(doc) {
            Err(IoError::Schema { path, .. }) => assert_eq!(path, "rows[1].atom"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn rows_round_trip() {
        let mut x = Process::zeros(1, 0, 1, 2);
        x.at_mut(1)[1] = vec![3.5];
        let mut p = Process::zeros(1, 0, 1, 2);
        p.at_mut(0)[0] = vec![-2.0];
        let rows = trajectory_rows(Some(&x), Some(&p), None);
        assert_eq!(rows.len(), 4);
        let (x2, p2) = processes_from_rows(&rows, 1, 0, 1, 2).unwrap();
        assert_eq!((x2, p2), (x, p));
        assert!(processes_from_rows(&rows[..3], 1, 0, 1, 2).is_err());
        let csv = rows_csv(&rows);
        assert_eq!(csv.lines().next(), Some("t,atom,x1,p1"));
        assert_eq!(csv.lines().nth(4), Some("1,1,3.5,0"));
    }

    #[test]
    fn documents_carry_the_version() {
        let doc = to_document(&TrajectoryDoc { rows: vec![] });
        assert_eq!(doc["schema_version"], SCHEMA_VERSION);
        let back: TrajectoryDoc = parse_document(to_pretty(&doc).as_bytes()).unwrap();
        assert!(back.rows.is_empty());
    }
}
