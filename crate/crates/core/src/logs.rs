//! Per-session log records and their CSV form.
//!
//! Times are seconds on the writing endpoint's clock; `gen_ts` is the raw
//! nanosecond timestamp carried on the wire.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LogError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Csv {
        path: String,
        #[source]
        source: csv::Error,
    },
    #[error("{path}: expected header {expected:?}, found {found:?}")]
    Header {
        path: String,
        expected: Vec<String>,
        found: Vec<String>,
    },
}

/// A record type with a fixed CSV header.
pub trait CsvRecord: Serialize + DeserializeOwned {
    const HEADER: &'static [&'static str];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceEventKind {
    Send,
    Ack,
    /// Out-of-sequence ACK.
    Discard,
    /// ACK that matches nothing the source sent.
    Violation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceEvent {
    pub time: f64,
    pub kind: SourceEventKind,
    pub seq: u32,
    pub gen_ts: u64,
    pub rtt: Option<f64>,
    /// Backlog after the event.
    pub backlog: u32,
}

impl CsvRecord for SourceEvent {
    const HEADER: &'static [&'static str] = &["time", "kind", "seq", "gen_ts", "rtt", "backlog"];
}

/// One control-epoch diagnostic row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub k: u64,
    pub t_k: f64,
    pub lambda: f64,
    /// `INC`, `DEC`, `MDEC(γ)`, `HOLD`, or `NONE` when no control step ran.
    pub action: String,
    pub b_star: Option<f64>,
    pub b_k: Option<f64>,
    pub delta_k: Option<f64>,
    pub flag: bool,
    pub gamma: u32,
}

impl CsvRecord for EpochRecord {
    const HEADER: &'static [&'static str] =
        &["k", "t_k", "lambda", "action", "b_star", "b_k", "delta_k", "flag", "gamma"];
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Delivery {
    pub receive_time: f64,
    pub seq: u32,
    pub gen_ts: u64,
}

impl CsvRecord for Delivery {
    const HEADER: &'static [&'static str] = &["receive_time", "seq", "gen_ts"];
}

pub fn ns_to_secs(ns: u64) -> f64 {
    ns as f64 * 1e-9
}

pub fn secs_to_ns(secs: f64) -> u64 {
    (secs * 1e9).round().max(0.0) as u64
}

pub fn write_records<T: CsvRecord, W: Write>(out: W, rows: &[T]) -> Result<(), csv::Error> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(T::HEADER)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_records<T: CsvRecord, R: Read>(input: R) -> Result<Vec<T>, csv::Error> {
    let mut r = csv::Reader::from_reader(input);
    r.deserialize().collect()
}

pub fn write_csv<T: CsvRecord>(path: &Path, rows: &[T]) -> Result<(), LogError> {
    let name = path.display().to_string();
    let file = File::create(path).map_err(|source| LogError::Io {
        path: name.clone(),
        source,
    })?;
    write_records(file, rows).map_err(|source| LogError::Csv { path: name, source })
}

pub fn read_csv<T: CsvRecord>(path: &Path) -> Result<Vec<T>, LogError> {
    let name = path.display().to_string();
    let file = File::open(path).map_err(|source| LogError::Io {
        path: name.clone(),
        source,
    })?;
    let mut r = csv::Reader::from_reader(file);
    let found: Vec<String> = r
        .headers()
        .map_err(|source| LogError::Csv {
            path: name.clone(),
            source,
        })?
        .iter()
        .map(str::to_owned)
        .collect();
    if found != T::HEADER {
        return Err(LogError::Header {
            path: name,
            expected: T::HEADER.iter().map(|s| s.to_string()).collect(),
            found,
        });
    }
    r.deserialize()
        .collect::<Result<_, _>>()
        .map_err(|source| LogError::Csv { path: name, source })
}
