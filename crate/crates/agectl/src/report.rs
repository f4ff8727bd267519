//! Summaries rebuilt from the CSVs of finished runs.
//!
//! A report reads logs and manifests and writes only under `<dir>/report/`,
//! so it can be regenerated at will.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use agectl_core::logs::{read_csv, write_csv, CsvRecord, Delivery, SourceEvent, SourceEventKind};
use agectl_core::metrics::{horizon, summarize, AgeMode, AgeTrace, SummaryStats, DEFAULT_WARMUP_FRACTION};
use agectl_core::wire::DEFAULT_PAYLOAD_LEN;

use crate::experiment::{monitor_log, source_log, summarize_run, Axis, Manifest, RunLabel, RunSummary, MANIFEST};

pub const REPORT_DIR: &str = "report";

/// Per-source statistics, one row of `report/sources.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceRow {
    pub run_id: String,
    pub protocol: String,
    pub value: Option<f64>,
    pub source: usize,
    pub avg_age_ms: Option<f64>,
    pub avg_delay_ms: Option<f64>,
    pub throughput_bps: f64,
    pub inter_delivery_ms: Option<f64>,
    pub backlog_avg: f64,
    pub rtt_ms: Option<f64>,
    pub loss_fraction: f64,
    pub delivered: usize,
}

impl CsvRecord for SourceRow {
    const HEADER: &'static [&'static str] = &[
        "run_id",
        "protocol",
        "value",
        "source",
        "avg_age_ms",
        "avg_delay_ms",
        "throughput_bps",
        "inter_delivery_ms",
        "backlog_avg",
        "rtt_ms",
        "loss_fraction",
        "delivered",
    ];
}

/// A point of a scatter export: one source of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScatterPoint {
    pub run_id: String,
    pub protocol: String,
    pub source: usize,
    pub x: f64,
    pub age_ms: f64,
}

impl CsvRecord for ScatterPoint {
    const HEADER: &'static [&'static str] = &["run_id", "protocol", "source", "x", "age_ms"];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileError {
    pub path: String,
    pub error: String,
}

impl CsvRecord for FileError {
    const HEADER: &'static [&'static str] = &["path", "error"];
}

#[derive(Debug, Default)]
pub struct Report {
    pub sources: Vec<SourceRow>,
    pub runs: Vec<RunSummary>,
    /// Logs that were missing or unreadable; the rest of the report stands.
    pub errors: Vec<FileError>,
}

impl Report {
    /// A plain-text table of the per-source rows with run fairness.
    pub fn table(&self) -> String {
        let opt = |x: Option<f64>| x.map_or_else(|| "-".to_string(), |v| format!("{v:.2}"));
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<28} {:>4} {:>10} {:>10} {:>12} {:>8} {:>9} {:>6}",
            "run", "src", "age_ms", "delay_ms", "tput_bps", "backlog", "rtt_ms", "loss"
        );
        for r in &self.sources {
            let _ = writeln!(
                s,
                "{:<28} {:>4} {:>10} {:>10} {:>12.0} {:>8.3} {:>9} {:>6.3}",
                r.run_id,
                r.source,
                opt(r.avg_age_ms),
                opt(r.avg_delay_ms),
                r.throughput_bps,
                r.backlog_avg,
                opt(r.rtt_ms),
                r.loss_fraction
            );
        }
        for run in self.runs.iter().filter(|r| r.sources > 1) {
            let _ = writeln!(s, "{}: Jain fairness over ages {}", run.run_id, opt(run.fairness));
        }
        for e in &self.errors {
            let _ = writeln!(s, "error: {}: {}", e.path, e.error);
        }
        s
    }
}

/// Run directories under `dir`: `dir` itself if it holds a manifest or a
/// live-run source log, else its immediate subdirectories that do.
fn discover(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        bail!("{} is not a directory", dir.display());
    }
    let is_run = |d: &Path| d.join(MANIFEST).is_file() || d.join("source.csv").is_file();
    if is_run(dir) {
        return Ok(vec![dir.to_path_buf()]);
    }
    let mut runs: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir() && is_run(p))
        .collect();
    runs.sort();
    if runs.is_empty() {
        bail!("no runs found in {} (expected {MANIFEST} or source.csv)", dir.display());
    }
    Ok(runs)
}

fn row(run_id: &str, protocol: &str, value: Option<f64>, i: usize, s: &SummaryStats) -> SourceRow {
    let ms = |x: Option<f64>| x.map(|v| v * 1e3);
    SourceRow {
        run_id: run_id.into(),
        protocol: protocol.into(),
        value,
        source: i,
        avg_age_ms: ms(s.avg_age),
        avg_delay_ms: ms(s.avg_delay),
        throughput_bps: s.throughput,
        inter_delivery_ms: ms(s.avg_inter_delivery),
        backlog_avg: s.backlog_avg,
        rtt_ms: ms(s.avg_rtt),
        loss_fraction: s.loss_fraction,
        delivered: s.delivered_count,
    }
}

fn read_logged<T: CsvRecord>(path: &Path, errors: &mut Vec<FileError>) -> Option<Vec<T>> {
    match read_csv(path) {
        Ok(rows) => Some(rows),
        Err(e) => {
            errors.push(FileError {
                path: path.display().to_string(),
                error: e.to_string(),
            });
            None
        }
    }
}

fn report_simulated(dir: &Path, report: &mut Report) -> Result<()> {
    let manifest = Manifest::read(dir)?;
    let mut stats = Vec::new();
    for i in 0..manifest.sources {
        let events = read_logged::<SourceEvent>(&source_log(dir, i), &mut report.errors);
        let deliveries = read_logged::<Delivery>(&monitor_log(dir, i), &mut report.errors);
        let (Some(events), Some(deliveries)) = (events, deliveries) else {
            continue;
        };
        let s = summarize(
            &events,
            &deliveries,
            manifest.horizon(),
            manifest.payload_bytes,
            manifest.age_mode,
        )
        .with_context(|| format!("{}: source {i}", dir.display()))?;
        report.sources.push(row(
            &manifest.run_id,
            &manifest.protocol.to_string(),
            Some(manifest.value),
            i,
            &s,
        ));
        stats.push(s);
    }
    if stats.len() == manifest.sources {
        report.runs.push(summarize_run(&RunLabel::from(&manifest), &stats, None));
    }
    Ok(())
}

/// A live session: `source.csv` and, if the monitor's log was collected
/// too, `monitor.csv`. Without a monitor log age is measured at the
/// source from ACKs.
fn report_live(dir: &Path, report: &mut Report) -> Result<()> {
    let run_id = dir
        .file_name()
        .map_or_else(|| "live".to_string(), |n| n.to_string_lossy().into_owned());
    let Some(events) = read_logged::<SourceEvent>(&dir.join("source.csv"), &mut report.errors) else {
        return Ok(());
    };
    let monitor_path = dir.join("monitor.csv");
    let deliveries = if monitor_path.is_file() {
        read_logged::<Delivery>(&monitor_path, &mut report.errors)
    } else {
        None
    };
    let mode = if deliveries.is_some() { AgeMode::OneWay } else { AgeMode::Rtt };
    let deliveries = deliveries.unwrap_or_default();
    let first = events.iter().find(|e| e.kind == SourceEventKind::Send).map(|e| e.time);
    let last = events
        .iter()
        .map(|e| e.time)
        .chain(deliveries.iter().map(|d| d.receive_time))
        .fold(f64::NEG_INFINITY, f64::max);
    let Some(first) = first.filter(|&f| last > f) else {
        report.errors.push(FileError {
            path: dir.join("source.csv").display().to_string(),
            error: "no session to summarize".into(),
        });
        return Ok(());
    };
    let (w0, w1) = horizon(last - first, DEFAULT_WARMUP_FRACTION);
    // Logs do not record the payload size; live runs use the default.
    let s = summarize(&events, &deliveries, (first + w0, first + w1), DEFAULT_PAYLOAD_LEN, mode)?;
    report.sources.push(row(&run_id, "live", None, 0, &s));
    let label = RunLabel {
        run_id,
        protocol: "live".into(),
        axis: Axis::Sources,
        value: 1.0,
        repetition: 0,
        seed: 0,
    };
    report.runs.push(summarize_run(&label, &[s], None));
    Ok(())
}

/// Builds the report for every run under `dir` and writes the tables and
/// scatter files under `dir/report/`. With `age_traces`, also exports each
/// source's sawtooth over its horizon.
pub fn build_report(dir: &Path, age_traces: bool) -> Result<Report> {
    let runs = discover(dir)?;
    let mut report = Report::default();
    for run in &runs {
        if run.join(MANIFEST).is_file() {
            report_simulated(run, &mut report)?;
        } else {
            report_live(run, &mut report)?;
        }
    }
    let out = dir.join(REPORT_DIR);
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    write_csv(&out.join("sources.csv"), &report.sources)?;
    write_csv(&out.join("runs.csv"), &report.runs)?;
    let scatter = |x: fn(&SourceRow) -> Option<f64>| -> Vec<ScatterPoint> {
        report
            .sources
            .iter()
            .filter_map(|r| {
                Some(ScatterPoint {
                    run_id: r.run_id.clone(),
                    protocol: r.protocol.clone(),
                    source: r.source,
                    x: x(r)?,
                    age_ms: r.avg_age_ms?,
                })
            })
            .collect()
    };
    write_csv(&out.join("delay_vs_age.csv"), &scatter(|r| r.avg_delay_ms))?;
    write_csv(&out.join("throughput_vs_age.csv"), &scatter(|r| Some(r.throughput_bps)))?;
    if !report.errors.is_empty() {
        write_csv(&out.join("errors.csv"), &report.errors)?;
    }
    if age_traces {
        export_age_traces(&runs, &out)?;
    }
    Ok(report)
}

fn export_age_traces(runs: &[PathBuf], out: &Path) -> Result<()> {
    for run in runs {
        let Ok(manifest) = Manifest::read(run) else {
            continue;
        };
        let (t0, t1) = manifest.horizon();
        for i in 0..manifest.sources {
            let trace = match manifest.age_mode {
                AgeMode::OneWay => read_csv::<Delivery>(&monitor_log(run, i))
                    .ok()
                    .and_then(|d| AgeTrace::from_monitor_log(&d).ok()),
                AgeMode::Rtt => read_csv::<SourceEvent>(&source_log(run, i))
                    .ok()
                    .and_then(|e| AgeTrace::from_source_log(&e).ok()),
            };
            if let Some(trace) = trace {
                let path = out.join(format!("age_{}_{i}.csv", manifest.run_id));
                write_csv(&path, &trace.points(t0.max(trace.start()), t1))?;
            }
        }
    }
    Ok(())
}
