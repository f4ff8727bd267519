//! Simulated experiment sweeps: one run per (protocol, sweep value,
//! repetition), a directory of CSVs per run, a per-run summary table and a
//! roll-up across repetitions.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use log::{error, info};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use agectl_core::endpoints::{SourceConfig, SourceMode};
use agectl_core::logs::{write_csv, CsvRecord};
use agectl_core::metrics::{jain, summarize, AgeMode, SummaryStats, DEFAULT_WARMUP_FRACTION};
use agectl_core::netsim::{run_simulation, MultiaccessHop, ReversePath, SimConfig, SimOutput, Station};
use agectl_core::wire::DEFAULT_PAYLOAD_LEN;

pub const MANIFEST: &str = "manifest.toml";
pub const SUMMARY: &str = "summary.csv";
pub const ROLLUP: &str = "rollup.csv";
pub const FAILURES: &str = "failures.csv";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    /// Number of sources sharing the path.
    Sources,
    /// Update rate of fixed-rate protocols, per second.
    Rate,
}

impl Axis {
    pub fn label(&self) -> &'static str {
        match self {
            Axis::Sources => "sources",
            Axis::Rate => "rate",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sweep {
    pub axis: Axis,
    pub values: Vec<f64>,
}

fn default_repetitions() -> usize {
    1
}
fn default_sources() -> usize {
    1
}
fn default_warmup() -> f64 {
    DEFAULT_WARMUP_FRACTION
}
fn default_payload() -> usize {
    DEFAULT_PAYLOAD_LEN
}

/// A simulated experiment, read from TOML.
///
/// Field order matters for serialization: plain values precede tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub name: String,
    #[serde(default = "default_repetitions")]
    pub repetitions: usize,
    #[serde(default)]
    pub seed: u64,
    pub protocols: Vec<SourceMode>,
    /// Source count when the sweep axis is not `sources`.
    #[serde(default = "default_sources")]
    pub sources: usize,
    /// Simulated seconds per run.
    pub duration: f64,
    #[serde(default = "default_warmup")]
    pub warmup_fraction: f64,
    #[serde(default)]
    pub start_jitter: f64,
    #[serde(default = "default_payload")]
    pub payload_bytes: usize,
    #[serde(default)]
    pub reverse: ReversePath,
    #[serde(default)]
    pub age_mode: AgeMode,
    /// Write every packet event to `trace.csv`.
    #[serde(default)]
    pub trace: bool,
    pub sweep: Sweep,
    #[serde(default)]
    pub multiaccess: Option<MultiaccessHop>,
    #[serde(rename = "station")]
    pub stations: Vec<Station>,
}

impl ExperimentSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: Self = toml::from_str(text).context("parsing experiment spec")?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.repetitions == 0 {
            bail!("repetitions must be at least 1");
        }
        if self.protocols.is_empty() {
            bail!("at least one protocol is required");
        }
        if self.sweep.values.is_empty() {
            bail!("sweep has no values");
        }
        for (i, a) in self.sweep.values.iter().enumerate() {
            if self.sweep.values[..i].contains(a) {
                bail!("sweep value {a} appears twice");
            }
            if !(*a > 0.0 && a.is_finite()) {
                bail!("sweep values must be positive, got {a}");
            }
        }
        match self.sweep.axis {
            Axis::Sources => {
                if let Some(v) = self.sweep.values.iter().find(|v| v.fract() != 0.0) {
                    bail!("source counts must be whole numbers, got {v}");
                }
            }
            Axis::Rate => {
                if let Some(p) = self
                    .protocols
                    .iter()
                    .find(|p| !matches!(p, SourceMode::Constant(_) | SourceMode::Poisson(_)))
                {
                    bail!("a rate sweep needs fixed-rate protocols, got {p}");
                }
            }
        }
        // Catches everything else the simulator would reject.
        self.sim_config(self.protocols[0], self.sweep.values[0], 0)
            .validate()
            .map_err(anyhow::Error::from)
    }

    /// Every run of the experiment, in a stable order.
    pub fn plan(&self) -> Vec<RunPlan> {
        let mut runs = Vec::new();
        for &protocol in &self.protocols {
            for &value in &self.sweep.values {
                for rep in 0..self.repetitions {
                    let protocol = match self.sweep.axis {
                        Axis::Rate => protocol.with_rate(value),
                        Axis::Sources => protocol,
                    };
                    runs.push(RunPlan {
                        run_id: format!("{}_{}{}_rep{rep}", slug(&protocol), self.sweep.axis.label(), fmt_value(value)),
                        protocol,
                        value,
                        repetition: rep,
                        // Common random numbers across protocols and sweep values.
                        seed: self.seed.wrapping_add(rep as u64),
                    });
                }
            }
        }
        runs
    }

    fn source_count(&self, value: f64) -> usize {
        match self.sweep.axis {
            Axis::Sources => value as usize,
            Axis::Rate => self.sources,
        }
    }

    pub fn sim_config(&self, protocol: SourceMode, value: f64, seed: u64) -> SimConfig {
        let source = SourceConfig {
            payload_len: self.payload_bytes,
            ..SourceConfig::with_mode(protocol)
        };
        let mut cfg = SimConfig::new(vec![source; self.source_count(value)], self.stations.clone(), self.duration);
        cfg.multiaccess = self.multiaccess;
        cfg.reverse = self.reverse;
        cfg.warmup_fraction = self.warmup_fraction;
        cfg.start_jitter = self.start_jitter;
        cfg.record_trace = self.trace;
        cfg.seed = seed;
        cfg
    }
}

fn slug(mode: &SourceMode) -> String {
    match mode {
        SourceMode::AcpPlus => "acpplus".into(),
        SourceMode::Lazy => "lazy".into(),
        SourceMode::Constant(_) => "constant".into(),
        SourceMode::Poisson(_) => "poisson".into(),
    }
}

fn fmt_value(v: f64) -> String {
    if v.fract() == 0.0 {
        format!("{}", v as i64)
    } else {
        format!("{v}")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunPlan {
    pub run_id: String,
    pub protocol: SourceMode,
    pub value: f64,
    pub repetition: usize,
    pub seed: u64,
}

/// Everything needed to reproduce one run, stored next to its CSVs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub run_id: String,
    pub code_version: String,
    pub protocol: SourceMode,
    pub axis: Axis,
    pub value: f64,
    pub repetition: usize,
    pub seed: u64,
    pub sources: usize,
    pub payload_bytes: usize,
    pub duration: f64,
    pub warmup_fraction: f64,
    pub age_mode: AgeMode,
    pub spec: ExperimentSpec,
}

impl Manifest {
    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn horizon(&self) -> (f64, f64) {
        agectl_core::metrics::horizon(self.duration, self.warmup_fraction)
    }
}

pub fn source_log(dir: &Path, i: usize) -> PathBuf {
    dir.join(format!("source_{i}.csv"))
}
pub fn monitor_log(dir: &Path, i: usize) -> PathBuf {
    dir.join(format!("monitor_{i}.csv"))
}
pub fn epoch_log(dir: &Path, i: usize) -> PathBuf {
    dir.join(format!("epochs_{i}.csv"))
}

/// One row of `summary.csv`: a run, averaged over its sources.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run_id: String,
    pub protocol: String,
    pub axis: Axis,
    pub value: f64,
    pub repetition: usize,
    pub seed: u64,
    pub sources: usize,
    pub avg_age_ms: Option<f64>,
    pub avg_delay_ms: Option<f64>,
    /// Per-source mean of delivered payload bits per second.
    pub throughput_bps: f64,
    pub inter_delivery_ms: Option<f64>,
    pub backlog_avg: f64,
    /// Time-average updates in the network per source, from the simulator.
    pub occupancy_avg: Option<f64>,
    pub rtt_ms: Option<f64>,
    pub inter_ack_ms: Option<f64>,
    pub loss_fraction: f64,
    /// Jain's index over per-source ages.
    pub fairness: Option<f64>,
}

impl CsvRecord for RunSummary {
    const HEADER: &'static [&'static str] = &[
        "run_id",
        "protocol",
        "axis",
        "value",
        "repetition",
        "seed",
        "sources",
        "avg_age_ms",
        "avg_delay_ms",
        "throughput_bps",
        "inter_delivery_ms",
        "backlog_avg",
        "occupancy_avg",
        "rtt_ms",
        "inter_ack_ms",
        "loss_fraction",
        "fairness",
    ];
}

fn mean_of(xs: impl IntoIterator<Item = f64>) -> Option<f64> {
    let (n, s) = xs.into_iter().fold((0usize, 0.0), |(n, s), x| (n + 1, s + x));
    (n > 0).then(|| s / n as f64)
}

/// Identifies a run in summary tables.
#[derive(Debug, Clone, PartialEq)]
pub struct RunLabel {
    pub run_id: String,
    pub protocol: String,
    pub axis: Axis,
    pub value: f64,
    pub repetition: usize,
    pub seed: u64,
}

impl From<&Manifest> for RunLabel {
    fn from(m: &Manifest) -> Self {
        Self {
            run_id: m.run_id.clone(),
            protocol: m.protocol.to_string(),
            axis: m.axis,
            value: m.value,
            repetition: m.repetition,
            seed: m.seed,
        }
    }
}

/// Folds per-source statistics into one summary row.
pub fn summarize_run(label: &RunLabel, stats: &[SummaryStats], occupancy: Option<&[f64]>) -> RunSummary {
    let ms = |x: f64| x * 1e3;
    let ages: Vec<f64> = stats.iter().filter_map(|s| s.avg_age).collect();
    let fairness = if ages.len() == stats.len() { jain(&ages).ok() } else { None };
    RunSummary {
        run_id: label.run_id.clone(),
        protocol: label.protocol.clone(),
        axis: label.axis,
        value: label.value,
        repetition: label.repetition,
        seed: label.seed,
        sources: stats.len(),
        avg_age_ms: mean_of(ages.iter().copied()).map(ms),
        avg_delay_ms: mean_of(stats.iter().filter_map(|s| s.avg_delay)).map(ms),
        throughput_bps: mean_of(stats.iter().map(|s| s.throughput)).unwrap_or(0.0),
        inter_delivery_ms: mean_of(stats.iter().filter_map(|s| s.avg_inter_delivery)).map(ms),
        backlog_avg: mean_of(stats.iter().map(|s| s.backlog_avg)).unwrap_or(0.0),
        occupancy_avg: occupancy.and_then(|o| mean_of(o.iter().copied())),
        rtt_ms: mean_of(stats.iter().filter_map(|s| s.avg_rtt)).map(ms),
        inter_ack_ms: mean_of(stats.iter().filter_map(|s| s.avg_inter_ack)).map(ms),
        loss_fraction: mean_of(stats.iter().map(|s| s.loss_fraction)).unwrap_or(0.0),
        fairness,
    }
}

/// The outcome of a single simulated run.
#[derive(Debug)]
pub struct RunResult {
    pub manifest: Manifest,
    pub output: SimOutput,
    pub stats: Vec<SummaryStats>,
    pub summary: RunSummary,
}

pub fn execute_run(spec: &ExperimentSpec, plan: &RunPlan) -> Result<RunResult> {
    let cfg = spec.sim_config(plan.protocol, plan.value, plan.seed);
    let manifest = Manifest {
        run_id: plan.run_id.clone(),
        code_version: concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION")).into(),
        protocol: plan.protocol,
        axis: spec.sweep.axis,
        value: plan.value,
        repetition: plan.repetition,
        seed: plan.seed,
        sources: cfg.sources.len(),
        payload_bytes: spec.payload_bytes,
        duration: spec.duration,
        warmup_fraction: spec.warmup_fraction,
        age_mode: spec.age_mode,
        spec: spec.clone(),
    };
    let output = run_simulation(&cfg)?;
    let horizon = output.horizon;
    let stats = output
        .sources
        .iter()
        .enumerate()
        .map(|(i, s)| {
            summarize(&s.events, &s.deliveries, horizon, spec.payload_bytes, spec.age_mode)
                .with_context(|| format!("summarizing source {i}"))
        })
        .collect::<Result<Vec<_>>>()?;
    let occupancy: Vec<f64> = output.sources.iter().map(|s| s.occupancy_avg).collect();
    let summary = summarize_run(&RunLabel::from(&manifest), &stats, Some(&occupancy));
    Ok(RunResult {
        manifest,
        output,
        stats,
        summary,
    })
}

/// Writes a run's manifest and logs under `dir`.
pub fn write_run(dir: &Path, run: &RunResult) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let manifest = toml::to_string(&run.manifest).context("serializing manifest")?;
    fs::write(dir.join(MANIFEST), manifest)?;
    for (i, s) in run.output.sources.iter().enumerate() {
        write_csv(&source_log(dir, i), &s.events)?;
        write_csv(&monitor_log(dir, i), &s.deliveries)?;
        if !s.epochs.is_empty() {
            write_csv(&epoch_log(dir, i), &s.epochs)?;
        }
    }
    if !run.output.trace.is_empty() {
        write_csv(&dir.join("trace.csv"), &run.output.trace)?;
    }
    write_csv(&dir.join(SUMMARY), std::slice::from_ref(&run.summary))?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub run_id: String,
    pub error: String,
}

impl CsvRecord for Failure {
    const HEADER: &'static [&'static str] = &["run_id", "error"];
}

#[derive(Debug, Default)]
pub struct ExperimentOutcome {
    pub summaries: Vec<RunSummary>,
    pub rollup: Vec<RollupRow>,
    pub failures: Vec<Failure>,
}

/// Runs every planned run on up to `jobs` threads, writing each run under
/// `out/<run_id>/` and the summary and roll-up at the top of `out`.
pub fn run_experiment(spec: &ExperimentSpec, out: &Path, jobs: usize) -> Result<ExperimentOutcome> {
    spec.validate()?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let plans = spec.plan();
    info!("experiment {}: {} runs on {} threads", spec.name, plans.len(), jobs.max(1));
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .context("building thread pool")?;
    let results: Vec<Result<RunSummary, Failure>> = pool.install(|| {
        plans
            .par_iter()
            .map(|plan| {
                let dir = out.join(&plan.run_id);
                let done = execute_run(spec, plan).and_then(|run| {
                    write_run(&dir, &run)?;
                    Ok(run.summary)
                });
                done.map_err(|e| {
                    error!("run {} failed: {e:#}", plan.run_id);
                    let _ = fs::create_dir_all(&dir);
                    let _ = fs::write(dir.join("error.txt"), format!("{e:#}\n"));
                    Failure {
                        run_id: plan.run_id.clone(),
                        error: format!("{e:#}"),
                    }
                })
            })
            .collect()
    });
    let mut outcome = ExperimentOutcome::default();
    for r in results {
        match r {
            Ok(s) => outcome.summaries.push(s),
            Err(f) => outcome.failures.push(f),
        }
    }
    outcome.rollup = rollup(&outcome.summaries);
    write_csv(&out.join(SUMMARY), &outcome.summaries)?;
    write_csv(&out.join(ROLLUP), &outcome.rollup)?;
    if !outcome.failures.is_empty() {
        write_csv(&out.join(FAILURES), &outcome.failures)?;
    }
    Ok(outcome)
}

/// Sample mean and standard deviation.
pub fn spread(xs: &[f64]) -> (Option<f64>, Option<f64>) {
    let mean = mean_of(xs.iter().copied());
    let std = match mean {
        Some(m) if xs.len() > 1 => {
            Some((xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt())
        }
        _ => None,
    };
    (mean, std)
}

/// One row of `rollup.csv`: mean and sample standard deviation of each
/// metric over the repetitions of one protocol at one sweep value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RollupRow {
    pub protocol: String,
    pub axis: Axis,
    pub value: f64,
    pub runs: usize,
    pub avg_age_ms_mean: Option<f64>,
    pub avg_age_ms_std: Option<f64>,
    pub avg_delay_ms_mean: Option<f64>,
    pub avg_delay_ms_std: Option<f64>,
    pub throughput_bps_mean: Option<f64>,
    pub throughput_bps_std: Option<f64>,
    pub inter_delivery_ms_mean: Option<f64>,
    pub inter_delivery_ms_std: Option<f64>,
    pub backlog_avg_mean: Option<f64>,
    pub backlog_avg_std: Option<f64>,
    pub occupancy_avg_mean: Option<f64>,
    pub occupancy_avg_std: Option<f64>,
    pub rtt_ms_mean: Option<f64>,
    pub rtt_ms_std: Option<f64>,
    pub inter_ack_ms_mean: Option<f64>,
    pub inter_ack_ms_std: Option<f64>,
    pub loss_fraction_mean: Option<f64>,
    pub loss_fraction_std: Option<f64>,
    pub fairness_mean: Option<f64>,
    pub fairness_std: Option<f64>,
}

impl CsvRecord for RollupRow {
    const HEADER: &'static [&'static str] = &[
        "protocol",
        "axis",
        "value",
        "runs",
        "avg_age_ms_mean",
        "avg_age_ms_std",
        "avg_delay_ms_mean",
        "avg_delay_ms_std",
        "throughput_bps_mean",
        "throughput_bps_std",
        "inter_delivery_ms_mean",
        "inter_delivery_ms_std",
        "backlog_avg_mean",
        "backlog_avg_std",
        "occupancy_avg_mean",
        "occupancy_avg_std",
        "rtt_ms_mean",
        "rtt_ms_std",
        "inter_ack_ms_mean",
        "inter_ack_ms_std",
        "loss_fraction_mean",
        "loss_fraction_std",
        "fairness_mean",
        "fairness_std",
    ];
}

/// Groups run summaries by protocol and sweep value, in first-seen order.
pub fn rollup(summaries: &[RunSummary]) -> Vec<RollupRow> {
    let mut groups: BTreeMap<(usize, usize), Vec<&RunSummary>> = BTreeMap::new();
    let mut protocols: Vec<&str> = Vec::new();
    let mut values: Vec<f64> = Vec::new();
    for s in summaries {
        let p = protocols.iter().position(|&p| p == s.protocol).unwrap_or_else(|| {
            protocols.push(&s.protocol);
            protocols.len() - 1
        });
        let v = values.iter().position(|&v| v == s.value).unwrap_or_else(|| {
            values.push(s.value);
            values.len() - 1
        });
        groups.entry((p, v)).or_default().push(s);
    }
    groups
        .into_values()
        .map(|runs| {
            let col = |f: fn(&RunSummary) -> Option<f64>| spread(&runs.iter().filter_map(|r| f(r)).collect::<Vec<_>>());
            let (avg_age_ms_mean, avg_age_ms_std) = col(|r| r.avg_age_ms);
            let (avg_delay_ms_mean, avg_delay_ms_std) = col(|r| r.avg_delay_ms);
            let (throughput_bps_mean, throughput_bps_std) = col(|r| Some(r.throughput_bps));
            let (inter_delivery_ms_mean, inter_delivery_ms_std) = col(|r| r.inter_delivery_ms);
            let (backlog_avg_mean, backlog_avg_std) = col(|r| Some(r.backlog_avg));
            let (occupancy_avg_mean, occupancy_avg_std) = col(|r| r.occupancy_avg);
            let (rtt_ms_mean, rtt_ms_std) = col(|r| r.rtt_ms);
            let (inter_ack_ms_mean, inter_ack_ms_std) = col(|r| r.inter_ack_ms);
            let (loss_fraction_mean, loss_fraction_std) = col(|r| Some(r.loss_fraction));
            let (fairness_mean, fairness_std) = col(|r| r.fairness);
            RollupRow {
                protocol: runs[0].protocol.clone(),
                axis: runs[0].axis,
                value: runs[0].value,
                runs: runs.len(),
                avg_age_ms_mean,
                avg_age_ms_std,
                avg_delay_ms_mean,
                avg_delay_ms_std,
                throughput_bps_mean,
                throughput_bps_std,
                inter_delivery_ms_mean,
                inter_delivery_ms_std,
                backlog_avg_mean,
                backlog_avg_std,
                occupancy_avg_mean,
                occupancy_avg_std,
                rtt_ms_mean,
                rtt_ms_std,
                inter_ack_ms_mean,
                inter_ack_ms_std,
                loss_fraction_mean,
                loss_fraction_std,
                fairness_mean,
                fairness_std,
            }
        })
        .collect()
}
