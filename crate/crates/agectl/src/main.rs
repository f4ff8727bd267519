use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use agectl::experiment::{run_experiment, ExperimentSpec};
use agectl::proxy::{run_proxy, DelayDist, Direction, ProxyConfig};
use agectl::report::build_report;
use agectl::transport::{run_monitor, run_source, MonitorRun, SourceRun};
use agectl_core::endpoints::SourceMode;
use agectl_core::logs::{write_csv, CsvRecord};
use agectl_core::netsim::{
    rtt_vs_load_curve, sweep_min_age, Arrivals, LoadPoint, MinAgePoint, MinAgeSweep, Station, DEFAULT_CURVE_PACKETS,
    IP_UDP_OVERHEAD,
};
use agectl_core::wire::{DEFAULT_PAYLOAD_LEN, UPDATE_HEADER_LEN};

#[derive(Parser)]
#[command(name = "agectl", version, about = "Age-control transport: simulation, live endpoints and reports")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every (protocol, sweep value, repetition) of an experiment spec.
    Simulate {
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Runs executed in parallel; defaults to the number of CPUs.
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Send updates to a monitor over UDP.
    Source {
        #[arg(long)]
        peer: String,
        #[arg(long)]
        bind: Option<String>,
        /// acp+, lazy, constant:<rate> or poisson:<rate>
        #[arg(long, default_value = "acp+")]
        mode: SourceMode,
        /// Seconds.
        #[arg(long)]
        duration: f64,
        #[arg(long, default_value_t = DEFAULT_PAYLOAD_LEN)]
        payload_bytes: usize,
        /// Update rate before the first RTT sample, per second.
        #[arg(long, default_value_t = 1.0)]
        initial_rate: f64,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Control-epoch log.
        #[arg(long)]
        epochs_out: Option<PathBuf>,
    },
    /// Receive updates and acknowledge the fresh ones.
    Monitor {
        #[arg(long)]
        listen: String,
        #[arg(long)]
        duration: f64,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        discards_out: Option<PathBuf>,
    },
    /// Relay datagrams between a source and a monitor with delay and loss.
    Proxy(ProxyArgs),
    /// Sweep fixed update rates over a tandem of stations and report the
    /// age-minimising one.
    SweepMinAge {
        #[command(flatten)]
        station: StationArgs,
        /// Number of identical stations in tandem.
        #[arg(long, default_value_t = 2)]
        stations: usize,
        /// Comma-separated update rates, per second.
        #[arg(long, value_delimiter = ',', required = true)]
        rates: Vec<f64>,
        #[arg(long, value_enum, default_value_t = ArrivalArg::Poisson)]
        arrivals: ArrivalArg,
        #[arg(long, default_value_t = 200.0)]
        duration: f64,
        #[arg(long, default_value_t = DEFAULT_PAYLOAD_LEN)]
        payload_bytes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Mean RTT through one station as the offered load varies.
    RttCurve {
        #[command(flatten)]
        station: StationArgs,
        /// No-load round-trip time, milliseconds.
        #[arg(long, default_value_t = 0.0)]
        rtt_base_ms: f64,
        /// Comma-separated offered loads, packets per second.
        #[arg(long, value_delimiter = ',', required = true)]
        loads: Vec<f64>,
        #[arg(long, default_value_t = DEFAULT_CURVE_PACKETS)]
        packets: usize,
        #[arg(long, default_value_t = DEFAULT_PAYLOAD_LEN)]
        payload_bytes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Summarize finished runs from their CSVs.
    Report {
        dir: PathBuf,
        /// Also export every source's age sawtooth.
        #[arg(long)]
        age_traces: bool,
    },
}

#[derive(Args)]
struct ProxyArgs {
    /// Address sources send to.
    #[arg(long)]
    listen: String,
    /// Monitor address.
    #[arg(long)]
    upstream: String,
    /// Mean one-way delay in each direction, milliseconds.
    #[arg(long, default_value_t = 0.0)]
    delay_ms: f64,
    /// Reverse-direction delay if different, milliseconds.
    #[arg(long)]
    reverse_delay_ms: Option<f64>,
    #[arg(long, default_value = "constant")]
    delay_dist: DelayDist,
    /// Loss probability in each direction.
    #[arg(long, default_value_t = 0.0)]
    loss: f64,
    #[arg(long)]
    reverse_loss: Option<f64>,
    /// Let packets overtake one another when delays are random.
    #[arg(long)]
    reorder: bool,
    /// Overridden by AGECTL_SEED.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Seconds to run; forever when omitted.
    #[arg(long)]
    duration: Option<f64>,
}

#[derive(Args)]
struct StationArgs {
    #[arg(long, value_enum, default_value_t = ServiceArg::Exponential)]
    service: ServiceArg,
    /// Service rate, bits per second.
    #[arg(long)]
    service_rate: f64,
    /// Packets held including the one in service; unbounded when omitted.
    #[arg(long)]
    buffer: Option<usize>,
}

impl StationArgs {
    fn station(&self) -> Station {
        let s = match self.service {
            ServiceArg::Deterministic => Station::deterministic(self.service_rate),
            ServiceArg::Exponential => Station::exponential(self.service_rate),
        };
        match self.buffer {
            Some(b) => s.with_buffer(b),
            None => s,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ServiceArg {
    Deterministic,
    Exponential,
}

#[derive(Clone, Copy, ValueEnum)]
enum ArrivalArg {
    Poisson,
    Constant,
}

fn write_or_print<T: CsvRecord>(out: Option<&PathBuf>, rows: &[T]) -> Result<()> {
    match out {
        Some(path) => write_csv(path, rows).map_err(Into::into),
        None => agectl_core::logs::write_records(std::io::stdout(), rows).map_err(Into::into),
    }
}

#[derive(serde::Serialize, serde::Deserialize)]
struct CurveRow {
    load: f64,
    utilisation: f64,
    mean_rtt_ms: Option<f64>,
    mean_sojourn_ms: Option<f64>,
    analytic_sojourn_ms: Option<f64>,
    drop_fraction: f64,
    unstable: bool,
}

impl CsvRecord for CurveRow {
    const HEADER: &'static [&'static str] = &[
        "load",
        "utilisation",
        "mean_rtt_ms",
        "mean_sojourn_ms",
        "analytic_sojourn_ms",
        "drop_fraction",
        "unstable",
    ];
}

impl From<&LoadPoint> for CurveRow {
    fn from(p: &LoadPoint) -> Self {
        let ms = |x: Option<f64>| x.map(|v| v * 1e3);
        Self {
            load: p.load,
            utilisation: p.utilisation,
            mean_rtt_ms: ms(p.mean_rtt),
            mean_sojourn_ms: ms(p.mean_sojourn),
            analytic_sojourn_ms: ms(p.analytic_sojourn),
            drop_fraction: p.drop_fraction,
            unstable: p.unstable,
        }
    }
}

#[derive(serde::Serialize, serde::Deserialize)]
struct SweepRow {
    rate: f64,
    avg_age_ms: f64,
    occupancy: f64,
}

impl CsvRecord for SweepRow {
    const HEADER: &'static [&'static str] = &["rate", "avg_age_ms", "occupancy"];
}

impl From<&MinAgePoint> for SweepRow {
    fn from(p: &MinAgePoint) -> Self {
        Self {
            rate: p.rate,
            avg_age_ms: p.avg_age * 1e3,
            occupancy: p.occupancy,
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Simulate { spec, out, jobs } => {
            let spec = ExperimentSpec::load(&spec)?;
            let jobs = jobs.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
            let outcome = run_experiment(&spec, &out, jobs)?;
            println!(
                "{} runs written to {} ({} failed)",
                outcome.summaries.len(),
                out.display(),
                outcome.failures.len()
            );
            for f in &outcome.failures {
                eprintln!("{}: {}", f.run_id, f.error);
            }
            if !outcome.failures.is_empty() {
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Source {
            peer,
            bind,
            mode,
            duration,
            payload_bytes,
            initial_rate,
            out,
            epochs_out,
        } => {
            let report = run_source(&SourceRun {
                peer,
                bind,
                mode,
                duration,
                payload_len: payload_bytes,
                initial_rate,
                out,
                epochs_out,
            })?;
            println!(
                "sent {} acks {} final rate {:.3}/s",
                report.sent, report.acks, report.final_lambda
            );
        }
        Command::Monitor {
            listen,
            duration,
            out,
            discards_out,
        } => {
            let report = run_monitor(&MonitorRun {
                listen,
                duration,
                out,
                discards_out,
            })?;
            println!(
                "received {} kept {} discarded {} undecodable {}",
                report.received,
                report.deliveries.len(),
                report.discards.len(),
                report.decode_errors
            );
        }
        Command::Proxy(args) => {
            let forward = Direction::new(args.delay_dist.with_mean(args.delay_ms / 1e3), args.loss);
            let reverse = Direction::new(
                args.delay_dist.with_mean(args.reverse_delay_ms.unwrap_or(args.delay_ms) / 1e3),
                args.reverse_loss.unwrap_or(args.loss),
            );
            let cfg = ProxyConfig {
                forward,
                reverse,
                reorder: args.reorder,
                seed: args.seed,
                ..ProxyConfig::new(args.listen, args.upstream)
            };
            let stats = run_proxy(&cfg, args.duration)?;
            println!("{}", toml::to_string(&stats)?);
        }
        Command::SweepMinAge {
            station,
            stations,
            rates,
            arrivals,
            duration,
            payload_bytes,
            seed,
            out,
        } => {
            if stations == 0 {
                bail!("at least one station is required");
            }
            let result = sweep_min_age(&MinAgeSweep {
                stations: vec![station.station(); stations],
                rates,
                arrivals: match arrivals {
                    ArrivalArg::Poisson => Arrivals::Poisson,
                    ArrivalArg::Constant => Arrivals::Constant,
                },
                duration,
                payload_len: payload_bytes,
                seed,
            })?;
            let rows: Vec<SweepRow> = result.points.iter().map(SweepRow::from).collect();
            write_or_print(out.as_ref(), &rows)?;
            eprintln!(
                "best rate {:.3}/s age {:.3} ms backlog {:.3}",
                result.best_rate,
                result.best_age * 1e3,
                result.backlog_at_best
            );
        }
        Command::RttCurve {
            station,
            rtt_base_ms,
            loads,
            packets,
            payload_bytes,
            seed,
            out,
        } => {
            let bits = ((payload_bytes + UPDATE_HEADER_LEN + IP_UDP_OVERHEAD) * 8) as u64;
            let points = rtt_vs_load_curve(
                &station.station(),
                rtt_base_ms / 1e3,
                &loads,
                bits,
                packets,
                seed,
            )?;
            let rows: Vec<CurveRow> = points.iter().map(CurveRow::from).collect();
            write_or_print(out.as_ref(), &rows)?;
        }
        Command::Report { dir, age_traces } => {
            let report = build_report(&dir, age_traces).with_context(|| format!("reporting on {}", dir.display()))?;
            print!("{}", report.table());
            if !report.errors.is_empty() {
                return Ok(ExitCode::FAILURE);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
