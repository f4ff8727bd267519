//! Source and monitor endpoints over UDP sockets.
//!
//! The state machines come from `agectl_core::endpoints`; this module only
//! supplies a clock and a socket. Each session is a single loop that waits
//! for a datagram until the next timer deadline, so datagrams and timer
//! expiries are handled strictly in order.

use std::io::ErrorKind;
use std::net::{SocketAddr, ToSocketAddrs, UdpSocket};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::thread;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};
use log::{debug, info, warn};
use serde::Serialize;

use agectl_core::endpoints::{AckOutcome, Monitor, Source, SourceConfig, SourceMode};
use agectl_core::logs::{write_csv, CsvRecord, Delivery, EpochRecord, SourceEvent};
use agectl_core::wire::{decode_ack, decode_update, encode_ack, encode_update, MAX_DATAGRAM};

/// Seconds since the Unix epoch, advanced by a monotonic clock.
///
/// Every process on a host anchors to the same wall clock, so a source and
/// a monitor running side by side agree on time to within the anchoring
/// error, which is what one-way delay measurement on loopback needs.
#[derive(Debug, Clone, Copy)]
pub struct Clock {
    anchor: Instant,
    anchor_secs: f64,
}

impl Clock {
    pub fn new() -> Self {
        let wall = SystemTime::now().duration_since(UNIX_EPOCH).unwrap_or_default();
        Self {
            anchor: Instant::now(),
            anchor_secs: wall.as_secs_f64(),
        }
    }

    pub fn now(&self) -> f64 {
        self.anchor_secs + self.anchor.elapsed().as_secs_f64()
    }
}

impl Default for Clock {
    fn default() -> Self {
        Self::new()
    }
}

/// A zero socket timeout would mean "block forever".
const MIN_WAIT: Duration = Duration::from_micros(50);

fn wait_for(secs: f64) -> Duration {
    Duration::from_secs_f64(secs.max(0.0)).max(MIN_WAIT)
}

pub fn resolve(addr: &str) -> Result<SocketAddr> {
    addr.to_socket_addrs()
        .with_context(|| format!("resolving {addr}"))?
        .next()
        .with_context(|| format!("{addr} resolved to no address"))
}

fn unspecified_for(peer: &SocketAddr) -> SocketAddr {
    if peer.is_ipv4() {
        "0.0.0.0:0".parse().unwrap()
    } else {
        "[::]:0".parse().unwrap()
    }
}

#[derive(Debug, Clone)]
pub struct SourceRun {
    pub peer: String,
    /// Local address; an ephemeral port when `None`.
    pub bind: Option<String>,
    pub mode: SourceMode,
    /// Seconds.
    pub duration: f64,
    pub payload_len: usize,
    /// Update rate before the first RTT sample, per second.
    pub initial_rate: f64,
    /// Source event log.
    pub out: Option<PathBuf>,
    /// Control-epoch log.
    pub epochs_out: Option<PathBuf>,
}

impl SourceRun {
    pub fn new(peer: impl Into<String>, mode: SourceMode, duration: f64) -> Self {
        Self {
            peer: peer.into(),
            bind: None,
            mode,
            duration,
            payload_len: agectl_core::wire::DEFAULT_PAYLOAD_LEN,
            initial_rate: SourceConfig::default().initial_rate,
            out: None,
            epochs_out: None,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct SourceReport {
    pub start: f64,
    pub end: f64,
    pub sent: u64,
    pub acks: u64,
    pub stale_acks: u64,
    pub bad_datagrams: u64,
    pub send_errors: u64,
    pub final_lambda: f64,
    #[serde(skip)]
    pub events: Vec<SourceEvent>,
    #[serde(skip)]
    pub epochs: Vec<EpochRecord>,
}

/// Runs a source against `peer` for the configured duration and writes its
/// logs.
pub fn run_source(run: &SourceRun) -> Result<SourceReport> {
    if !(run.duration >= 0.0 && run.duration.is_finite()) {
        bail!("duration must be a non-negative number of seconds");
    }
    let peer = resolve(&run.peer)?;
    let bind = match &run.bind {
        Some(b) => resolve(b)?,
        None => unspecified_for(&peer),
    };
    let socket = UdpSocket::bind(bind).with_context(|| format!("binding {bind}"))?;
    socket.connect(peer).with_context(|| format!("connecting to {peer}"))?;

    let cfg = SourceConfig {
        payload_len: run.payload_len,
        initial_rate: run.initial_rate,
        ..SourceConfig::with_mode(run.mode)
    };
    let mut source = Source::new(cfg)?;
    let clock = Clock::new();
    let start = clock.now();
    let end = start + run.duration;
    let mut report = SourceReport {
        start,
        end,
        ..SourceReport::default()
    };

    if run.duration > 0.0 {
        info!("source {} -> {peer} for {}s", run.mode, run.duration);
        let stop = AtomicBool::new(false);
        let (tx, rx) = mpsc::channel();
        let reader = socket.try_clone()?;
        reader.set_read_timeout(Some(READER_POLL))?;
        thread::scope(|scope| -> Result<()> {
            scope.spawn(|| read_datagrams(reader, tx, &stop));
            let result = drive_source(&mut source, &socket, &clock, end, &rx, &mut report);
            stop.store(true, Ordering::Relaxed);
            result
        })?;
    }

    report.sent = u64::from(source.sent());
    report.final_lambda = source.lambda();
    let (events, epochs) = source.into_logs();
    if let Some(path) = &run.out {
        write_csv(path, &events)?;
    }
    if let Some(path) = &run.epochs_out {
        write_csv(path, &epochs)?;
    }
    report.events = events;
    report.epochs = epochs;
    info!(
        "source done: sent {} acks {} final rate {:.2}/s",
        report.sent, report.acks, report.final_lambda
    );
    Ok(report)
}

/// Socket timeouts are coarse (scheduler ticks), so a reader thread blocks
/// on the socket and hands datagrams to the event loop, which waits on the
/// channel with a precise timeout.
const READER_POLL: Duration = Duration::from_millis(50);

fn read_datagrams(socket: UdpSocket, tx: Sender<Vec<u8>>, stop: &AtomicBool) {
    let mut buf = vec![0u8; MAX_DATAGRAM];
    while !stop.load(Ordering::Relaxed) {
        match socket.recv(&mut buf) {
            Ok(n) => {
                if tx.send(buf[..n].to_vec()).is_err() {
                    break;
                }
            }
            // ICMP port unreachable from an earlier send; keep going.
            Err(e) if is_timeout(&e) || e.kind() == ErrorKind::ConnectionRefused => {}
            Err(e) => {
                warn!("receive failed: {e}");
                break;
            }
        }
    }
}

fn drive_source(
    source: &mut Source,
    socket: &UdpSocket,
    clock: &Clock,
    end: f64,
    rx: &Receiver<Vec<u8>>,
    report: &mut SourceReport,
) -> Result<()> {
    let first = source.start(clock.now());
    send(socket, &encode_update(&first)?, report);
    loop {
        let now = clock.now();
        if now >= end {
            return Ok(());
        }
        let deadline = source.next_deadline().map_or(end, |d| d.min(end));
        if deadline <= now {
            for pkt in source.on_timer(now) {
                send(socket, &encode_update(&pkt)?, report);
            }
            continue;
        }
        let datagram = match rx.recv_timeout(Duration::from_secs_f64(deadline - now)) {
            Ok(d) => d,
            Err(RecvTimeoutError::Timeout) => continue,
            Err(RecvTimeoutError::Disconnected) => bail!("socket reader stopped"),
        };
        let now = clock.now();
        match decode_ack(&datagram) {
            Ok(ack) => match source.on_ack(&ack, now) {
                AckOutcome::Accepted { reply, .. } => {
                    report.acks += 1;
                    if let Some(pkt) = reply {
                        send(socket, &encode_update(&pkt)?, report);
                    }
                }
                other => {
                    debug!("ack seq={} not accepted: {other:?}", ack.seq);
                    report.stale_acks += 1;
                }
            },
            Err(e) => {
                debug!("undecodable datagram: {e}");
                report.bad_datagrams += 1;
            }
        }
    }
}

fn send(socket: &UdpSocket, bytes: &[u8], report: &mut SourceReport) {
    if let Err(e) = socket.send(bytes) {
        if e.kind() != ErrorKind::ConnectionRefused {
            warn!("send failed: {e}");
        }
        report.send_errors += 1;
    }
}

fn is_timeout(e: &std::io::Error) -> bool {
    matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut)
}

#[derive(Debug, Clone)]
pub struct MonitorRun {
    pub listen: String,
    /// Seconds.
    pub duration: f64,
    pub out: Option<PathBuf>,
    /// Log of updates received but not kept.
    pub discards_out: Option<PathBuf>,
}

impl MonitorRun {
    pub fn new(listen: impl Into<String>, duration: f64) -> Self {
        Self {
            listen: listen.into(),
            duration,
            out: None,
            discards_out: None,
        }
    }
}

/// An update the monitor received and did not keep.
#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct Discard {
    pub time: f64,
    pub seq: u32,
    pub gen_ts: u64,
    pub reason: String,
}

impl CsvRecord for Discard {
    const HEADER: &'static [&'static str] = &["time", "seq", "gen_ts", "reason"];
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct MonitorReport {
    pub received: u64,
    pub acks_sent: u64,
    pub decode_errors: u64,
    #[serde(skip)]
    pub deliveries: Vec<Delivery>,
    #[serde(skip)]
    pub discards: Vec<Discard>,
}

/// A bound monitor socket, so callers can learn the port before running.
pub struct MonitorSession {
    socket: UdpSocket,
}

impl MonitorSession {
    pub fn bind(listen: &str) -> Result<Self> {
        let addr = resolve(listen)?;
        let socket = UdpSocket::bind(addr).with_context(|| format!("binding {addr}"))?;
        Ok(Self { socket })
    }

    pub fn local_addr(&self) -> Result<SocketAddr> {
        Ok(self.socket.local_addr()?)
    }

    /// Serves one source session: acknowledges every update fresher than
    /// anything before it, whichever address it came from.
    pub fn run(self, duration: f64, out: Option<&PathBuf>, discards_out: Option<&PathBuf>) -> Result<MonitorReport> {
        if !(duration >= 0.0 && duration.is_finite()) {
            bail!("duration must be a non-negative number of seconds");
        }
        let clock = Clock::new();
        let end = clock.now() + duration;
        let mut monitor = Monitor::new();
        let mut report = MonitorReport::default();
        let mut buf = vec![0u8; MAX_DATAGRAM];
        loop {
            let now = clock.now();
            if now >= end {
                break;
            }
            self.socket.set_read_timeout(Some(wait_for(end - now)))?;
            let (n, from) = match self.socket.recv_from(&mut buf) {
                Ok(x) => x,
                Err(e) if is_timeout(&e) || e.kind() == ErrorKind::ConnectionRefused => continue,
                Err(e) => return Err(e).context("receiving update"),
            };
            let now = clock.now();
            report.received += 1;
            let pkt = match decode_update(&buf[..n]) {
                Ok(p) => p,
                Err(e) => {
                    debug!("undecodable datagram from {from}: {e}");
                    report.decode_errors += 1;
                    continue;
                }
            };
            match monitor.on_update(&pkt, now) {
                Some(ack) => {
                    match self.socket.send_to(&encode_ack(&ack), from) {
                        Ok(_) => report.acks_sent += 1,
                        Err(e) => warn!("ACK to {from} failed: {e}"),
                    }
                }
                None => {
                    debug!("discarding seq={} from {from}: out of sequence", pkt.seq);
                    report.discards.push(Discard {
                        time: now,
                        seq: pkt.seq,
                        gen_ts: pkt.gen_ts,
                        reason: "out_of_sequence".into(),
                    });
                }
            }
        }
        report.deliveries = monitor.into_log();
        if let Some(path) = out {
            write_csv(path, &report.deliveries)?;
        }
        if let Some(path) = discards_out {
            write_csv(path, &report.discards)?;
        }
        info!(
            "monitor done: {} datagrams, {} kept, {} discarded, {} undecodable",
            report.received,
            report.deliveries.len(),
            report.discards.len(),
            report.decode_errors
        );
        Ok(report)
    }
}

pub fn run_monitor(run: &MonitorRun) -> Result<MonitorReport> {
    MonitorSession::bind(&run.listen)?.run(run.duration, run.out.as_ref(), run.discards_out.as_ref())
}
