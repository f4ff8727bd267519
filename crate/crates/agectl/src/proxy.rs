//! In-path emulator that delays and drops datagrams between a source and
//! its monitor.
//!
//! The proxy listens for the source on one socket and talks to the monitor
//! from a second one; replies are relayed to the most recent source
//! address. Each direction has a receiving thread that samples loss and
//! delay and a releasing thread that sends packets when they fall due.

use std::cmp::Reverse;
use std::collections::BinaryHeap;
use std::net::{SocketAddr, UdpSocket};
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use anyhow::{bail, Context, Result};
use log::{debug, info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use agectl_core::wire::MAX_DATAGRAM;

use crate::transport::resolve;

/// Environment variable that overrides [`ProxyConfig::seed`].
pub const SEED_ENV: &str = "AGECTL_SEED";

const POLL: Duration = Duration::from_millis(20);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Delay {
    Constant { secs: f64 },
    Exponential { mean: f64 },
}

impl Delay {
    pub fn none() -> Self {
        Delay::Constant { secs: 0.0 }
    }

    fn mean(&self) -> f64 {
        match *self {
            Delay::Constant { secs } => secs,
            Delay::Exponential { mean } => mean,
        }
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> f64 {
        match *self {
            Delay::Constant { secs } => secs,
            Delay::Exponential { mean } if mean > 0.0 => Exp::new(1.0 / mean).expect("positive rate").sample(rng),
            Delay::Exponential { .. } => 0.0,
        }
    }
}

/// Delay law named on the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DelayDist {
    #[default]
    Constant,
    Exponential,
}

impl DelayDist {
    pub fn with_mean(self, secs: f64) -> Delay {
        match self {
            DelayDist::Constant => Delay::Constant { secs },
            DelayDist::Exponential => Delay::Exponential { mean: secs },
        }
    }
}

impl FromStr for DelayDist {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "constant" | "const" => Ok(DelayDist::Constant),
            "exponential" | "exp" => Ok(DelayDist::Exponential),
            other => Err(format!("unknown delay distribution {other:?} (constant or exponential)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Direction {
    pub delay: Delay,
    pub loss: f64,
}

impl Direction {
    pub fn new(delay: Delay, loss: f64) -> Self {
        Self { delay, loss }
    }
}

impl Default for Direction {
    fn default() -> Self {
        Self::new(Delay::none(), 0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProxyConfig {
    /// Address the source sends to.
    pub listen: String,
    /// The monitor's address.
    pub upstream: String,
    /// Source to monitor.
    pub forward: Direction,
    /// Monitor to source.
    pub reverse: Direction,
    /// Let a packet with a shorter sampled delay overtake earlier ones.
    pub reorder: bool,
    pub seed: u64,
}

impl ProxyConfig {
    pub fn new(listen: impl Into<String>, upstream: impl Into<String>) -> Self {
        Self {
            listen: listen.into(),
            upstream: upstream.into(),
            forward: Direction::default(),
            reverse: Direction::default(),
            reorder: false,
            seed: 0,
        }
    }

    /// Same delay and loss in both directions.
    pub fn symmetric(mut self, dir: Direction) -> Self {
        self.forward = dir;
        self.reverse = dir;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        for (name, d) in [("forward", &self.forward), ("reverse", &self.reverse)] {
            let mean = d.delay.mean();
            if !(mean >= 0.0 && mean.is_finite()) {
                bail!("{name} delay must be non-negative");
            }
            if !(0.0..1.0).contains(&d.loss) {
                bail!("{name} loss probability must lie in [0, 1)");
            }
        }
        Ok(())
    }

    /// The configured seed, unless `AGECTL_SEED` holds a valid one.
    pub fn effective_seed(&self) -> u64 {
        match std::env::var(SEED_ENV) {
            Ok(v) => v.trim().parse().unwrap_or_else(|_| {
                warn!("ignoring unparsable {SEED_ENV}={v:?}");
                self.seed
            }),
            Err(_) => self.seed,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct DirectionStats {
    pub received: u64,
    pub dropped: u64,
    pub forwarded: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct ProxyStats {
    pub forward: DirectionStats,
    pub reverse: DirectionStats,
}

#[derive(Default)]
struct Counts {
    received: AtomicU64,
    dropped: AtomicU64,
    forwarded: AtomicU64,
}

impl Counts {
    fn snapshot(&self) -> DirectionStats {
        DirectionStats {
            received: self.received.load(Ordering::Relaxed),
            dropped: self.dropped.load(Ordering::Relaxed),
            forwarded: self.forwarded.load(Ordering::Relaxed),
        }
    }
}

struct Held {
    due: Instant,
    order: u64,
    bytes: Vec<u8>,
}

impl PartialEq for Held {
    fn eq(&self, other: &Self) -> bool {
        (self.due, self.order) == (other.due, other.order)
    }
}
impl Eq for Held {}
impl PartialOrd for Held {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Held {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.due, self.order).cmp(&(other.due, other.order))
    }
}

/// Where the releasing thread of a direction sends its packets.
#[derive(Clone)]
enum Target {
    Fixed(SocketAddr),
    /// The last address the source spoke from.
    Latest(Arc<Mutex<Option<SocketAddr>>>),
}

impl Target {
    fn get(&self) -> Option<SocketAddr> {
        match self {
            Target::Fixed(a) => Some(*a),
            Target::Latest(a) => *a.lock().unwrap(),
        }
    }
}

/// A running proxy. Dropping the handle stops it.
pub struct ProxyHandle {
    local: SocketAddr,
    stop: Arc<AtomicBool>,
    threads: Vec<JoinHandle<()>>,
    forward: Arc<Counts>,
    reverse: Arc<Counts>,
}

impl ProxyHandle {
    /// The address sources should send to.
    pub fn local_addr(&self) -> SocketAddr {
        self.local
    }

    pub fn stats(&self) -> ProxyStats {
        ProxyStats {
            forward: self.forward.snapshot(),
            reverse: self.reverse.snapshot(),
        }
    }

    /// Stops all threads, discarding packets still in the delay line.
    pub fn stop(mut self) -> ProxyStats {
        self.shutdown();
        self.stats()
    }

    fn shutdown(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }
}

impl Drop for ProxyHandle {
    fn drop(&mut self) {
        self.shutdown();
    }
}

/// Binds the proxy sockets and starts forwarding in the background.
pub fn spawn_proxy(cfg: &ProxyConfig) -> Result<ProxyHandle> {
    cfg.validate()?;
    let listen = resolve(&cfg.listen)?;
    let upstream = resolve(&cfg.upstream)?;
    let outer = UdpSocket::bind(listen).with_context(|| format!("binding {listen}"))?;
    let inner_bind: SocketAddr = if upstream.is_ipv4() { "0.0.0.0:0" } else { "[::]:0" }.parse().unwrap();
    let inner = UdpSocket::bind(inner_bind).context("binding upstream socket")?;
    let local = outer.local_addr()?;
    let seed = cfg.effective_seed();
    info!("proxy {local} <-> {upstream} seed {seed}");

    let stop = Arc::new(AtomicBool::new(false));
    let client = Arc::new(Mutex::new(None));
    let forward = Arc::new(Counts::default());
    let reverse = Arc::new(Counts::default());
    let mut threads = Vec::new();

    let lanes = [
        (
            outer.try_clone()?,
            inner.try_clone()?,
            Target::Fixed(upstream),
            cfg.forward,
            forward.clone(),
            Some(client.clone()),
            0u64,
        ),
        (
            inner,
            outer,
            Target::Latest(client),
            cfg.reverse,
            reverse.clone(),
            None,
            1u64,
        ),
    ];
    for (rx, tx, target, dir, counts, learn, stream) in lanes {
        let (queue_tx, queue_rx) = mpsc::channel();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        let stop_rx = stop.clone();
        let counts_rx = counts.clone();
        let reorder = cfg.reorder;
        threads.push(thread::spawn(move || {
            receive_loop(rx, dir, reorder, rng, learn, queue_tx, counts_rx, stop_rx)
        }));
        let stop_tx = stop.clone();
        threads.push(thread::spawn(move || release_loop(tx, target, queue_rx, counts, stop_tx)));
    }
    Ok(ProxyHandle {
        local,
        stop,
        threads,
        forward,
        reverse,
    })
}

#[allow(clippy::too_many_arguments)]
fn receive_loop(
    socket: UdpSocket,
    dir: Direction,
    reorder: bool,
    mut rng: ChaCha8Rng,
    learn: Option<Arc<Mutex<Option<SocketAddr>>>>,
    queue: Sender<Held>,
    counts: Arc<Counts>,
    stop: Arc<AtomicBool>,
) {
    let _ = socket.set_read_timeout(Some(POLL));
    let mut buf = vec![0u8; MAX_DATAGRAM];
    let mut order = 0u64;
    let mut last_due: Option<Instant> = None;
    while !stop.load(Ordering::Relaxed) {
        let (n, from) = match socket.recv_from(&mut buf) {
            Ok(x) => x,
            Err(e) if matches!(e.kind(), std::io::ErrorKind::WouldBlock | std::io::ErrorKind::TimedOut) => continue,
            Err(e) if e.kind() == std::io::ErrorKind::ConnectionRefused => continue,
            Err(e) => {
                warn!("proxy receive failed: {e}");
                break;
            }
        };
        let arrived = Instant::now();
        counts.received.fetch_add(1, Ordering::Relaxed);
        if let Some(client) = &learn {
            *client.lock().unwrap() = Some(from);
        }
        if dir.loss > 0.0 && rng.random::<f64>() < dir.loss {
            counts.dropped.fetch_add(1, Ordering::Relaxed);
            continue;
        }
        let mut due = arrived + Duration::from_secs_f64(dir.delay.sample(&mut rng));
        if !reorder {
            if let Some(prev) = last_due {
                due = due.max(prev);
            }
            last_due = Some(due);
        }
        order += 1;
        let held = Held {
            due,
            order,
            bytes: buf[..n].to_vec(),
        };
        if queue.send(held).is_err() {
            break;
        }
    }
}

fn release_loop(socket: UdpSocket, target: Target, queue: Receiver<Held>, counts: Arc<Counts>, stop: Arc<AtomicBool>) {
    let mut line: BinaryHeap<Reverse<Held>> = BinaryHeap::new();
    loop {
        if stop.load(Ordering::Relaxed) {
            break;
        }
        let now = Instant::now();
        while line.peek().is_some_and(|Reverse(h)| h.due <= now) {
            let Reverse(h) = line.pop().unwrap();
            match target.get() {
                Some(addr) => match socket.send_to(&h.bytes, addr) {
                    Ok(_) => {
                        counts.forwarded.fetch_add(1, Ordering::Relaxed);
                    }
                    Err(e) => debug!("proxy send to {addr} failed: {e}"),
                },
                None => debug!("no peer known yet; dropping reply"),
            }
        }
        let wait = line
            .peek()
            .map_or(POLL, |Reverse(h)| h.due.saturating_duration_since(Instant::now()).min(POLL));
        match queue.recv_timeout(wait) {
            Ok(h) => line.push(Reverse(h)),
            Err(RecvTimeoutError::Timeout) => {}
            Err(RecvTimeoutError::Disconnected) => {
                if line.is_empty() {
                    break;
                }
                thread::sleep(wait);
            }
        }
    }
}

/// Runs a proxy in the foreground for `duration` seconds, or until the
/// process is killed when `None`.
pub fn run_proxy(cfg: &ProxyConfig, duration: Option<f64>) -> Result<ProxyStats> {
    let handle = spawn_proxy(cfg)?;
    match duration {
        Some(d) => thread::sleep(Duration::from_secs_f64(d.max(0.0))),
        None => loop {
            thread::park();
        },
    }
    let stats = handle.stop();
    info!("proxy stats: {stats:?}");
    Ok(stats)
}
