//! Deterministic discrete-event network simulator.
//!
//! A path is an optional shared access hop followed by a tandem of FCFS
//! stations. Each station is a duplex link: updates travel the forward
//! server, ACKs the reverse one, both with the station's service law, buffer
//! and propagation delay. Every source talks to its own monitor across the
//! shared path.
//!
//! Simulated time is integer nanoseconds and ties are broken by scheduling
//! order, so a configuration and seed always produce the same run. Each
//! random entity (source, station direction, access node) draws from its own
//! ChaCha stream keyed by `(seed, entity)`, so adding a source leaves the
//! others' randomness untouched.

mod curves;
mod engine;
mod mac;
mod trace;

pub use curves::{
    dd1_system_time, mm1_system_time, mm1k_system_time, rtt_vs_load_curve, sweep_min_age, Arrivals, LoadPoint,
    MinAgePoint, MinAgeResult, MinAgeSweep, DEFAULT_CURVE_PACKETS,
};
pub use engine::{run_simulation, Counters, MacStats, SimOutput, SourceOutput};
pub use trace::{Hop, PacketKind, TraceKind, TraceRecord};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::endpoints::SourceConfig;
use crate::metrics::DEFAULT_WARMUP_FRACTION;
use crate::wire::{ACK_LEN, UPDATE_HEADER_LEN};

/// UDP plus IPv4 header bytes added to every datagram on the wire.
pub const IP_UDP_OVERHEAD: usize = 28;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("invalid simulation config: {0}")]
    InvalidConfig(String),
    #[error("source {index}: {message}")]
    Source { index: usize, message: String },
}

fn invalid(msg: impl Into<String>) -> SimError {
    SimError::InvalidConfig(msg.into())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Service {
    /// Every packet takes `bits / rate` seconds.
    Deterministic { rate: f64 },
    /// Exponential service time with mean `bits / rate` seconds.
    Exponential { rate: f64 },
}

impl Service {
    pub fn rate(&self) -> f64 {
        match *self {
            Service::Deterministic { rate } | Service::Exponential { rate } => rate,
        }
    }
}

/// One FCFS link. Rates are bits per second.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Station {
    pub service: Service,
    /// Packets the station holds including the one in service; `None` is
    /// unbounded. Arrivals to a full station are dropped.
    #[serde(default)]
    pub buffer: Option<usize>,
    /// Propagation delay after service, seconds.
    #[serde(default)]
    pub prop_delay: f64,
}

impl Station {
    pub fn deterministic(rate: f64) -> Self {
        Self {
            service: Service::Deterministic { rate },
            buffer: None,
            prop_delay: 0.0,
        }
    }

    pub fn exponential(rate: f64) -> Self {
        Self {
            service: Service::Exponential { rate },
            buffer: None,
            prop_delay: 0.0,
        }
    }

    pub fn with_buffer(mut self, buffer: usize) -> Self {
        self.buffer = Some(buffer);
        self
    }

    pub fn with_prop_delay(mut self, prop_delay: f64) -> Self {
        self.prop_delay = prop_delay;
        self
    }

    fn validate(&self, what: &str) -> Result<(), SimError> {
        let rate = self.service.rate();
        if !(rate > 0.0 && rate.is_finite()) {
            return Err(invalid(format!("{what}: service rate must be positive, got {rate}")));
        }
        if self.buffer == Some(0) {
            return Err(invalid(format!("{what}: buffer must hold at least one packet")));
        }
        if !(self.prop_delay >= 0.0 && self.prop_delay.is_finite()) {
            return Err(invalid(format!("{what}: negative propagation delay")));
        }
        Ok(())
    }
}

/// A shared contention channel in front of the tandem.
///
/// Time is slotted. A node with a frame and an idle channel transmits at
/// once; otherwise it draws a backoff counter uniformly from `[0, CW)` and
/// counts down idle slots, frozen while the channel is busy. At zero it
/// transmits with probability `persistence`, else defers one more slot. Two
/// or more transmissions in the same slot collide. A failed attempt doubles
/// `CW` (from `cw_min` up to `2^max_backoff_exp`); after `retry_limit`
/// retries the frame is dropped.
///
/// The access point is one more contender and carries the ACKs back to the
/// sources.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MultiaccessHop {
    /// Bits per second.
    pub link_rate: f64,
    /// Seconds.
    pub slot: f64,
    /// Idle time the channel must see before countdown resumes, seconds.
    pub difs: f64,
    pub persistence: f64,
    pub cw_min: u32,
    pub max_backoff_exp: u32,
    pub retry_limit: u32,
    /// Probability that a frame to or from a source is lost on the air,
    /// standing in for shadowing.
    pub per_source_loss: f64,
    /// Fixed airtime added to every frame (preamble, MAC acknowledgement),
    /// seconds.
    pub frame_overhead: f64,
    /// Per-node transmit queue, packets.
    pub buffer: Option<usize>,
    pub prop_delay: f64,
}

impl Default for MultiaccessHop {
    fn default() -> Self {
        Self {
            link_rate: 12e6,
            slot: 9e-6,
            difs: 34e-6,
            persistence: 1.0,
            cw_min: 16,
            max_backoff_exp: 10,
            retry_limit: 7,
            per_source_loss: 0.0,
            frame_overhead: 0.0,
            buffer: Some(100),
            prop_delay: 1e-6,
        }
    }
}

impl MultiaccessHop {
    fn validate(&self) -> Result<(), SimError> {
        if !(self.link_rate > 0.0 && self.link_rate.is_finite()) {
            return Err(invalid("multiaccess link rate must be positive"));
        }
        if !(self.slot > 0.0) {
            return Err(invalid("multiaccess slot must be positive"));
        }
        if !(self.persistence > 0.0 && self.persistence <= 1.0) {
            return Err(invalid("multiaccess persistence must lie in (0, 1]"));
        }
        if !(0.0..1.0).contains(&self.per_source_loss) {
            return Err(invalid("per-source loss must lie in [0, 1)"));
        }
        if self.cw_min == 0 || self.max_backoff_exp > 20 || (1u32 << self.max_backoff_exp) < self.cw_min {
            return Err(invalid("backoff window must satisfy 1 <= cw_min <= 2^max_backoff_exp <= 2^20"));
        }
        if self.buffer == Some(0) {
            return Err(invalid("multiaccess buffer must hold at least one packet"));
        }
        if !(self.difs >= 0.0 && self.frame_overhead >= 0.0 && self.prop_delay >= 0.0) {
            return Err(invalid("multiaccess timings must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReversePath {
    /// ACKs cross the same stations (and access hop) backwards.
    #[default]
    Symmetric,
    /// ACKs reach the source the instant the monitor emits them.
    Instantaneous,
}

#[derive(Debug, Clone)]
pub struct SimConfig {
    /// One entry per source. The per-source `seed` is replaced by a stream
    /// derived from [`SimConfig::seed`].
    pub sources: Vec<SourceConfig>,
    pub multiaccess: Option<MultiaccessHop>,
    pub stations: Vec<Station>,
    pub reverse: ReversePath,
    /// Seconds.
    pub duration: f64,
    /// Leading share of the run left out of occupancy and access-delay
    /// averages.
    pub warmup_fraction: f64,
    pub seed: u64,
    /// Each source starts at a uniform offset in `[0, start_jitter)` seconds.
    pub start_jitter: f64,
    pub ip_overhead: usize,
    pub record_trace: bool,
}

impl SimConfig {
    pub fn new(sources: Vec<SourceConfig>, stations: Vec<Station>, duration: f64) -> Self {
        Self {
            sources,
            multiaccess: None,
            stations,
            reverse: ReversePath::Symmetric,
            duration,
            warmup_fraction: DEFAULT_WARMUP_FRACTION,
            seed: 0,
            start_jitter: 0.0,
            ip_overhead: IP_UDP_OVERHEAD,
            record_trace: false,
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return Err(invalid(format!("duration must be positive, got {}", self.duration)));
        }
        if self.sources.is_empty() {
            return Err(invalid("at least one source is required"));
        }
        if self.stations.is_empty() {
            return Err(invalid("at least one station is required"));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(invalid("warmup fraction must lie in [0, 1)"));
        }
        if !(self.start_jitter >= 0.0 && self.start_jitter < self.duration) {
            return Err(invalid("start jitter must lie in [0, duration)"));
        }
        for (i, s) in self.stations.iter().enumerate() {
            s.validate(&format!("station {i}"))?;
        }
        if let Some(m) = &self.multiaccess {
            m.validate()?;
        }
        Ok(())
    }

    pub fn update_bits(&self, payload_len: usize) -> u64 {
        ((payload_len + UPDATE_HEADER_LEN + self.ip_overhead) * 8) as u64
    }

    pub fn ack_bits(&self) -> u64 {
        ((ACK_LEN + self.ip_overhead) * 8) as u64
    }
}

/// Random stream families.
#[derive(Debug, Clone, Copy)]
pub(crate) enum Entity {
    Source(usize),
    StationForward(usize),
    StationReverse(usize),
    AccessNode(usize),
    Curve(usize),
}

/// The independent stream for one simulated entity.
pub(crate) fn entity_rng(seed: u64, entity: Entity) -> ChaCha8Rng {
    let (family, index) = match entity {
        Entity::Source(i) => (1u64, i),
        Entity::StationForward(i) => (2, i),
        Entity::StationReverse(i) => (3, i),
        Entity::AccessNode(i) => (4, i),
        Entity::Curve(i) => (5, i),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((family << 48) | index as u64);
    rng
}
