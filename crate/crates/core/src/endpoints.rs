//! Source and monitor state machines.
//!
//! Both are driven by an external event loop that owns the clock. The loop
//! calls [`Source::start`] once, then repeatedly waits until
//! [`Source::next_deadline`] or an incoming ACK, whichever comes first, and
//! feeds the event back in. Every method returns the packets to transmit; the
//! state machines never perform IO themselves.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use log::warn;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::controller::{
    control_step, epoch_length, update_lambda, ControlInputs, ControllerState, ZeroSignPolicy,
};
use crate::estimation::{EpochAccumulator, EstimationError, Estimator, DEFAULT_ALPHA};
use crate::logs::{ns_to_secs, secs_to_ns, Delivery, EpochRecord, SourceEvent, SourceEventKind};
use crate::wire::{AckPacket, UpdatePacket, DEFAULT_PAYLOAD_LEN};

/// Deadlines within this many seconds of `now` count as due. Absorbs the
/// nanosecond rounding of simulated clocks.
pub const TIMER_SLACK: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EndpointError {
    #[error("invalid source configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Estimation(#[from] EstimationError),
    #[error("unknown source mode {0:?} (expected acp+, lazy, constant:<rate> or poisson:<rate>)")]
    UnknownMode(String),
}

/// How a source decides when to generate updates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum SourceMode {
    AcpPlus,
    /// One update in flight: send on each ACK, resend after one smoothed RTT
    /// if the ACK does not come.
    Lazy,
    /// Periodic generation at a fixed rate (updates/s).
    Constant(f64),
    /// Poisson generation at a fixed mean rate (updates/s).
    Poisson(f64),
}

impl SourceMode {
    pub fn label(&self) -> &'static str {
        match self {
            SourceMode::AcpPlus => "acp+",
            SourceMode::Lazy => "lazy",
            SourceMode::Constant(_) => "constant",
            SourceMode::Poisson(_) => "poisson",
        }
    }

    pub fn with_rate(self, rate: f64) -> Self {
        match self {
            SourceMode::Constant(_) => SourceMode::Constant(rate),
            SourceMode::Poisson(_) => SourceMode::Poisson(rate),
            other => other,
        }
    }
}

impl fmt::Display for SourceMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SourceMode::Constant(r) | SourceMode::Poisson(r) => write!(f, "{}:{}", self.label(), r),
            _ => f.write_str(self.label()),
        }
    }
}

impl FromStr for SourceMode {
    type Err = EndpointError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let unknown = || EndpointError::UnknownMode(s.to_owned());
        let rate = |r: &str| -> Result<f64, EndpointError> {
            match r.trim().parse::<f64>() {
                Ok(v) if v > 0.0 && v.is_finite() => Ok(v),
                _ => Err(unknown()),
            }
        };
        match s.trim().to_ascii_lowercase().as_str() {
            "acp+" | "acpplus" | "acp_plus" => Ok(SourceMode::AcpPlus),
            "lazy" => Ok(SourceMode::Lazy),
            other => match other.split_once(':') {
                Some(("constant", r)) => Ok(SourceMode::Constant(rate(r)?)),
                Some(("poisson", r)) => Ok(SourceMode::Poisson(rate(r)?)),
                _ => Err(unknown()),
            },
        }
    }
}

impl TryFrom<String> for SourceMode {
    type Error = EndpointError;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<SourceMode> for String {
    fn from(m: SourceMode) -> Self {
        m.to_string()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SourceConfig {
    pub mode: SourceMode,
    pub payload_len: usize,
    /// EWMA retention weight for the RTT and inter-ACK estimates.
    pub alpha: f64,
    /// Generation rate before the first RTT sample exists. ACP+ ticks at this
    /// rate; Lazy resends at its reciprocal.
    pub initial_rate: f64,
    /// An ACK for `n` also clears every outstanding update older than `n`.
    pub supersede: bool,
    pub zero_sign: ZeroSignPolicy,
    /// Seeds the Poisson generation stream.
    pub seed: u64,
}

impl Default for SourceConfig {
    fn default() -> Self {
        Self {
            mode: SourceMode::AcpPlus,
            payload_len: DEFAULT_PAYLOAD_LEN,
            alpha: DEFAULT_ALPHA,
            initial_rate: 1.0,
            supersede: true,
            zero_sign: ZeroSignPolicy::NegativeSide,
            seed: 0,
        }
    }
}

impl SourceConfig {
    pub fn with_mode(mode: SourceMode) -> Self {
        Self {
            mode,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum AckOutcome {
    /// In-sequence ACK. Lazy sources answer with a fresh update.
    Accepted { rtt: f64, reply: Option<UpdatePacket> },
    /// Not newer than the highest ACK seen; dropped.
    OutOfSequence,
    /// Sequence number or timestamp does not match anything outstanding.
    Violation,
    /// ACK timestamp lies in the source's future.
    ClockAnomaly,
}

pub struct Source {
    cfg: SourceConfig,
    next_seq: u32,
    /// seq -> gen_ts of updates neither acknowledged nor superseded.
    outstanding: BTreeMap<u32, u64>,
    highest_acked: Option<u32>,
    estimator: Estimator,
    controller: ControllerState,
    epoch: EpochAccumulator,
    measuring: bool,
    started: bool,
    next_tick: Option<f64>,
    next_epoch: Option<f64>,
    fallback: Option<f64>,
    last_send: Option<f64>,
    rng: ChaCha8Rng,
    events: Vec<SourceEvent>,
    epochs: Vec<EpochRecord>,
}

impl fmt::Debug for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Source")
            .field("mode", &self.cfg.mode)
            .field("next_seq", &self.next_seq)
            .field("backlog", &self.outstanding.len())
            .field("lambda", &self.controller.lambda)
            .finish_non_exhaustive()
    }
}

impl Source {
    pub fn new(cfg: SourceConfig) -> Result<Self, EndpointError> {
        if !(cfg.initial_rate > 0.0 && cfg.initial_rate.is_finite()) {
            return Err(EndpointError::InvalidConfig(format!(
                "initial_rate must be positive, got {}",
                cfg.initial_rate
            )));
        }
        if let SourceMode::Constant(r) | SourceMode::Poisson(r) = cfg.mode {
            if !(r > 0.0 && r.is_finite()) {
                return Err(EndpointError::InvalidConfig(format!("rate must be positive, got {r}")));
            }
        }
        let estimator = Estimator::new(cfg.alpha)?;
        let mut controller = ControllerState::new(cfg.initial_rate, 0.0);
        controller.zero_sign = cfg.zero_sign;
        Ok(Self {
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            cfg,
            next_seq: 0,
            outstanding: BTreeMap::new(),
            highest_acked: None,
            estimator,
            controller,
            epoch: EpochAccumulator::new(0.0, None, 0),
            measuring: false,
            started: false,
            next_tick: None,
            next_epoch: None,
            fallback: None,
            last_send: None,
            events: Vec::new(),
            epochs: Vec::new(),
        })
    }

    pub fn config(&self) -> &SourceConfig {
        &self.cfg
    }

    pub fn mode(&self) -> SourceMode {
        self.cfg.mode
    }

    pub fn backlog(&self) -> usize {
        self.outstanding.len()
    }

    pub fn outstanding(&self) -> impl Iterator<Item = u32> + '_ {
        self.outstanding.keys().copied()
    }

    pub fn highest_acked(&self) -> Option<u32> {
        self.highest_acked
    }

    /// Number of updates generated so far.
    pub fn sent(&self) -> u32 {
        self.next_seq
    }

    /// Current generation rate. For ACP+ this is the controller's rate.
    pub fn lambda(&self) -> f64 {
        match self.cfg.mode {
            SourceMode::Constant(r) | SourceMode::Poisson(r) => r,
            SourceMode::Lazy => 1.0 / self.lazy_interval(),
            SourceMode::AcpPlus => self.controller.lambda,
        }
    }

    pub fn controller(&self) -> &ControllerState {
        &self.controller
    }

    pub fn estimator(&self) -> &Estimator {
        &self.estimator
    }

    pub fn events(&self) -> &[SourceEvent] {
        &self.events
    }

    pub fn epochs(&self) -> &[EpochRecord] {
        &self.epochs
    }

    pub fn into_logs(self) -> (Vec<SourceEvent>, Vec<EpochRecord>) {
        (self.events, self.epochs)
    }

    /// Opens the session and returns the first update, sent immediately.
    pub fn start(&mut self, now: f64) -> UpdatePacket {
        assert!(!self.started, "source started twice");
        self.started = true;
        self.epoch = EpochAccumulator::new(now, None, 0);
        self.controller.epoch_start = now;
        let pkt = self.on_tick(now);
        match self.cfg.mode {
            SourceMode::AcpPlus => {
                let lambda = self.controller.lambda;
                self.next_tick = Some(now + 1.0 / lambda);
                self.next_epoch = Some(now + epoch_length(lambda));
            }
            SourceMode::Lazy => self.fallback = Some(now + self.lazy_interval()),
            SourceMode::Constant(r) => self.next_tick = Some(now + 1.0 / r),
            SourceMode::Poisson(r) => self.next_tick = Some(now + self.exp_gap(r)),
        }
        pkt
    }

    pub fn next_deadline(&self) -> Option<f64> {
        [self.next_tick, self.next_epoch, self.fallback]
            .into_iter()
            .flatten()
            .min_by(f64::total_cmp)
    }

    /// Fires every timer due at `now`: epoch boundary first, then generation.
    pub fn on_timer(&mut self, now: f64) -> Vec<UpdatePacket> {
        let due = |t: Option<f64>| t.is_some_and(|t| t <= now + TIMER_SLACK);
        let mut out = Vec::new();
        if due(self.next_epoch) {
            self.on_epoch_boundary(now);
        }
        if due(self.next_tick) {
            let scheduled = self.next_tick.unwrap();
            out.push(self.on_tick(now));
            self.next_tick = Some(match self.cfg.mode {
                SourceMode::Poisson(r) => now + self.exp_gap(r),
                SourceMode::Constant(r) => advance(scheduled, 1.0 / r, now),
                _ => advance(scheduled, 1.0 / self.controller.lambda, now),
            });
        }
        if due(self.fallback) {
            out.push(self.on_tick(now));
            self.fallback = Some(now + self.lazy_interval());
        }
        out
    }

    /// Generates one fresh update stamped `now`. Does not touch timers.
    pub fn on_tick(&mut self, now: f64) -> UpdatePacket {
        let seq = self.next_seq;
        self.next_seq = self.next_seq.wrapping_add(1);
        let gen_ts = secs_to_ns(now);
        self.outstanding.insert(seq, gen_ts);
        self.last_send = Some(now);
        let backlog = self.outstanding.len() as u32;
        // pushes are time-ordered because the driving loop is
        let _ = self.epoch.push_backlog(now, backlog);
        self.events.push(SourceEvent {
            time: now,
            kind: SourceEventKind::Send,
            seq,
            gen_ts,
            rtt: None,
            backlog,
        });
        UpdatePacket::new(seq, gen_ts, self.cfg.payload_len)
    }

    pub fn on_ack(&mut self, ack: &AckPacket, now: f64) -> AckOutcome {
        if self.highest_acked.is_some_and(|h| ack.seq <= h) {
            self.log_event(now, SourceEventKind::Discard, ack, None);
            return AckOutcome::OutOfSequence;
        }
        if self.outstanding.get(&ack.seq) != Some(&ack.gen_ts) {
            warn!(
                "protocol violation: ACK seq={} gen_ts={} matches no outstanding update",
                ack.seq, ack.gen_ts
            );
            self.log_event(now, SourceEventKind::Violation, ack, None);
            return AckOutcome::Violation;
        }
        let rtt = match self.estimator.record_ack(now, ns_to_secs(ack.gen_ts)) {
            Ok(rtt) => rtt,
            Err(e) => {
                warn!("dropping ACK seq={}: {e}", ack.seq);
                return AckOutcome::ClockAnomaly;
            }
        };

        if self.cfg.supersede {
            let mut newer = self.outstanding.split_off(&ack.seq);
            newer.remove(&ack.seq);
            self.outstanding = newer;
        } else {
            self.outstanding.remove(&ack.seq);
        }
        self.highest_acked = Some(ack.seq);
        let backlog = self.outstanding.len() as u32;
        self.log_event(now, SourceEventKind::Ack, ack, Some(rtt));

        let mut reply = None;
        match self.cfg.mode {
            SourceMode::AcpPlus if !self.measuring => self.begin_measuring(now, rtt),
            SourceMode::Lazy => {
                if self.outstanding.is_empty() {
                    reply = Some(self.on_tick(now));
                    self.fallback = Some(now + self.lazy_interval());
                }
            }
            _ => {
                let _ = self.epoch.push_ack(now, rtt);
                let _ = self.epoch.push_backlog(now, backlog);
            }
        }
        AckOutcome::Accepted { rtt, reply }
    }

    /// The first RTT sample sets the initial rate to one update per RTT and
    /// opens the first measurement epoch.
    fn begin_measuring(&mut self, now: f64, rtt: f64) {
        self.measuring = true;
        let lambda = 1.0 / self.estimator.rtt_bar().unwrap_or(rtt).max(1e-9);
        let c = &mut self.controller;
        c.lambda = lambda;
        c.epoch_length = epoch_length(lambda);
        c.epoch_start = now;
        self.epoch = EpochAccumulator::new(now, None, self.outstanding.len() as u32);
        let _ = self.epoch.push_ack(now, rtt);
        self.next_epoch = Some(now + c.epoch_length);
        self.next_tick = Some(now + 1.0 / lambda);
    }

    /// Closes the current control epoch at `now` and, for ACP+, runs one
    /// control step. Returns the diagnostic row, or `None` for non-ACP+
    /// sources.
    pub fn on_epoch_boundary(&mut self, now: f64) -> Option<EpochRecord> {
        if self.cfg.mode != SourceMode::AcpPlus {
            return None;
        }
        // An epoch without ACKs reuses the previous averages.
        let (age, backlog) = match (self.epoch.age_average(now), self.epoch.backlog_average(now)) {
            (Ok(a), Ok(b)) => (Some(a), Some(b)),
            _ => (self.controller.prev_age_avg, self.controller.prev_backlog_avg),
        };

        let mut record = EpochRecord {
            k: self.controller.epoch_index,
            t_k: now,
            lambda: self.controller.lambda,
            action: "NONE".into(),
            b_star: None,
            b_k: None,
            delta_k: None,
            flag: self.controller.flag,
            gamma: self.controller.gamma,
        };

        if let (true, Some(pa), Some(pb), Some(a), Some(b)) = (
            self.measuring,
            self.controller.prev_age_avg,
            self.controller.prev_backlog_avg,
            age,
            backlog,
        ) {
            let inputs = ControlInputs {
                backlog_change: b - pb,
                age_change: a - pa,
                backlog_avg: b,
            };
            let (action, mut next) = control_step(&self.controller, &inputs);
            if let (Some(z), Some(rtt)) = (self.estimator.z_bar(), self.estimator.rtt_bar()) {
                match update_lambda(next.lambda, z, rtt, action.target) {
                    Ok(l) => next.lambda = l,
                    Err(e) => warn!("rate held: {e}"),
                }
            }
            self.controller = next;
            record.lambda = self.controller.lambda;
            record.action = action.kind.to_string();
            record.b_star = Some(action.target);
            record.b_k = Some(inputs.backlog_change);
            record.delta_k = Some(inputs.age_change);
            record.flag = self.controller.flag;
            record.gamma = self.controller.gamma;
        }

        let c = &mut self.controller;
        if self.measuring {
            c.prev_age_avg = age;
            c.prev_backlog_avg = backlog;
        }
        c.epoch_index += 1;
        c.epoch_length = epoch_length(c.lambda);
        c.epoch_start = now;
        self.epoch = self.epoch.roll(now);
        self.next_epoch = Some(now + c.epoch_length);
        let gap = 1.0 / c.lambda;
        self.next_tick = Some(self.last_send.map_or(now + gap, |t| (t + gap).max(now)));
        self.epochs.push(record.clone());
        Some(record)
    }

    fn lazy_interval(&self) -> f64 {
        self.estimator
            .rtt_bar()
            .filter(|&r| r > 0.0)
            .unwrap_or(1.0 / self.cfg.initial_rate)
    }

    fn exp_gap(&mut self, rate: f64) -> f64 {
        Exp::new(rate).expect("rate validated").sample(&mut self.rng)
    }

    fn log_event(&mut self, now: f64, kind: SourceEventKind, ack: &AckPacket, rtt: Option<f64>) {
        self.events.push(SourceEvent {
            time: now,
            kind,
            seq: ack.seq,
            gen_ts: ack.gen_ts,
            rtt,
            backlog: self.outstanding.len() as u32,
        });
    }
}

/// Next periodic deadline after `scheduled`, keeping phase unless the loop
/// has fallen a whole interval behind.
fn advance(scheduled: f64, interval: f64, now: f64) -> f64 {
    let next = scheduled + interval;
    if next > now {
        next
    } else {
        now + interval
    }
}

/// The receiving end: keeps only updates fresher than anything seen so far
/// and acknowledges each of them.
#[derive(Debug, Clone, Default)]
pub struct Monitor {
    highest_seq: Option<u32>,
    deliveries: Vec<Delivery>,
    discarded: u64,
}

impl Monitor {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn on_update(&mut self, pkt: &UpdatePacket, now: f64) -> Option<AckPacket> {
        if self.highest_seq.is_some_and(|h| pkt.seq <= h) {
            self.discarded += 1;
            return None;
        }
        self.highest_seq = Some(pkt.seq);
        self.deliveries.push(Delivery {
            receive_time: now,
            seq: pkt.seq,
            gen_ts: pkt.gen_ts,
        });
        Some(pkt.ack())
    }

    pub fn highest_seq(&self) -> Option<u32> {
        self.highest_seq
    }

    pub fn deliveries(&self) -> &[Delivery] {
        &self.deliveries
    }

    pub fn discarded(&self) -> u64 {
        self.discarded
    }

    pub fn into_log(self) -> Vec<Delivery> {
        self.deliveries
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn acp() -> Source {
        Source::new(SourceConfig::default()).unwrap()
    }

    fn ack_for(p: &UpdatePacket) -> AckPacket {
        p.ack()
    }

    #[test]
    fn mode_parsing() {
        assert_eq!("acp+".parse::<SourceMode>().unwrap(), SourceMode::AcpPlus);
        assert_eq!("LAZY".parse::<SourceMode>().unwrap(), SourceMode::Lazy);
        assert_eq!(
            "constant:100".parse::<SourceMode>().unwrap(),
            SourceMode::Constant(100.0)
        );
        assert_eq!(
            "poisson:2.5".parse::<SourceMode>().unwrap(),
            SourceMode::Poisson(2.5)
        );
        assert!("constant:0".parse::<SourceMode>().is_err());
        assert!("tcp".parse::<SourceMode>().is_err());
        assert_eq!(SourceMode::Constant(100.0).to_string(), "constant:100");
    }

    #[test]
    fn fresh_session_first_packet() {
        let mut s = acp();
        let p = s.start(0.0);
        assert_eq!(p.seq, 0);
        assert_eq!(p.payload.len(), DEFAULT_PAYLOAD_LEN);
        assert_eq!(s.backlog(), 1);
        assert_eq!(s.events()[0].backlog, 1);
    }

    #[test]
    fn constant_rate_tick_spacing() {
        let mut s = Source::new(SourceConfig::with_mode(SourceMode::Constant(100.0))).unwrap();
        s.start(0.0);
        let mut times = vec![0.0];
        for _ in 0..5 {
            let t = s.next_deadline().unwrap();
            assert_eq!(s.on_timer(t).len(), 1);
            times.push(t);
        }
        for w in times.windows(2) {
            assert!((w[1] - w[0] - 0.01).abs() < 1e-12);
        }
        assert_eq!(s.backlog(), 6);
    }

    #[test]
    fn outstanding_counts_unacked_sends() {
        let mut s = Source::new(SourceConfig::with_mode(SourceMode::Constant(10.0))).unwrap();
        s.start(0.0);
        for i in 1..5 {
            s.on_tick(i as f64 * 0.1);
        }
        assert_eq!(s.backlog(), 5);
    }

    #[test]
    fn out_of_sequence_ack_discarded() {
        let mut s = Source::new(SourceConfig::with_mode(SourceMode::Constant(10.0))).unwrap();
        let mut pkts = vec![s.start(0.0)];
        for i in 1..8 {
            pkts.push(s.on_tick(i as f64 * 0.01));
        }
        assert!(matches!(
            s.on_ack(&ack_for(&pkts[7]), 0.2),
            AckOutcome::Accepted { .. }
        ));
        let before = s.estimator().clone();
        assert_eq!(s.on_ack(&ack_for(&pkts[5]), 0.21), AckOutcome::OutOfSequence);
        assert_eq!(s.estimator(), &before);
        assert_eq!(s.highest_acked(), Some(7));
    }

    #[test]
    fn ack_supersedes_older_updates() {
        let mut s = Source::new(SourceConfig::with_mode(SourceMode::Constant(10.0))).unwrap();
        let mut pkts = vec![s.start(0.0)];
        for i in 1..6 {
            pkts.push(s.on_tick(i as f64 * 0.01));
        }
        s.on_ack(&ack_for(&pkts[2]), 0.1);
        assert_eq!(s.outstanding().collect::<Vec<_>>(), vec![3, 4, 5]);
        s.on_ack(&ack_for(&pkts[5]), 0.12);
        assert_eq!(s.backlog(), 0);
    }

    #[test]
    fn without_supersession_only_the_acked_update_leaves() {
        let cfg = SourceConfig {
            supersede: false,
            ..SourceConfig::with_mode(SourceMode::Constant(10.0))
        };
        let mut s = Source::new(cfg).unwrap();
        let mut pkts = vec![s.start(0.0)];
        for i in 1..4 {
            pkts.push(s.on_tick(i as f64 * 0.01));
        }
        s.on_ack(&ack_for(&pkts[2]), 0.1);
        assert_eq!(s.outstanding().collect::<Vec<_>>(), vec![0, 1, 3]);
    }

    #[test]
    fn ack_for_unsent_update_is_violation() {
        let mut s = acp();
        s.start(0.0);
        let bogus = AckPacket { seq: 9, gen_ts: 5 };
        assert_eq!(s.on_ack(&bogus, 0.1), AckOutcome::Violation);
        assert_eq!(s.backlog(), 1);
        assert_eq!(s.events().last().unwrap().kind, SourceEventKind::Violation);
        // right seq, wrong timestamp
        let wrong_ts = AckPacket { seq: 0, gen_ts: 77 };
        assert_eq!(s.on_ack(&wrong_ts, 0.1), AckOutcome::Violation);
    }

    #[test]
    fn ack_from_the_future_is_rejected() {
        let mut s = acp();
        let p = s.start(1.0);
        assert_eq!(s.on_ack(&p.ack(), 0.5), AckOutcome::ClockAnomaly);
        assert_eq!(s.backlog(), 1);
    }

    #[test]
    fn first_ack_sets_rate_to_inverse_rtt() {
        let mut s = acp();
        let p = s.start(0.0);
        s.on_ack(&p.ack(), 0.1);
        assert!((s.lambda() - 10.0).abs() < 1e-9);
        assert!((s.controller().epoch_length - 1.0).abs() < 1e-9);
        assert!((s.next_deadline().unwrap() - 0.2).abs() < 1e-9);
    }

    /// Drives a source over a lossless pipe whose RTT depends on the send time.
    fn run_path(s: &mut Source, rtt: impl Fn(f64) -> f64, until: f64) {
        let mut inflight: Vec<(f64, AckPacket)> = vec![(rtt(0.0), s.start(0.0).ack())];
        loop {
            inflight.sort_by(|a, b| a.0.total_cmp(&b.0));
            let timer = s.next_deadline().unwrap_or(f64::INFINITY);
            let ack_at = inflight.first().map_or(f64::INFINITY, |a| a.0);
            let now = timer.min(ack_at);
            if now > until {
                break;
            }
            if ack_at <= timer {
                let (_, ack) = inflight.remove(0);
                if let AckOutcome::Accepted { reply: Some(p), .. } = s.on_ack(&ack, now) {
                    inflight.push((now + rtt(now), p.ack()));
                }
            } else {
                for p in s.on_timer(now) {
                    inflight.push((now + rtt(now), p.ack()));
                }
            }
        }
    }

    fn run_fixed_delay(s: &mut Source, rtt: f64, until: f64) {
        run_path(s, |_| rtt, until);
    }

    #[test]
    fn epoch_length_tracks_rate() {
        let mut s = acp();
        run_fixed_delay(&mut s, 0.05, 20.0);
        assert!(s.epochs().len() > 5);
        let c = s.controller();
        assert!((c.epoch_length - 10.0 / c.lambda).abs() < 1e-12);
        for w in s.epochs().windows(2) {
            let ratio = w[1].lambda / w[0].lambda;
            assert!((0.75 - 1e-12..=1.25 + 1e-12).contains(&ratio));
        }
    }

    #[test]
    fn identical_epochs_take_the_decrease_branch() {
        // An epoch with no ACKs reuses the previous averages: b = δ = 0.
        let mut s = acp();
        let p = s.start(0.0);
        s.on_ack(&p.ack(), 0.1);
        let t1 = s.next_deadline_epoch();
        s.on_epoch_boundary(t1);
        // keep feeding nothing: next boundary has no ACKs
        let t2 = s.next_deadline_epoch();
        let rec = s.on_epoch_boundary(t2).unwrap();
        assert_eq!(rec.action, "DEC");
        assert_eq!(rec.b_k, Some(0.0));
        assert_eq!(rec.delta_k, Some(0.0));
    }

    impl Source {
        fn next_deadline_epoch(&self) -> f64 {
            self.next_epoch.unwrap()
        }
    }

    #[test]
    fn mdec_engages_on_second_bad_epoch() {
        // A queue building up: RTT grows steeply, so age and backlog both
        // rise epoch over epoch.
        let mut s = acp();
        run_path(&mut s, |t| 0.1 + 0.3 * t, 4.0);
        let actions: Vec<&str> = s.epochs().iter().map(|e| e.action.as_str()).collect();
        assert_eq!(actions[0], "NONE");
        assert_eq!(actions[1], "DEC");
        assert_eq!(actions[2], "MDEC(1)", "{actions:?}");
        assert!(s.epochs()[2].b_star.unwrap() < -0.0);
    }

    #[test]
    fn lazy_bootstrap_and_ack_clocking() {
        let mut s = Source::new(SourceConfig::with_mode(SourceMode::Lazy)).unwrap();
        let p0 = s.start(0.0);
        assert_eq!(s.backlog(), 1);
        let AckOutcome::Accepted { reply: Some(p1), .. } = s.on_ack(&p0.ack(), 0.1) else {
            panic!("lazy must answer an ACK with a fresh update");
        };
        assert_eq!(p1.seq, 1);
        assert_eq!(s.backlog(), 1);
        assert!((s.next_deadline().unwrap() - 0.2).abs() < 1e-12);
    }

    #[test]
    fn lazy_fallback_replaces_lost_update() {
        let mut s = Source::new(SourceConfig::with_mode(SourceMode::Lazy)).unwrap();
        let p0 = s.start(0.0);
        s.on_ack(&p0.ack(), 0.1); // sends seq 1 at t=0.1
        // ACK for seq 1 is lost; fallback fires one RTT later
        let t = s.next_deadline().unwrap();
        assert!((t - 0.2).abs() < 1e-12);
        let sent = s.on_timer(t);
        assert_eq!(sent.len(), 1);
        assert_eq!(sent[0].seq, 2);
        assert_eq!(s.backlog(), 2);
        // ACK for seq 2 supersedes seq 1 and clocks out seq 3
        let out = s.on_ack(&sent[0].ack(), 0.3);
        assert!(matches!(out, AckOutcome::Accepted { reply: Some(ref p), .. } if p.seq == 3));
        assert_eq!(s.backlog(), 1);
    }

    #[test]
    fn lazy_backlog_averages_one() {
        let mut s = Source::new(SourceConfig::with_mode(SourceMode::Lazy)).unwrap();
        run_fixed_delay(&mut s, 0.02, 4.0);
        let ev = s.events();
        // time-average backlog over the last 100 RTTs
        let (t0, t1) = (2.0, 4.0);
        let mut area = 0.0;
        for w in ev.windows(2) {
            let (a, b) = (w[0].time.max(t0), w[1].time.min(t1));
            if b > a {
                area += w[0].backlog as f64 * (b - a);
            }
        }
        let avg = area / (t1 - t0);
        assert!((0.5..=1.5).contains(&avg), "{avg}");
    }

    #[test]
    fn monitor_discards_stale_updates() {
        let mut m = Monitor::new();
        let p = |seq| UpdatePacket::new(seq, seq as u64 * 10, 0);
        assert!(m.on_update(&p(0), 0.1).is_some());
        assert!(m.on_update(&p(2), 0.2).is_some());
        assert!(m.on_update(&p(1), 0.3).is_none());
        assert!(m.on_update(&p(2), 0.4).is_none());
        assert_eq!(m.deliveries().len(), 2);
        assert_eq!(m.discarded(), 2);
        let ack = m.on_update(&p(3), 0.5).unwrap();
        assert_eq!((ack.seq, ack.gen_ts), (3, 30));
    }

    #[test]
    fn monitor_in_order_acks_all() {
        let mut m = Monitor::new();
        for seq in 0..3 {
            assert!(m.on_update(&UpdatePacket::new(seq, seq as u64, 0), seq as f64).is_some());
        }
        assert_eq!(m.deliveries().len(), 3);
    }
}
