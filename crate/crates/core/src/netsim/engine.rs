use std::cmp::{Ordering, Reverse};
use std::collections::{BinaryHeap, VecDeque};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};
use serde::Serialize;

use super::mac::Mac;
use super::trace::{Hop, PacketKind, TraceKind, TraceRecord};
use super::{entity_rng, Entity, ReversePath, Service, SimConfig, SimError, Station};
use crate::endpoints::{AckOutcome, Monitor, Source, SourceConfig};
use crate::logs::{ns_to_secs, secs_to_ns, Delivery, EpochRecord, SourceEvent};
use crate::wire::{AckPacket, UpdatePacket};

/// Per-source packet accounting over the whole run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct Counters {
    pub generated: u64,
    /// Updates that reached the monitor, including ones it discarded.
    pub delivered: u64,
    pub dropped: u64,
    /// Updates still inside the network when the run ended.
    pub in_flight: u64,
    pub monitor_discards: u64,
    pub acks_sent: u64,
    pub acks_delivered: u64,
    pub acks_dropped: u64,
    pub source_discards: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct MacStats {
    pub attempts: u64,
    pub successes: u64,
    /// Slots in which two or more nodes transmitted.
    pub collisions: u64,
    /// Frames lost on the air without a collision.
    pub channel_losses: u64,
    pub retry_drops: u64,
    pub buffer_drops: u64,
    /// Mean time from reaching the head of a source's queue to the end of
    /// its successful transmission, after warm-up. Seconds.
    pub mean_access_delay: Option<f64>,
    pub access_delay_samples: u64,
}

#[derive(Debug, Clone)]
pub struct SourceOutput {
    pub config: SourceConfig,
    pub events: Vec<SourceEvent>,
    pub epochs: Vec<EpochRecord>,
    pub deliveries: Vec<Delivery>,
    pub counters: Counters,
    /// Time-average number of this source's updates inside the network over
    /// the post-warm-up window.
    pub occupancy_avg: f64,
}

#[derive(Debug, Clone)]
pub struct SimOutput {
    pub sources: Vec<SourceOutput>,
    /// Empty unless the config asked for a trace.
    pub trace: Vec<TraceRecord>,
    pub mac: Option<MacStats>,
    /// Post-warm-up window, seconds.
    pub horizon: (f64, f64),
}

/// Runs one simulation to completion.
pub fn run_simulation(cfg: &SimConfig) -> Result<SimOutput, SimError> {
    cfg.validate()?;
    let mut engine = Engine::new(cfg)?;
    engine.run();
    Ok(engine.finish())
}

#[derive(Debug, Clone, Copy)]
pub(super) struct Pkt {
    pub source: u32,
    pub kind: PacketKind,
    pub seq: u32,
    pub gen_ts: u64,
    pub bits: u64,
}

#[derive(Debug)]
pub(super) enum Ev {
    Start { source: usize },
    Timer { source: usize, version: u64 },
    Arrive { hop: Hop, pkt: Pkt },
    ServiceDone { station: usize, kind: PacketKind },
    MacDecision { version: u64 },
    MacTxEnd,
}

#[derive(Debug)]
struct Scheduled {
    time: u64,
    id: u64,
    ev: Ev,
}

impl PartialEq for Scheduled {
    fn eq(&self, other: &Self) -> bool {
        (self.time, self.id) == (other.time, other.id)
    }
}

impl Eq for Scheduled {}

impl PartialOrd for Scheduled {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Scheduled {
    fn cmp(&self, other: &Self) -> Ordering {
        (self.time, self.id).cmp(&(other.time, other.id))
    }
}

struct Server {
    /// Head is in service.
    queue: VecDeque<Pkt>,
    station: Station,
    rng: ChaCha8Rng,
}

impl Server {
    fn service_ns(&mut self, bits: u64) -> u64 {
        let mean = bits as f64 / self.station.service.rate();
        let secs = match self.station.service {
            Service::Deterministic { .. } => mean,
            Service::Exponential { .. } => {
                let x: f64 = Exp1.sample(&mut self.rng);
                x * mean
            }
        };
        secs_to_ns(secs)
    }
}

/// Integral of a step function clipped to a window.
#[derive(Debug, Default)]
struct Occupancy {
    level: u64,
    last: u64,
    area: f64,
}

impl Occupancy {
    fn advance(&mut self, now: u64, window: (u64, u64)) {
        let a = self.last.max(window.0);
        let b = now.min(window.1);
        if b > a {
            self.area += self.level as f64 * (b - a) as f64;
        }
        self.last = now;
    }
}

struct Slot {
    source: Source,
    monitor: Monitor,
    timer_version: u64,
    timer_at: Option<u64>,
    counters: Counters,
    occupancy: Occupancy,
    update_bits: u64,
}

pub(super) struct Engine<'a> {
    pub(super) cfg: &'a SimConfig,
    pub(super) now: u64,
    end: u64,
    pub(super) warm: u64,
    heap: BinaryHeap<Reverse<Scheduled>>,
    next_id: u64,
    slots: Vec<Slot>,
    forward: Vec<Server>,
    reverse: Vec<Server>,
    pub(super) mac: Option<Mac>,
    trace: Option<Vec<TraceRecord>>,
    ack_bits: u64,
}

impl<'a> Engine<'a> {
    fn new(cfg: &'a SimConfig) -> Result<Self, SimError> {
        let end = secs_to_ns(cfg.duration);
        let warm = secs_to_ns(cfg.duration * cfg.warmup_fraction);
        let mut slots = Vec::with_capacity(cfg.sources.len());
        let mut starts = Vec::with_capacity(cfg.sources.len());
        for (i, sc) in cfg.sources.iter().enumerate() {
            let mut rng = entity_rng(cfg.seed, Entity::Source(i));
            let mut sc = sc.clone();
            sc.seed = rng.random();
            let jitter = if cfg.start_jitter > 0.0 {
                rng.random_range(0.0..cfg.start_jitter)
            } else {
                0.0
            };
            starts.push(secs_to_ns(jitter));
            let update_bits = cfg.update_bits(sc.payload_len);
            let source = Source::new(sc).map_err(|e| SimError::Source {
                index: i,
                message: e.to_string(),
            })?;
            slots.push(Slot {
                source,
                monitor: Monitor::new(),
                timer_version: 0,
                timer_at: None,
                counters: Counters::default(),
                occupancy: Occupancy::default(),
                update_bits,
            });
        }
        let server = |s: &Station, e: Entity| Server {
            queue: VecDeque::new(),
            station: *s,
            rng: entity_rng(cfg.seed, e),
        };
        let forward = cfg
            .stations
            .iter()
            .enumerate()
            .map(|(i, s)| server(s, Entity::StationForward(i)))
            .collect();
        let reverse = cfg
            .stations
            .iter()
            .enumerate()
            .map(|(i, s)| server(s, Entity::StationReverse(i)))
            .collect();
        let mac = cfg
            .multiaccess
            .map(|m| Mac::new(m, cfg.sources.len() + 1, cfg.seed));
        let mut engine = Self {
            cfg,
            now: 0,
            end,
            warm,
            heap: BinaryHeap::new(),
            next_id: 0,
            slots,
            forward,
            reverse,
            mac,
            trace: cfg.record_trace.then(Vec::new),
            ack_bits: cfg.ack_bits(),
        };
        for (i, t) in starts.into_iter().enumerate() {
            engine.schedule(t, Ev::Start { source: i });
        }
        Ok(engine)
    }

    pub(super) fn schedule(&mut self, time: u64, ev: Ev) {
        let id = self.next_id;
        self.next_id += 1;
        self.heap.push(Reverse(Scheduled { time, id, ev }));
    }

    fn run(&mut self) {
        while let Some(Reverse(next)) = self.heap.peek() {
            if next.time > self.end {
                break;
            }
            let Reverse(Scheduled { time, ev, .. }) = self.heap.pop().unwrap();
            self.now = time;
            match ev {
                Ev::Start { source } => {
                    let pkt = self.slots[source].source.start(ns_to_secs(time));
                    self.inject(source, pkt);
                    self.reschedule_timer(source, false);
                }
                Ev::Timer { source, version } => {
                    if self.slots[source].timer_version != version {
                        continue;
                    }
                    self.slots[source].timer_at = None;
                    let pkts = self.slots[source].source.on_timer(ns_to_secs(time));
                    for pkt in pkts {
                        self.inject(source, pkt);
                    }
                    self.reschedule_timer(source, true);
                }
                Ev::Arrive { hop, pkt } => self.arrive(hop, pkt),
                Ev::ServiceDone { station, kind } => self.service_done(station, kind),
                Ev::MacDecision { version } => self.mac_decision(version),
                Ev::MacTxEnd => self.mac_tx_end(),
            }
        }
        self.now = self.end;
    }

    fn reschedule_timer(&mut self, i: usize, just_fired: bool) {
        let now = self.now;
        let slot = &mut self.slots[i];
        let Some(deadline) = slot.source.next_deadline() else {
            slot.timer_at = None;
            return;
        };
        let mut at = secs_to_ns(deadline).max(now);
        if just_fired && at == now {
            at = now + 1;
        }
        if slot.timer_at == Some(at) {
            return;
        }
        slot.timer_version += 1;
        slot.timer_at = Some(at);
        let version = slot.timer_version;
        self.schedule(at, Ev::Timer { source: i, version });
    }

    pub(super) fn record(&mut self, kind: TraceKind, pkt: &Pkt, hop: Hop) {
        if let Some(trace) = &mut self.trace {
            trace.push(TraceRecord {
                time_ns: self.now,
                source: pkt.source,
                kind,
                packet: pkt.kind,
                seq: pkt.seq,
                hop,
            });
        }
    }

    fn occupancy_change(&mut self, source: usize, up: bool) {
        let window = (self.warm, self.end);
        let occ = &mut self.slots[source].occupancy;
        occ.advance(self.now, window);
        if up {
            occ.level += 1;
        } else {
            occ.level -= 1;
        }
    }

    fn inject(&mut self, i: usize, update: UpdatePacket) {
        let pkt = Pkt {
            source: i as u32,
            kind: PacketKind::Update,
            seq: update.seq,
            gen_ts: update.gen_ts,
            bits: self.slots[i].update_bits,
        };
        self.slots[i].counters.generated += 1;
        self.occupancy_change(i, true);
        self.record(TraceKind::Generated, &pkt, Hop::Source);
        if self.mac.is_some() {
            self.mac_enqueue(i, pkt);
        } else {
            self.station_arrive(0, pkt);
        }
    }

    fn arrive(&mut self, hop: Hop, pkt: Pkt) {
        match hop {
            Hop::Station(j) => self.station_arrive(j as usize, pkt),
            Hop::Access(n) => self.mac_enqueue(n as usize, pkt),
            Hop::Monitor => self.at_monitor(pkt),
            Hop::Source => self.at_source(pkt),
        }
    }

    fn server(&mut self, station: usize, kind: PacketKind) -> &mut Server {
        match kind {
            PacketKind::Update => &mut self.forward[station],
            PacketKind::Ack => &mut self.reverse[station],
        }
    }

    fn station_arrive(&mut self, j: usize, pkt: Pkt) {
        let server = self.server(j, pkt.kind);
        if server.station.buffer.is_some_and(|b| server.queue.len() >= b) {
            self.drop_packet(pkt, Hop::Station(j as u32));
            return;
        }
        server.queue.push_back(pkt);
        let start = server.queue.len() == 1;
        self.record(TraceKind::Enqueued, &pkt, Hop::Station(j as u32));
        if start {
            self.start_service(j, pkt.kind);
        }
    }

    fn start_service(&mut self, j: usize, kind: PacketKind) {
        let server = self.server(j, kind);
        let pkt = *server.queue.front().expect("service starts on a non-empty queue");
        let dur = server.service_ns(pkt.bits);
        self.record(TraceKind::ServiceStart, &pkt, Hop::Station(j as u32));
        self.schedule(self.now + dur, Ev::ServiceDone { station: j, kind });
    }

    fn service_done(&mut self, j: usize, kind: PacketKind) {
        let server = self.server(j, kind);
        let pkt = server.queue.pop_front().expect("completion without a packet in service");
        let more = !server.queue.is_empty();
        let prop = secs_to_ns(server.station.prop_delay);
        let last = self.forward.len() - 1;
        let next = match kind {
            PacketKind::Update if j < last => Hop::Station(j as u32 + 1),
            PacketKind::Update => Hop::Monitor,
            PacketKind::Ack if j > 0 => Hop::Station(j as u32 - 1),
            PacketKind::Ack => match &self.mac {
                Some(m) => Hop::Access(m.access_point() as u32),
                None => Hop::Source,
            },
        };
        self.schedule(self.now + prop, Ev::Arrive { hop: next, pkt });
        if more {
            self.start_service(j, kind);
        }
    }

    fn at_monitor(&mut self, pkt: Pkt) {
        let i = pkt.source as usize;
        self.record(TraceKind::Delivered, &pkt, Hop::Monitor);
        self.slots[i].counters.delivered += 1;
        self.occupancy_change(i, false);
        let update = UpdatePacket {
            seq: pkt.seq,
            gen_ts: pkt.gen_ts,
            payload: Vec::new(),
        };
        let now = ns_to_secs(self.now);
        let Some(ack) = self.slots[i].monitor.on_update(&update, now) else {
            self.slots[i].counters.monitor_discards += 1;
            return;
        };
        self.slots[i].counters.acks_sent += 1;
        let ack = Pkt {
            source: pkt.source,
            kind: PacketKind::Ack,
            seq: ack.seq,
            gen_ts: ack.gen_ts,
            bits: self.ack_bits,
        };
        match self.cfg.reverse {
            ReversePath::Instantaneous => self.schedule(
                self.now,
                Ev::Arrive {
                    hop: Hop::Source,
                    pkt: ack,
                },
            ),
            ReversePath::Symmetric => self.station_arrive(self.reverse.len() - 1, ack),
        }
    }

    fn at_source(&mut self, pkt: Pkt) {
        let i = pkt.source as usize;
        self.record(TraceKind::AckDelivered, &pkt, Hop::Source);
        self.slots[i].counters.acks_delivered += 1;
        let ack = AckPacket {
            seq: pkt.seq,
            gen_ts: pkt.gen_ts,
        };
        match self.slots[i].source.on_ack(&ack, ns_to_secs(self.now)) {
            AckOutcome::Accepted { reply: Some(update), .. } => self.inject(i, update),
            AckOutcome::OutOfSequence => self.slots[i].counters.source_discards += 1,
            _ => {}
        }
        self.reschedule_timer(i, false);
    }

    pub(super) fn drop_packet(&mut self, pkt: Pkt, hop: Hop) {
        self.record(TraceKind::Dropped, &pkt, hop);
        let i = pkt.source as usize;
        match pkt.kind {
            PacketKind::Update => {
                self.slots[i].counters.dropped += 1;
                self.occupancy_change(i, false);
            }
            PacketKind::Ack => self.slots[i].counters.acks_dropped += 1,
        }
    }

    pub(super) fn forward_from_access(&mut self, pkt: Pkt) {
        let prop = secs_to_ns(self.mac.as_ref().map_or(0.0, |m| m.cfg.prop_delay));
        let hop = match pkt.kind {
            PacketKind::Update => Hop::Station(0),
            PacketKind::Ack => Hop::Source,
        };
        self.schedule(self.now + prop, Ev::Arrive { hop, pkt });
    }

    fn finish(self) -> SimOutput {
        let mut in_flight = vec![0u64; self.slots.len()];
        let mut count = |p: &Pkt| {
            if p.kind == PacketKind::Update {
                in_flight[p.source as usize] += 1;
            }
        };
        self.forward.iter().flat_map(|s| s.queue.iter()).for_each(&mut count);
        if let Some(mac) = &self.mac {
            mac.queued().for_each(&mut count);
        }
        for Reverse(s) in self.heap.iter() {
            if let Ev::Arrive { pkt, .. } = &s.ev {
                count(pkt);
            }
        }

        let window = (self.warm, self.end);
        let span = (self.end - self.warm) as f64;
        let sources = self
            .slots
            .into_iter()
            .zip(in_flight)
            .map(|(mut slot, in_flight)| {
                slot.occupancy.advance(self.end, window);
                slot.counters.in_flight = in_flight;
                let config = slot.source.config().clone();
                let (events, epochs) = slot.source.into_logs();
                SourceOutput {
                    config,
                    events,
                    epochs,
                    deliveries: slot.monitor.into_log(),
                    counters: slot.counters,
                    occupancy_avg: if span > 0.0 { slot.occupancy.area / span } else { 0.0 },
                }
            })
            .collect();
        SimOutput {
            sources,
            trace: self.trace.unwrap_or_default(),
            mac: self.mac.map(|m| m.stats()),
            horizon: (ns_to_secs(self.warm), ns_to_secs(self.end)),
        }
    }
}
