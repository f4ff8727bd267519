//! Slotted p-persistent contention with binary exponential backoff.

use std::collections::VecDeque;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::engine::{Engine, Ev, MacStats, Pkt};
use super::trace::{Hop, PacketKind, TraceKind};
use super::{entity_rng, Entity, MultiaccessHop};
use crate::logs::{ns_to_secs, secs_to_ns};

struct Node {
    /// Head is the frame being contended for or transmitted.
    queue: VecDeque<Pkt>,
    retries: u32,
    /// Slot of the current countdown round at which the backoff counter
    /// reaches zero; `None` when not counting down.
    expiry: Option<u64>,
    head_since: u64,
    rng: ChaCha8Rng,
}

pub(super) struct Mac {
    pub(super) cfg: MultiaccessHop,
    nodes: Vec<Node>,
    busy: bool,
    /// Time of slot 0 of the current countdown round.
    round_start: u64,
    version: u64,
    in_tx: Vec<(usize, bool)>,
    slot_ns: u64,
    difs_ns: u64,
    overhead_ns: u64,
    stats: MacStats,
    delay_sum: u64,
}

impl Mac {
    /// `nodes` includes the access point as the last node.
    pub(super) fn new(cfg: MultiaccessHop, nodes: usize, seed: u64) -> Self {
        Self {
            nodes: (0..nodes)
                .map(|i| Node {
                    queue: VecDeque::new(),
                    retries: 0,
                    expiry: None,
                    head_since: 0,
                    rng: entity_rng(seed, Entity::AccessNode(i)),
                })
                .collect(),
            busy: false,
            round_start: 0,
            version: 0,
            in_tx: Vec::new(),
            slot_ns: secs_to_ns(cfg.slot).max(1),
            difs_ns: secs_to_ns(cfg.difs),
            overhead_ns: secs_to_ns(cfg.frame_overhead),
            stats: MacStats::default(),
            delay_sum: 0,
            cfg,
        }
    }

    pub(super) fn access_point(&self) -> usize {
        self.nodes.len() - 1
    }

    pub(super) fn queued(&self) -> impl Iterator<Item = &Pkt> {
        self.nodes.iter().flat_map(|n| n.queue.iter())
    }

    pub(super) fn stats(mut self) -> MacStats {
        let n = self.stats.access_delay_samples;
        self.stats.mean_access_delay = (n > 0).then(|| ns_to_secs(self.delay_sum) / n as f64);
        self.stats
    }

    fn window(&self, retries: u32) -> u32 {
        let cap = 1u64 << self.cfg.max_backoff_exp;
        ((self.cfg.cw_min as u64) << retries.min(32)).min(cap) as u32
    }

    /// Idle slots of the current round already elapsed at `now`.
    fn elapsed_slots(&self, now: u64) -> u64 {
        if self.busy || now <= self.round_start {
            0
        } else {
            (now - self.round_start).div_ceil(self.slot_ns)
        }
    }

    fn draw_backoff(&mut self, n: usize, now: u64) {
        let cw = self.window(self.nodes[n].retries);
        let counter = self.nodes[n].rng.random_range(0..cw) as u64;
        let base = self.elapsed_slots(now);
        self.nodes[n].expiry = Some(base + counter);
    }

    fn frame_ns(&self, pkt: &Pkt) -> u64 {
        self.overhead_ns + secs_to_ns(pkt.bits as f64 / self.cfg.link_rate)
    }
}

impl Engine<'_> {
    fn mac(&mut self) -> &mut Mac {
        self.mac.as_mut().expect("access hop configured")
    }

    pub(super) fn mac_enqueue(&mut self, n: usize, pkt: Pkt) {
        let full = {
            let m = self.mac();
            m.cfg.buffer.is_some_and(|b| m.nodes[n].queue.len() >= b)
        };
        if full {
            self.mac().stats.buffer_drops += 1;
            self.drop_packet(pkt, Hop::Access(n as u32));
            return;
        }
        self.record(TraceKind::Enqueued, &pkt, Hop::Access(n as u32));
        let now = self.now;
        let m = self.mac();
        m.nodes[n].queue.push_back(pkt);
        if m.nodes[n].queue.len() > 1 {
            return;
        }
        m.nodes[n].head_since = now;
        m.nodes[n].retries = 0;
        let idle = !m.busy && now >= m.round_start && m.nodes.iter().all(|x| x.expiry.is_none());
        if idle {
            self.mac_start_tx(vec![n]);
        } else {
            m.draw_backoff(n, now);
            self.mac_schedule_decision();
        }
    }

    fn mac_schedule_decision(&mut self) {
        let now = self.now;
        let m = self.mac();
        if m.busy {
            return;
        }
        let Some(first) = m.nodes.iter().filter_map(|x| x.expiry).min() else {
            return;
        };
        m.version += 1;
        let version = m.version;
        let at = (m.round_start + first * m.slot_ns).max(now);
        self.schedule(at, Ev::MacDecision { version });
    }

    pub(super) fn mac_decision(&mut self, version: u64) {
        let m = self.mac();
        if m.version != version || m.busy {
            return;
        }
        let Some(slot) = m.nodes.iter().filter_map(|x| x.expiry).min() else {
            return;
        };
        let p = m.cfg.persistence;
        let mut txs = Vec::new();
        for (i, node) in m.nodes.iter_mut().enumerate() {
            if node.expiry != Some(slot) {
                continue;
            }
            if p < 1.0 && node.rng.random::<f64>() >= p {
                node.expiry = Some(slot + 1);
            } else {
                node.expiry = None;
                txs.push(i);
            }
        }
        if txs.is_empty() {
            self.mac_schedule_decision();
            return;
        }
        for node in m.nodes.iter_mut() {
            if let Some(e) = node.expiry.as_mut() {
                *e -= slot;
            }
        }
        self.mac_start_tx(txs);
    }

    fn mac_start_tx(&mut self, txs: Vec<usize>) {
        let ap = self.mac().access_point();
        let heads: Vec<Pkt> = {
            let m = self.mac();
            txs.iter().map(|&n| m.nodes[n].queue[0]).collect()
        };
        for (&n, pkt) in txs.iter().zip(&heads) {
            let hop = Hop::Access(n as u32);
            self.record(TraceKind::ServiceStart, pkt, hop);
        }
        let now = self.now;
        let m = self.mac();
        let collided = txs.len() > 1;
        if collided {
            m.stats.collisions += 1;
        }
        let mut airtime = 0;
        m.in_tx.clear();
        for (&n, pkt) in txs.iter().zip(&heads) {
            m.stats.attempts += 1;
            airtime = airtime.max(m.frame_ns(pkt));
            let lost = m.cfg.per_source_loss > 0.0 && m.nodes[n].rng.random::<f64>() < m.cfg.per_source_loss;
            if lost && !collided {
                m.stats.channel_losses += 1;
            }
            debug_assert!(n < ap || pkt.kind == PacketKind::Ack);
            m.in_tx.push((n, !collided && !lost));
        }
        m.busy = true;
        m.version += 1;
        self.schedule(now + airtime, Ev::MacTxEnd);
    }

    pub(super) fn mac_tx_end(&mut self) {
        let now = self.now;
        let warm = self.warm;
        let m = self.mac();
        m.busy = false;
        m.round_start = now + m.difs_ns;
        let ap = m.access_point();
        let finished = std::mem::take(&mut m.in_tx);
        let mut delivered = Vec::new();
        let mut dropped = Vec::new();
        for &(n, ok) in &finished {
            if ok {
                let pkt = m.nodes[n].queue.pop_front().expect("transmitted frame");
                m.stats.successes += 1;
                if n < ap && m.nodes[n].head_since >= warm {
                    m.stats.access_delay_samples += 1;
                    m.delay_sum += now - m.nodes[n].head_since;
                }
                m.nodes[n].retries = 0;
                delivered.push(pkt);
            } else {
                m.nodes[n].retries += 1;
                if m.nodes[n].retries > m.cfg.retry_limit {
                    let pkt = m.nodes[n].queue.pop_front().expect("transmitted frame");
                    m.stats.retry_drops += 1;
                    m.nodes[n].retries = 0;
                    dropped.push((n, pkt));
                }
            }
            if !m.nodes[n].queue.is_empty() {
                if m.nodes[n].retries == 0 {
                    m.nodes[n].head_since = now;
                }
                m.draw_backoff(n, now);
            }
        }
        for pkt in delivered {
            self.forward_from_access(pkt);
        }
        for (n, pkt) in dropped {
            self.drop_packet(pkt, Hop::Access(n as u32));
        }
        self.mac_schedule_decision();
    }
}
