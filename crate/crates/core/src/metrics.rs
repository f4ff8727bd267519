//! Offline evaluation: age-of-information traces, run summaries and Jain's
//! fairness index.
//!
//! Age at the monitor is a sawtooth. When an update generated at `g` arrives
//! at `r`, the age drops to `r - g`; between arrivals it grows at slope 1.
//! In simulation `r` and `g` share one clock, so the reset value is the
//! one-way delay. Live runs only trust the source clock, so the ACK arrival
//! time stands in for `r` and the reset value becomes the round-trip time.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::logs::{ns_to_secs, CsvRecord, Delivery, SourceEvent, SourceEventKind};

/// Fraction of a run discarded as warm-up by default.
pub const DEFAULT_WARMUP_FRACTION: f64 = 0.1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("no deliveries to build an age trace from")]
    Empty,
    #[error("delivery at {time} precedes the previous one")]
    OutOfOrder { time: f64 },
    #[error("delivery at {time} carries an update older than the previous delivery")]
    Stale { time: f64 },
    #[error("delivery at {time} arrives before it was generated (age {age})")]
    NegativeAge { time: f64, age: f64 },
    #[error("empty horizon [{t0}, {t1}]")]
    EmptyHorizon { t0: f64, t1: f64 },
    #[error("trace starts at {start}, after the horizon start {t0}")]
    NotCovered { t0: f64, start: f64 },
    #[error("fairness needs finite non-negative values with at least one positive")]
    DegenerateFairness,
}

/// Which clock the age resets come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgeMode {
    /// Monitor receive time minus generation time (simulation).
    #[default]
    OneWay,
    /// ACK receive time minus generation time, both on the source clock.
    Rtt,
}

/// Piecewise-linear age: resets at the listed instants, slope 1 in between.
#[derive(Debug, Clone, PartialEq)]
pub struct AgeTrace {
    /// `(time, age just after the reset)`, time-ordered.
    resets: Vec<(f64, f64)>,
}

/// One vertex of an exported age trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgePoint {
    pub time: f64,
    pub age: f64,
}

impl CsvRecord for AgePoint {
    const HEADER: &'static [&'static str] = &["time", "age"];
}

impl AgeTrace {
    /// Builds the sawtooth from `(receive_time, gen_time)` pairs in seconds.
    pub fn from_deliveries<I>(deliveries: I) -> Result<Self, MetricsError>
    where
        I: IntoIterator<Item = (f64, f64)>,
    {
        let mut resets: Vec<(f64, f64)> = Vec::new();
        let mut last_gen = f64::NEG_INFINITY;
        for (r, g) in deliveries {
            let age = r - g;
            if age < 0.0 {
                return Err(MetricsError::NegativeAge { time: r, age });
            }
            if let Some(&(prev, _)) = resets.last() {
                if r < prev {
                    return Err(MetricsError::OutOfOrder { time: r });
                }
            }
            if g <= last_gen {
                return Err(MetricsError::Stale { time: r });
            }
            last_gen = g;
            resets.push((r, age));
        }
        if resets.is_empty() {
            return Err(MetricsError::Empty);
        }
        Ok(Self { resets })
    }

    /// Trace of a monitor's delivery log.
    pub fn from_monitor_log(log: &[Delivery]) -> Result<Self, MetricsError> {
        Self::from_deliveries(log.iter().map(|d| (d.receive_time, ns_to_secs(d.gen_ts))))
    }

    /// Trace seen from the source: each accepted ACK resets age to its RTT.
    pub fn from_source_log(events: &[SourceEvent]) -> Result<Self, MetricsError> {
        Self::from_deliveries(
            events
                .iter()
                .filter(|e| e.kind == SourceEventKind::Ack)
                .map(|e| (e.time, ns_to_secs(e.gen_ts))),
        )
    }

    pub fn start(&self) -> f64 {
        self.resets[0].0
    }

    pub fn resets(&self) -> &[(f64, f64)] {
        &self.resets
    }

    /// Age at `t`, or `None` before the first delivery. At a reset instant
    /// the post-reset value is returned.
    pub fn age_at(&self, t: f64) -> Option<f64> {
        let idx = self.resets.partition_point(|&(time, _)| time <= t);
        let (time, age) = *self.resets.get(idx.checked_sub(1)?)?;
        Some(age + (t - time))
    }

    /// Exact time average of age over `[t0, t1]`.
    pub fn time_average(&self, t0: f64, t1: f64) -> Result<f64, MetricsError> {
        if !(t1 > t0) {
            return Err(MetricsError::EmptyHorizon { t0, t1 });
        }
        let start = self.start();
        if t0 < start {
            return Err(MetricsError::NotCovered { t0, start });
        }
        let first = self.resets.partition_point(|&(time, _)| time <= t0) - 1;
        let mut area = 0.0;
        for (i, &(time, age)) in self.resets.iter().enumerate().skip(first) {
            let seg_end = self.resets.get(i + 1).map_or(t1, |&(next, _)| next.min(t1));
            let a = time.max(t0);
            if seg_end <= a {
                if time >= t1 {
                    break;
                }
                continue;
            }
            let age_a = age + (a - time);
            let age_b = age + (seg_end - time);
            area += 0.5 * (age_a + age_b) * (seg_end - a);
        }
        Ok(area / (t1 - t0))
    }

    /// Vertices of the sawtooth over `[t0, t1]`: the peak just before each
    /// reset followed by the reset value, bracketed by the horizon ends.
    pub fn points(&self, t0: f64, t1: f64) -> Vec<AgePoint> {
        let mut out = Vec::new();
        if let Some(age) = self.age_at(t0) {
            out.push(AgePoint { time: t0, age });
        }
        for (i, &(time, age)) in self.resets.iter().enumerate() {
            if time <= t0 || time > t1 {
                continue;
            }
            if i > 0 {
                let (pt, pa) = self.resets[i - 1];
                out.push(AgePoint {
                    time,
                    age: pa + (time - pt),
                });
            }
            out.push(AgePoint { time, age });
        }
        if let Some(age) = self.age_at(t1) {
            out.push(AgePoint { time: t1, age });
        }
        out
    }
}

/// Jain's fairness index `(Σx)² / (n Σx²)`.
pub fn jain(values: &[f64]) -> Result<f64, MetricsError> {
    if values.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(MetricsError::DegenerateFairness);
    }
    let sum: f64 = values.iter().sum();
    let sq: f64 = values.iter().map(|v| v * v).sum();
    if sq <= 0.0 {
        return Err(MetricsError::DegenerateFairness);
    }
    Ok(sum * sum / (values.len() as f64 * sq))
}

/// Steady-state window `[warmup * duration, duration]`.
pub fn horizon(duration: f64, warmup_fraction: f64) -> (f64, f64) {
    (duration * warmup_fraction, duration)
}

/// Per-source statistics over a horizon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryStats {
    pub mode: AgeMode,
    /// Time-average age, seconds. `None` when nothing was delivered before
    /// the horizon end.
    pub avg_age: Option<f64>,
    /// Mean one-way delay (or RTT in [`AgeMode::Rtt`]) of delivered updates.
    pub avg_delay: Option<f64>,
    /// Delivered payload bits per second.
    pub throughput: f64,
    pub avg_inter_delivery: Option<f64>,
    pub delivered_count: usize,
    /// Share of updates generated in the horizon that were never delivered;
    /// superseded updates count as lost.
    pub loss_fraction: f64,
    /// Time-average source backlog.
    pub backlog_avg: f64,
    /// Mean RTT of accepted ACKs.
    pub avg_rtt: Option<f64>,
    pub avg_inter_ack: Option<f64>,
    pub sent: usize,
}

/// Summarizes one source-monitor pair over `[t0, t1]`.
///
/// Deliveries and ACKs count when they arrive inside the horizon; loss
/// compares updates generated inside the horizon with those of them that
/// were delivered. Age is averaged from the later of `t0` and the first
/// delivery.
pub fn summarize(
    events: &[SourceEvent],
    deliveries: &[Delivery],
    (t0, t1): (f64, f64),
    payload_len: usize,
    mode: AgeMode,
) -> Result<SummaryStats, MetricsError> {
    if !(t1 > t0) {
        return Err(MetricsError::EmptyHorizon { t0, t1 });
    }
    let in_window = |t: f64| t >= t0 && t <= t1;
    let acks: Vec<&SourceEvent> = events.iter().filter(|e| e.kind == SourceEventKind::Ack).collect();

    // (arrival time, gen time) of whatever counts as a delivery in this mode.
    let arrivals: Vec<(f64, f64)> = match mode {
        AgeMode::OneWay => deliveries
            .iter()
            .map(|d| (d.receive_time, ns_to_secs(d.gen_ts)))
            .collect(),
        AgeMode::Rtt => acks.iter().map(|e| (e.time, ns_to_secs(e.gen_ts))).collect(),
    };
    let window: Vec<(f64, f64)> = arrivals.iter().copied().filter(|&(r, _)| in_window(r)).collect();

    let avg_age = match AgeTrace::from_deliveries(arrivals.iter().copied()) {
        Ok(trace) if trace.start() < t1 => Some(trace.time_average(t0.max(trace.start()), t1)?),
        Ok(_) | Err(MetricsError::Empty) => None,
        Err(e) => return Err(e),
    };

    let ack_times: Vec<f64> = acks.iter().map(|e| e.time).filter(|&t| in_window(t)).collect();
    let rtts: Vec<f64> = acks
        .iter()
        .filter(|e| in_window(e.time))
        .filter_map(|e| e.rtt)
        .collect();

    let generated: Vec<f64> = events
        .iter()
        .filter(|e| e.kind == SourceEventKind::Send)
        .map(|e| ns_to_secs(e.gen_ts))
        .filter(|&g| in_window(g))
        .collect();
    let delivered_of_generated = arrivals.iter().filter(|&&(_, g)| in_window(g)).count();
    let loss_fraction = if generated.is_empty() {
        0.0
    } else {
        (1.0 - delivered_of_generated as f64 / generated.len() as f64).clamp(0.0, 1.0)
    };

    let receive_times: Vec<f64> = window.iter().map(|&(r, _)| r).collect();
    Ok(SummaryStats {
        mode,
        avg_age,
        avg_delay: mean(window.iter().map(|&(r, g)| r - g)),
        throughput: window.len() as f64 * payload_len as f64 * 8.0 / (t1 - t0),
        avg_inter_delivery: mean_gap(&receive_times),
        delivered_count: window.len(),
        loss_fraction,
        backlog_avg: backlog_average(events, t0, t1),
        avg_rtt: mean(rtts.iter().copied()),
        avg_inter_ack: mean_gap(&ack_times),
        sent: generated.len(),
    })
}

/// Time average of the backlog recorded after each source event.
pub fn backlog_average(events: &[SourceEvent], t0: f64, t1: f64) -> f64 {
    let mut level = 0.0;
    let mut at = t0;
    let mut area = 0.0;
    for e in events {
        if e.time > t1 {
            break;
        }
        if e.time > at {
            area += level * (e.time - at);
            at = e.time;
        }
        level = e.backlog as f64;
    }
    area += level * (t1 - at);
    area / (t1 - t0)
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

fn mean_gap(times: &[f64]) -> Option<f64> {
    (times.len() >= 2).then(|| (times[times.len() - 1] - times[0]) / (times.len() - 1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::logs::secs_to_ns;
    use proptest::prelude::*;

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() <= 1e-9 * b.abs().max(1.0)
    }

    #[test]
    fn three_delivery_sawtooth() {
        let trace = AgeTrace::from_deliveries([(0.5, 0.0), (1.5, 1.0), (2.5, 2.0)]).unwrap();
        assert_eq!(trace.age_at(0.5), Some(0.5));
        assert!(close(trace.age_at(1.5 - 1e-12).unwrap(), 1.5));
        assert_eq!(trace.age_at(1.5), Some(0.5));
        assert!(close(trace.time_average(0.5, 2.5).unwrap(), 1.0));
    }

    #[test]
    fn zero_delay_period_gives_half_period() {
        let tau = 0.04;
        let trace = AgeTrace::from_deliveries((0..=100).map(|i| (i as f64 * tau, i as f64 * tau))).unwrap();
        assert!(close(trace.time_average(0.0, 100.0 * tau).unwrap(), tau / 2.0));
    }

    #[test]
    fn single_delivery_ramps_to_horizon() {
        let trace = AgeTrace::from_deliveries([(1.0, 0.8)]).unwrap();
        // age 0.2 at t=1 rising to 2.2 at t=3
        assert!(close(trace.time_average(1.0, 3.0).unwrap(), 1.2));
    }

    #[test]
    fn constant_age_trace() {
        // Updates generated continuously with a fixed 0.3 s delay; a dense
        // enough delivery stream approaches a constant age of 0.3.
        let dt = 1e-4;
        let trace =
            AgeTrace::from_deliveries((0..10_001).map(|i| (i as f64 * dt + 0.3, i as f64 * dt))).unwrap();
        let avg = trace.time_average(0.3, 1.3).unwrap();
        assert!((avg - (0.3 + dt / 2.0)).abs() < 1e-9);
    }

    #[test]
    fn trace_errors() {
        assert_eq!(AgeTrace::from_deliveries([]), Err(MetricsError::Empty));
        assert!(matches!(
            AgeTrace::from_deliveries([(1.0, 1.5)]),
            Err(MetricsError::NegativeAge { .. })
        ));
        assert!(matches!(
            AgeTrace::from_deliveries([(2.0, 1.0), (1.5, 1.2)]),
            Err(MetricsError::OutOfOrder { .. })
        ));
        assert!(matches!(
            AgeTrace::from_deliveries([(2.0, 1.0), (2.5, 1.0)]),
            Err(MetricsError::Stale { .. })
        ));
        let trace = AgeTrace::from_deliveries([(1.0, 0.5)]).unwrap();
        assert!(matches!(trace.time_average(0.5, 2.0), Err(MetricsError::NotCovered { .. })));
        assert!(matches!(trace.time_average(2.0, 2.0), Err(MetricsError::EmptyHorizon { .. })));
    }

    #[test]
    fn horizon_inside_one_segment() {
        let trace = AgeTrace::from_deliveries([(0.0, 0.0), (10.0, 9.0)]).unwrap();
        // age = t on [2, 4]
        assert!(close(trace.time_average(2.0, 4.0).unwrap(), 3.0));
    }

    #[test]
    fn exported_points_trace_the_sawtooth() {
        let trace = AgeTrace::from_deliveries([(0.5, 0.0), (1.5, 1.0)]).unwrap();
        let pts = trace.points(0.5, 2.0);
        let pairs: Vec<(f64, f64)> = pts.iter().map(|p| (p.time, p.age)).collect();
        assert_eq!(pairs, vec![(0.5, 0.5), (1.5, 1.5), (1.5, 0.5), (2.0, 1.0)]);
    }

    #[test]
    fn jain_examples() {
        assert!(close(jain(&[3.0, 3.0, 3.0]).unwrap(), 1.0));
        assert!(close(jain(&[1.0, 0.0, 0.0, 0.0]).unwrap(), 0.25));
        assert_eq!(jain(&[0.0, 0.0]), Err(MetricsError::DegenerateFairness));
        assert_eq!(jain(&[]), Err(MetricsError::DegenerateFairness));
        assert_eq!(jain(&[1.0, -1.0]), Err(MetricsError::DegenerateFairness));
    }

    fn send(t: f64, seq: u32, backlog: u32) -> SourceEvent {
        SourceEvent {
            time: t,
            kind: SourceEventKind::Send,
            seq,
            gen_ts: secs_to_ns(t),
            rtt: None,
            backlog,
        }
    }

    fn ack(t: f64, seq: u32, gen: f64, backlog: u32) -> SourceEvent {
        SourceEvent {
            time: t,
            kind: SourceEventKind::Ack,
            seq,
            gen_ts: secs_to_ns(gen),
            rtt: Some(t - gen),
            backlog,
        }
    }

    /// Sends every 10 ms, delivered after `delay`, ACKed after `2 * delay`.
    fn periodic(n: u32, delay: f64) -> (Vec<SourceEvent>, Vec<Delivery>) {
        let mut events = Vec::new();
        let mut deliveries = Vec::new();
        for i in 0..n {
            let g = i as f64 * 0.01;
            events.push(send(g, i, 1));
            events.push(ack(g + 2.0 * delay, i, g, 0));
            deliveries.push(Delivery {
                receive_time: g + delay,
                seq: i,
                gen_ts: secs_to_ns(g),
            });
        }
        events.sort_by(|a, b| a.time.total_cmp(&b.time));
        (events, deliveries)
    }

    #[test]
    fn summary_of_periodic_stream() {
        let (events, deliveries) = periodic(200, 0.002);
        let s = summarize(&events, &deliveries, (0.5, 1.5), 1024, AgeMode::OneWay).unwrap();
        assert_eq!(s.delivered_count, 100);
        assert!(close(s.throughput, 819_200.0));
        assert!(close(s.avg_inter_delivery.unwrap(), 0.01));
        assert!(close(s.avg_delay.unwrap(), 0.002));
        assert!(close(s.avg_age.unwrap(), 0.002 + 0.005));
        assert!(close(s.avg_rtt.unwrap(), 0.004));
        assert!(close(s.backlog_avg, 0.4));
        assert_eq!(s.loss_fraction, 0.0);
    }

    #[test]
    fn rtt_mode_uses_ack_clock() {
        let (events, deliveries) = periodic(200, 0.002);
        let s = summarize(&events, &deliveries, (0.5, 1.5), 1024, AgeMode::Rtt).unwrap();
        assert!(close(s.avg_delay.unwrap(), 0.004));
        assert!(close(s.avg_age.unwrap(), 0.004 + 0.005));
        assert!(close(s.avg_inter_ack.unwrap(), 0.01));
    }

    #[test]
    fn empty_monitor_log_flags_undefined_age() {
        let events: Vec<SourceEvent> = (0..10).map(|i| send(i as f64 * 0.1, i, i + 1)).collect();
        let s = summarize(&events, &[], (0.0, 1.0), 1024, AgeMode::OneWay).unwrap();
        assert_eq!(s.delivered_count, 0);
        assert_eq!(s.avg_age, None);
        assert_eq!(s.avg_delay, None);
        assert_eq!(s.loss_fraction, 1.0);
    }

    #[test]
    fn lost_updates_count_towards_loss() {
        let (events, mut deliveries) = periodic(100, 0.001);
        deliveries.retain(|d| d.seq % 4 != 0);
        let s = summarize(&events, &deliveries, (0.0, 1.0), 1024, AgeMode::OneWay).unwrap();
        assert!(close(s.loss_fraction, 0.25));
    }

    /// Midpoint Riemann sum with step `h`, walking the reset list.
    fn riemann(resets: &[(f64, f64)], t0: f64, t1: f64, h: f64) -> f64 {
        let n = ((t1 - t0) / h).round() as usize;
        let mut j = 0;
        let mut sum = 0.0;
        for i in 0..n {
            let t = t0 + (i as f64 + 0.5) * h;
            while j + 1 < resets.len() && resets[j + 1].0 <= t {
                j += 1;
            }
            sum += resets[j].1 + (t - resets[j].0);
        }
        sum * h
    }

    // Delivery instants sit on a 1e-4 s grid so that no midpoint of the
    // 1e-5 s oracle lands on a discontinuity.
    fn grid_log() -> impl Strategy<Value = Vec<(f64, f64)>> {
        proptest::collection::vec((1u32..2000, 0u32..3000), 1..40).prop_map(|steps| {
            let mut r = 0u32;
            let mut g = 0u32;
            let mut out = Vec::new();
            for (dr, lag) in steps {
                r += dr;
                let gen = (r.saturating_sub(lag)).max(g + 1);
                if gen > r {
                    continue;
                }
                g = gen;
                out.push((r as f64 * 1e-4, g as f64 * 1e-4 - 1e-4));
            }
            out
        })
    }

    proptest! {
        #[test]
        fn sawtooth_matches_riemann(log in grid_log(), tail in 1u32..2000) {
            prop_assume!(!log.is_empty());
            let trace = AgeTrace::from_deliveries(log.iter().copied()).unwrap();
            let t0 = trace.start();
            let t1 = log.last().unwrap().0 + tail as f64 * 1e-4;
            let exact = trace.time_average(t0, t1).unwrap();
            let oracle = riemann(trace.resets(), t0, t1, 1e-5) / (t1 - t0);
            prop_assert!((exact - oracle).abs() <= 1e-6 * oracle.abs(), "{exact} vs {oracle}");
        }

        #[test]
        fn age_average_dominates_weighted_delay(log in grid_log(), tail in 1u32..2000) {
            prop_assume!(!log.is_empty());
            let trace = AgeTrace::from_deliveries(log.iter().copied()).unwrap();
            let t0 = trace.start();
            let t1 = log.last().unwrap().0 + tail as f64 * 1e-4;
            let avg = trace.time_average(t0, t1).unwrap();
            // Each reset value weighted by how long it stays current.
            let mut weighted = 0.0;
            for (i, &(r, g)) in log.iter().enumerate() {
                let until = log.get(i + 1).map_or(t1, |n| n.0);
                weighted += (r - g) * (until - r);
            }
            prop_assert!(avg >= weighted / (t1 - t0) - 1e-12);
        }

        #[test]
        fn constant_delay_shift(log in grid_log(), c in 0.0..1.0f64) {
            prop_assume!(!log.is_empty());
            let a = AgeTrace::from_deliveries(log.iter().copied()).unwrap();
            let b = AgeTrace::from_deliveries(log.iter().map(|&(r, g)| (r + c, g))).unwrap();
            let t1 = log.last().unwrap().0 + 0.5;
            let base = a.time_average(a.start(), t1).unwrap();
            let shifted = b.time_average(b.start(), t1 + c).unwrap();
            prop_assert!((shifted - base - c).abs() < 1e-9);
        }

        #[test]
        fn jain_scale_invariant(xs in proptest::collection::vec(0.0..100.0f64, 1..50), c in 0.01..100.0f64) {
            prop_assume!(xs.iter().any(|&x| x > 0.0));
            let j = jain(&xs).unwrap();
            let scaled: Vec<f64> = xs.iter().map(|x| x * c).collect();
            prop_assert!((jain(&scaled).unwrap() - j).abs() < 1e-9);
            prop_assert!(j > 0.0 && j <= 1.0 + 1e-12);
        }
    }
}
