//! Load curves for a single station and the rate sweep for minimum age.

use std::collections::VecDeque;

use rand_distr::{Distribution, Exp1};
use serde::Serialize;

use super::{entity_rng, run_simulation, Entity, ReversePath, Service, SimConfig, SimError, Station};
use crate::endpoints::{SourceConfig, SourceMode};
use crate::metrics::AgeTrace;

/// Packets simulated per load point unless the caller says otherwise.
pub const DEFAULT_CURVE_PACKETS: usize = 1_000_000;

/// Mean time in an M/M/1 system, or `None` when unstable.
pub fn mm1_system_time(lambda: f64, mu: f64) -> Option<f64> {
    (lambda < mu).then(|| 1.0 / (mu - lambda))
}

/// Mean time in an M/M/1/K system (K counts the packet in service),
/// over admitted packets.
pub fn mm1k_system_time(lambda: f64, mu: f64, k: usize) -> f64 {
    let rho = lambda / mu;
    let probs: Vec<f64> = if (rho - 1.0).abs() < 1e-12 {
        vec![1.0 / (k + 1) as f64; k + 1]
    } else {
        let norm = (1.0 - rho) / (1.0 - rho.powi(k as i32 + 1));
        (0..=k).map(|n| norm * rho.powi(n as i32)).collect()
    };
    let occupancy: f64 = probs.iter().enumerate().map(|(n, p)| n as f64 * p).sum();
    occupancy / (lambda * (1.0 - probs[k]))
}

/// Time in a D/D/1 system: one service time below capacity, `None` above
/// it with an unbounded buffer.
pub fn dd1_system_time(load: f64, mu: f64) -> Option<f64> {
    (load <= mu).then(|| 1.0 / mu)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LoadPoint {
    /// Offered load, packets per second.
    pub load: f64,
    /// `load / capacity`.
    pub utilisation: f64,
    /// No-load RTT plus queueing delay: `rtt_base + sojourn - mean service`.
    pub mean_rtt: Option<f64>,
    /// Mean time in the station (waiting plus service), simulated.
    pub mean_sojourn: Option<f64>,
    /// Closed-form sojourn time where one exists.
    pub analytic_sojourn: Option<f64>,
    pub drop_fraction: f64,
    /// Load at or above capacity with an unbounded buffer.
    pub unstable: bool,
}

/// Mean RTT through one station as the offered load varies.
///
/// `rtt_base` is the no-load round-trip time, which already contains one
/// service time. Deterministic stations are fed at a constant rate,
/// exponential ones with Poisson arrivals. The first tenth of each run is
/// discarded as warm-up.
pub fn rtt_vs_load_curve(
    station: &Station,
    rtt_base: f64,
    loads: &[f64],
    packet_bits: u64,
    packets: usize,
    seed: u64,
) -> Result<Vec<LoadPoint>, SimError> {
    station.validate("station")?;
    if packets < 10 {
        return Err(SimError::InvalidConfig("at least 10 packets per load point".into()));
    }
    let mean_service = packet_bits as f64 / station.service.rate();
    let mu = 1.0 / mean_service;
    let exponential = matches!(station.service, Service::Exponential { .. });
    let mut out = Vec::with_capacity(loads.len());
    for (idx, &load) in loads.iter().enumerate() {
        if !(load > 0.0 && load.is_finite()) {
            return Err(SimError::InvalidConfig(format!("loads must be positive, got {load}")));
        }
        let utilisation = load / mu;
        let analytic = match (station.buffer, exponential) {
            (None, true) => mm1_system_time(load, mu),
            (Some(k), true) => Some(mm1k_system_time(load, mu, k)),
            (None, false) => dd1_system_time(load, mu),
            (Some(_), false) => (load <= mu).then_some(mean_service),
        };
        if station.buffer.is_none() && load >= mu {
            out.push(LoadPoint {
                load,
                utilisation,
                mean_rtt: None,
                mean_sojourn: None,
                analytic_sojourn: None,
                drop_fraction: 0.0,
                unstable: true,
            });
            continue;
        }
        let mut rng = entity_rng(seed, Entity::Curve(idx));
        let mut departures: VecDeque<f64> = VecDeque::new();
        let mut t = 0.0;
        let warm = packets / 10;
        let (mut sum, mut counted, mut dropped) = (0.0, 0usize, 0usize);
        for n in 0..packets {
            t += if exponential {
                let x: f64 = Exp1.sample(&mut rng);
                x / load
            } else {
                1.0 / load
            };
            while departures.front().is_some_and(|&d| d <= t) {
                departures.pop_front();
            }
            if station.buffer.is_some_and(|k| departures.len() >= k) {
                if n >= warm {
                    dropped += 1;
                }
                continue;
            }
            let service = if exponential {
                let x: f64 = Exp1.sample(&mut rng);
                x * mean_service
            } else {
                mean_service
            };
            let start = departures.back().map_or(t, |&d| d.max(t));
            let done = start + service;
            departures.push_back(done);
            if n >= warm {
                sum += done - t;
                counted += 1;
            }
        }
        let sojourn = (counted > 0).then(|| sum / counted as f64);
        out.push(LoadPoint {
            load,
            utilisation,
            mean_rtt: sojourn.map(|s| rtt_base + s - mean_service),
            mean_sojourn: sojourn,
            analytic_sojourn: analytic,
            drop_fraction: dropped as f64 / (packets - warm) as f64,
            unstable: false,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub enum Arrivals {
    #[default]
    Poisson,
    Constant,
}

/// A rate sweep over a single-source path with instantaneous ACKs.
#[derive(Debug, Clone)]
pub struct MinAgeSweep {
    pub stations: Vec<Station>,
    /// Update rates to try, per second.
    pub rates: Vec<f64>,
    pub arrivals: Arrivals,
    /// Simulated seconds per rate.
    pub duration: f64,
    pub payload_len: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MinAgePoint {
    pub rate: f64,
    pub avg_age: f64,
    /// Time-average number of updates in the network.
    pub occupancy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MinAgeResult {
    pub best_rate: f64,
    pub best_age: f64,
    pub backlog_at_best: f64,
    pub points: Vec<MinAgePoint>,
}

/// Simulates every rate in the sweep and returns the age-minimising one
/// with the occupancy it produced.
///
/// All rates share the same station randomness, so neighbouring points
/// differ only through the arrival stream.
pub fn sweep_min_age(sweep: &MinAgeSweep) -> Result<MinAgeResult, SimError> {
    if sweep.rates.is_empty() {
        return Err(SimError::InvalidConfig("rate sweep is empty".into()));
    }
    let mut points = Vec::with_capacity(sweep.rates.len());
    for &rate in &sweep.rates {
        let mode = match sweep.arrivals {
            Arrivals::Poisson => SourceMode::Poisson(rate),
            Arrivals::Constant => SourceMode::Constant(rate),
        };
        let source = SourceConfig {
            payload_len: sweep.payload_len,
            ..SourceConfig::with_mode(mode)
        };
        let mut cfg = SimConfig::new(vec![source], sweep.stations.clone(), sweep.duration);
        cfg.reverse = ReversePath::Instantaneous;
        cfg.seed = sweep.seed;
        let out = run_simulation(&cfg)?;
        let src = &out.sources[0];
        let (t0, t1) = out.horizon;
        let avg_age = AgeTrace::from_monitor_log(&src.deliveries)
            .ok()
            .filter(|tr| tr.start() < t1)
            .and_then(|tr| tr.time_average(t0.max(tr.start()), t1).ok())
            .unwrap_or(f64::INFINITY);
        points.push(MinAgePoint {
            rate,
            avg_age,
            occupancy: src.occupancy_avg,
        });
    }
    let best = points
        .iter()
        .min_by(|a, b| a.avg_age.total_cmp(&b.avg_age))
        .expect("non-empty sweep");
    Ok(MinAgeResult {
        best_rate: best.rate,
        best_age: best.avg_age,
        backlog_at_best: best.occupancy,
        points,
    })
}
