//! Network estimates maintained by the source: smoothed round-trip time,
//! smoothed inter-ACK gap, and the per-epoch time averages of age and
//! backlog that the rate controller differences.

use thiserror::Error;

/// Classic smoothed-RTT retention weight (7/8 old, 1/8 new).
pub const DEFAULT_ALPHA: f64 = 0.875;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EstimationError {
    #[error("negative sample {0}")]
    NegativeSample(f64),
    #[error("EWMA weight {0} outside (0, 1)")]
    InvalidAlpha(f64),
    #[error("clock anomaly: ACK at {ack_time} precedes generation at {gen_time}")]
    ClockAnomaly { ack_time: f64, gen_time: f64 },
    #[error("ACK at {ack_time} precedes the previous ACK at {last}")]
    NonMonotoneAck { ack_time: f64, last: f64 },
    #[error("no ACKs in epoch")]
    NoSamples,
    #[error("epoch [{start}, {end}] is empty or reversed")]
    InvalidEpoch { start: f64, end: f64 },
    #[error("event at {time} outside epoch [{start}, {end}] or out of order")]
    OutOfOrder { time: f64, start: f64, end: f64 },
}

/// One EWMA step. `prev = None` means no estimate yet: the sample becomes the
/// estimate.
pub fn ewma_update(prev: Option<f64>, sample: f64, alpha: f64) -> Result<f64, EstimationError> {
    check_alpha(alpha)?;
    if !(sample >= 0.0) {
        return Err(EstimationError::NegativeSample(sample));
    }
    Ok(match prev {
        None => sample,
        Some(prev) => alpha * prev + (1.0 - alpha) * sample,
    })
}

fn check_alpha(alpha: f64) -> Result<(), EstimationError> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(EstimationError::InvalidAlpha(alpha))
    }
}

/// Smoothed RTT and inter-ACK estimates. All times in seconds on the
/// source's clock.
#[derive(Debug, Clone, PartialEq)]
pub struct Estimator {
    alpha: f64,
    rtt_bar: Option<f64>,
    z_bar: Option<f64>,
    last_ack_time: Option<f64>,
}

impl Estimator {
    pub fn new(alpha: f64) -> Result<Self, EstimationError> {
        check_alpha(alpha)?;
        Ok(Self {
            alpha,
            rtt_bar: None,
            z_bar: None,
            last_ack_time: None,
        })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn rtt_bar(&self) -> Option<f64> {
        self.rtt_bar
    }

    pub fn z_bar(&self) -> Option<f64> {
        self.z_bar
    }

    pub fn last_ack_time(&self) -> Option<f64> {
        self.last_ack_time
    }

    /// Folds in an in-sequence ACK and returns the RTT sample it produced.
    /// On error the estimator is left unchanged.
    pub fn record_ack(&mut self, ack_time: f64, gen_time: f64) -> Result<f64, EstimationError> {
        let rtt = ack_time - gen_time;
        if rtt < 0.0 {
            return Err(EstimationError::ClockAnomaly { ack_time, gen_time });
        }
        let z_bar = match self.last_ack_time {
            Some(last) if ack_time < last => {
                return Err(EstimationError::NonMonotoneAck { ack_time, last })
            }
            Some(last) => Some(ewma_update(self.z_bar, ack_time - last, self.alpha)?),
            None => self.z_bar,
        };
        self.rtt_bar = Some(ewma_update(self.rtt_bar, rtt, self.alpha)?);
        self.z_bar = z_bar;
        self.last_ack_time = Some(ack_time);
        Ok(rtt)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AckEvent {
    pub time: f64,
    pub rtt: f64,
}

/// Measurements collected over one control epoch `[start, end]`.
///
/// The age estimate is a sawtooth that resets to each ACK's RTT sample and
/// grows at slope 1 in between. The backlog is a step function whose first
/// step sits at the epoch start.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochAccumulator {
    start: f64,
    carried_age: Option<f64>,
    acks: Vec<AckEvent>,
    backlog: Vec<(f64, u32)>,
}

impl EpochAccumulator {
    /// `carried_age` is the age at `start` continuing the previous epoch's
    /// sawtooth, if one exists.
    pub fn new(start: f64, carried_age: Option<f64>, backlog: u32) -> Self {
        Self {
            start,
            carried_age,
            acks: Vec::new(),
            backlog: vec![(start, backlog)],
        }
    }

    pub fn start(&self) -> f64 {
        self.start
    }

    pub fn acks(&self) -> &[AckEvent] {
        &self.acks
    }

    pub fn backlog_steps(&self) -> &[(f64, u32)] {
        &self.backlog
    }

    pub fn current_backlog(&self) -> u32 {
        self.backlog.last().map(|&(_, b)| b).unwrap_or(0)
    }

    pub fn push_ack(&mut self, time: f64, rtt: f64) -> Result<(), EstimationError> {
        let last = self.acks.last().map(|a| a.time).unwrap_or(self.start);
        if time < last {
            return Err(EstimationError::OutOfOrder {
                time,
                start: self.start,
                end: last,
            });
        }
        self.acks.push(AckEvent { time, rtt });
        Ok(())
    }

    pub fn push_backlog(&mut self, time: f64, backlog: u32) -> Result<(), EstimationError> {
        let &(last, _) = self.backlog.last().expect("backlog starts non-empty");
        if time < last {
            return Err(EstimationError::OutOfOrder {
                time,
                start: self.start,
                end: last,
            });
        }
        self.backlog.push((time, backlog));
        Ok(())
    }

    /// Sawtooth age at `time`, or `None` before any age reference exists.
    pub fn age_at(&self, time: f64) -> Option<f64> {
        match self.acks.iter().rev().find(|a| a.time <= time) {
            Some(a) => Some(a.rtt + (time - a.time)),
            None => self.carried_age.map(|age| age + (time - self.start)),
        }
    }

    /// Time-average age over the epoch. Without a carried-in age the
    /// integration starts at the first ACK.
    pub fn age_average(&self, end: f64) -> Result<f64, EstimationError> {
        if !(end > self.start) {
            return Err(EstimationError::InvalidEpoch {
                start: self.start,
                end,
            });
        }
        let first = self.acks.first().ok_or(EstimationError::NoSamples)?;
        if self.acks.last().unwrap().time > end {
            return Err(EstimationError::OutOfOrder {
                time: self.acks.last().unwrap().time,
                start: self.start,
                end,
            });
        }
        let (mut t, mut age) = match self.carried_age {
            Some(age) => (self.start, age),
            None => (first.time, first.rtt),
        };
        let from = t;
        let mut area = 0.0;
        for ack in &self.acks {
            let dt = ack.time - t;
            area += (age + 0.5 * dt) * dt;
            t = ack.time;
            age = ack.rtt;
        }
        let dt = end - t;
        area += (age + 0.5 * dt) * dt;
        if end > from {
            Ok(area / (end - from))
        } else {
            // single ACK exactly at the epoch end
            Ok(age)
        }
    }

    /// Time-weighted mean backlog over `[start, end]`.
    pub fn backlog_average(&self, end: f64) -> Result<f64, EstimationError> {
        if !(end > self.start) {
            return Err(EstimationError::InvalidEpoch {
                start: self.start,
                end,
            });
        }
        let mut area = 0.0;
        for pair in self.backlog.windows(2) {
            let ((t0, b), (t1, _)) = (pair[0], pair[1]);
            if t1 < t0 || t1 > end {
                return Err(EstimationError::OutOfOrder {
                    time: t1,
                    start: self.start,
                    end,
                });
            }
            area += b as f64 * (t1 - t0);
        }
        let &(t_last, b_last) = self.backlog.last().unwrap();
        area += b_last as f64 * (end - t_last);
        Ok(area / (end - self.start))
    }

    /// Starts the next epoch at `end`, carrying the sawtooth and backlog.
    pub fn roll(&self, end: f64) -> Self {
        Self::new(end, self.age_at(end), self.current_backlog())
    }
}
