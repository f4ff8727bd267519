//! The ACP+ rate controller.
//!
//! Once per control epoch the source differences its time-average backlog
//! and age against the previous epoch and picks one of three actions on the
//! target backlog change `b*`:
//!
//! | backlog change | age change | action                                   |
//! |----------------|------------|------------------------------------------|
//! | > 0            | > 0        | `DEC`, or `MDEC(γ+1)` if the flag is set |
//! | > 0            | < 0        | `INC`                                    |
//! | < 0            | > 0        | `INC`                                    |
//! | < 0            | < 0        | `MDEC(γ)` if flag set and γ > 0, else `DEC` |
//!
//! `MDEC(γ)` targets `-(1 - 2^-γ) * B`, removing a growing fraction of the
//! current average backlog `B` on consecutive bad epochs. The new rate is
//! `1/Z + b*/RTT` clamped to within ±25% of the previous rate; there is no
//! absolute floor.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MIN_RATE_FACTOR: f64 = 0.75;
pub const MAX_RATE_FACTOR: f64 = 1.25;
/// Updates sent per epoch at the current rate.
pub const UPDATES_PER_EPOCH: f64 = 10.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ControlError {
    #[error("rate update needs positive inputs (lambda={lambda}, z_bar={z_bar}, rtt_bar={rtt_bar})")]
    NonPositiveInput { lambda: f64, z_bar: f64, rtt_bar: f64 },
}

/// How a difference of exactly zero is classified.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ZeroSignPolicy {
    /// Zero counts as negative, so `b ≤ 0` and `δ ≤ 0` fall in the
    /// decrease-backlog quadrant.
    #[default]
    NegativeSide,
    /// A zero difference matches no quadrant: target 0, flag and γ kept.
    Hold,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ActionKind {
    Inc,
    Dec,
    Mdec(u32),
    Hold,
}

impl fmt::Display for ActionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ActionKind::Inc => f.write_str("INC"),
            ActionKind::Dec => f.write_str("DEC"),
            ActionKind::Mdec(g) => write!(f, "MDEC({g})"),
            ActionKind::Hold => f.write_str("HOLD"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControlAction {
    pub kind: ActionKind,
    /// Target change in average backlog over the next epoch.
    pub target: f64,
}

impl ControlAction {
    fn inc() -> Self {
        Self {
            kind: ActionKind::Inc,
            target: 1.0,
        }
    }

    fn dec() -> Self {
        Self {
            kind: ActionKind::Dec,
            target: -1.0,
        }
    }

    fn mdec(gamma: u32, backlog_avg: f64) -> Self {
        Self {
            kind: ActionKind::Mdec(gamma),
            target: mdec_target(gamma, backlog_avg),
        }
    }
}

/// `-(1 - 2^-γ) * B`.
pub fn mdec_target(gamma: u32, backlog_avg: f64) -> f64 {
    -(1.0 - 0.5f64.powi(gamma as i32)) * backlog_avg
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControlInputs {
    /// Average backlog change since the previous epoch.
    pub backlog_change: f64,
    /// Average age change since the previous epoch, seconds.
    pub age_change: f64,
    /// This epoch's average backlog.
    pub backlog_avg: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControllerState {
    /// Current update rate, updates per second.
    pub lambda: f64,
    pub flag: bool,
    pub gamma: u32,
    pub prev_age_avg: Option<f64>,
    pub prev_backlog_avg: Option<f64>,
    pub epoch_index: u64,
    pub epoch_length: f64,
    pub epoch_start: f64,
    pub zero_sign: ZeroSignPolicy,
}

impl ControllerState {
    pub fn new(lambda: f64, epoch_start: f64) -> Self {
        Self {
            lambda,
            flag: false,
            gamma: 0,
            prev_age_avg: None,
            prev_backlog_avg: None,
            epoch_index: 0,
            epoch_length: epoch_length(lambda),
            epoch_start,
            zero_sign: ZeroSignPolicy::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Sign {
    Pos,
    Neg,
    Zero,
}

fn sign(x: f64, policy: ZeroSignPolicy) -> Sign {
    if x > 0.0 {
        Sign::Pos
    } else if x < 0.0 {
        Sign::Neg
    } else {
        match policy {
            ZeroSignPolicy::NegativeSide => Sign::Neg,
            ZeroSignPolicy::Hold => Sign::Zero,
        }
    }
}

/// Chooses the action for one epoch. Only `flag` and `gamma` change; the
/// caller applies [`update_lambda`] and [`epoch_length`].
pub fn control_step(state: &ControllerState, inputs: &ControlInputs) -> (ControlAction, ControllerState) {
    let mut next = state.clone();
    let b = sign(inputs.backlog_change, state.zero_sign);
    let d = sign(inputs.age_change, state.zero_sign);
    let action = match (b, d) {
        (Sign::Pos, Sign::Pos) => {
            let action = if state.flag {
                next.gamma += 1;
                ControlAction::mdec(next.gamma, inputs.backlog_avg)
            } else {
                ControlAction::dec()
            };
            next.flag = true;
            action
        }
        (Sign::Pos, Sign::Neg) | (Sign::Neg, Sign::Pos) => {
            next.flag = false;
            next.gamma = 0;
            ControlAction::inc()
        }
        (Sign::Neg, Sign::Neg) => {
            if state.flag && state.gamma > 0 {
                ControlAction::mdec(state.gamma, inputs.backlog_avg)
            } else {
                next.flag = false;
                next.gamma = 0;
                ControlAction::dec()
            }
        }
        _ => ControlAction {
            kind: ActionKind::Hold,
            target: 0.0,
        },
    };
    (action, next)
}

/// New rate `1/z_bar + target/rtt_bar`, clamped to
/// `[0.75 * prev, 1.25 * prev]`.
pub fn update_lambda(prev: f64, z_bar: f64, rtt_bar: f64, target: f64) -> Result<f64, ControlError> {
    if !(prev > 0.0 && z_bar > 0.0 && rtt_bar > 0.0) {
        return Err(ControlError::NonPositiveInput {
            lambda: prev,
            z_bar,
            rtt_bar,
        });
    }
    let raw = 1.0 / z_bar + target / rtt_bar;
    let lo = MIN_RATE_FACTOR * prev;
    let hi = MAX_RATE_FACTOR * prev;
    Ok(if raw < lo {
        lo
    } else if raw > hi {
        hi
    } else {
        raw
    })
}

/// Epoch length that spans ten updates at `lambda`.
pub fn epoch_length(lambda: f64) -> f64 {
    UPDATES_PER_EPOCH / lambda
}
