//! Age-control transport: an update/ACK protocol whose source adapts its
//! update rate to keep information at the monitor fresh.
//!
//! The crate holds everything that does not touch a socket:
//!
//! * [`wire`]: the update and ACK datagram formats.
//! * [`estimation`]: smoothed RTT and inter-ACK gaps, per-epoch age and
//!   backlog averages.
//! * [`controller`]: the INC / DEC / MDEC rate control loop.
//! * [`endpoints`]: source and monitor state machines (ACP+, Lazy, and
//!   fixed-rate baselines).
//! * [`metrics`]: age-of-information traces, summary statistics, Jain's
//!   fairness index.
//! * [`netsim`]: a deterministic discrete-event simulator of tandem queues
//!   and a shared contention-based access hop.
//! * [`logs`]: CSV records written by endpoints and read back by metrics.

pub mod controller;
pub mod endpoints;
pub mod estimation;
pub mod logs;
pub mod metrics;
pub mod netsim;
pub mod wire;
