//! Drivers for the age-control transport: UDP endpoints, an emulation
//! proxy, simulated experiment sweeps and reports over their CSV output.

pub mod experiment;
pub mod proxy;
pub mod report;
pub mod transport;
