use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::logs::CsvRecord;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceKind {
    Generated,
    Enqueued,
    Dropped,
    ServiceStart,
    /// An update reached its monitor (whether or not the monitor kept it).
    Delivered,
    /// An ACK reached its source.
    AckDelivered,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PacketKind {
    Update,
    Ack,
}

/// Where a packet is when a trace record is written.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Hop {
    Source,
    /// Transmit queue of an access-hop node; the access point is the node
    /// numbered after the last source.
    Access(u32),
    Station(u32),
    Monitor,
}

impl fmt::Display for Hop {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Hop::Source => f.write_str("source"),
            Hop::Access(n) => write!(f, "access{n}"),
            Hop::Station(n) => write!(f, "station{n}"),
            Hop::Monitor => f.write_str("monitor"),
        }
    }
}

impl FromStr for Hop {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || format!("unknown hop {s:?}");
        match s {
            "source" => Ok(Hop::Source),
            "monitor" => Ok(Hop::Monitor),
            _ => {
                if let Some(n) = s.strip_prefix("access") {
                    n.parse().map(Hop::Access).map_err(|_| bad())
                } else if let Some(n) = s.strip_prefix("station") {
                    n.parse().map(Hop::Station).map_err(|_| bad())
                } else {
                    Err(bad())
                }
            }
        }
    }
}

impl TryFrom<String> for Hop {
    type Error = String;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<Hop> for String {
    fn from(h: Hop) -> Self {
        h.to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub time_ns: u64,
    pub source: u32,
    pub kind: TraceKind,
    pub packet: PacketKind,
    pub seq: u32,
    pub hop: Hop,
}

impl CsvRecord for TraceRecord {
    const HEADER: &'static [&'static str] = &["time_ns", "source", "kind", "packet", "seq", "hop"];
}
