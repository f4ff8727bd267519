//! Update and ACK datagram formats.
//!
//! Both packet kinds share a 5-byte preamble (4-byte magic, 1-byte version)
//! followed by big-endian fields:
//!
//! ```text
//! update: magic(4) | version(1) | seq(4) | gen_ts(8) | payload_len(2) | payload
//! ack:    magic(4) | version(1) | seq(4) | gen_ts(8)
//! ```
//!
//! `gen_ts` is nanoseconds on the source's clock. The monitor echoes it back
//! untouched, so round-trip times are always computed on a single clock.

use thiserror::Error;

pub const MAGIC: [u8; 4] = *b"ACP+";
pub const VERSION: u8 = 1;

pub const UPDATE_HEADER_LEN: usize = 19;
pub const ACK_LEN: usize = 17;

/// Largest UDP payload over IPv4.
pub const MAX_DATAGRAM: usize = 65_507;
pub const MAX_PAYLOAD: usize = MAX_DATAGRAM - UPDATE_HEADER_LEN;

pub const DEFAULT_PAYLOAD_LEN: usize = 1024;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum WireError {
    #[error("truncated datagram: need {needed} bytes, got {got}")]
    Truncated { needed: usize, got: usize },
    #[error("bad magic {0:02x?}")]
    BadMagic([u8; 4]),
    #[error("unsupported version {0}")]
    UnsupportedVersion(u8),
    #[error("length mismatch: header declares {declared} payload bytes, datagram carries {actual}")]
    LengthMismatch { declared: usize, actual: usize },
    #[error("payload of {0} bytes exceeds the {MAX_PAYLOAD}-byte datagram bound")]
    Oversize(usize),
}

/// A status update. `payload_len` on the wire is always `payload.len()`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UpdatePacket {
    pub seq: u32,
    pub gen_ts: u64,
    pub payload: Vec<u8>,
}

impl UpdatePacket {
    pub fn new(seq: u32, gen_ts: u64, payload_len: usize) -> Self {
        Self {
            seq,
            gen_ts,
            payload: vec![0; payload_len],
        }
    }

    pub fn encoded_len(&self) -> usize {
        UPDATE_HEADER_LEN + self.payload.len()
    }

    /// The ACK a monitor sends back for this update.
    pub fn ack(&self) -> AckPacket {
        AckPacket {
            seq: self.seq,
            gen_ts: self.gen_ts,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AckPacket {
    pub seq: u32,
    pub gen_ts: u64,
}

pub fn encode_update(pkt: &UpdatePacket) -> Result<Vec<u8>, WireError> {
    let len = pkt.payload.len();
    if len > MAX_PAYLOAD {
        return Err(WireError::Oversize(len));
    }
    let mut buf = Vec::with_capacity(UPDATE_HEADER_LEN + len);
    put_preamble(&mut buf, pkt.seq, pkt.gen_ts);
    buf.extend_from_slice(&(len as u16).to_be_bytes());
    buf.extend_from_slice(&pkt.payload);
    Ok(buf)
}

pub fn decode_update(buf: &[u8]) -> Result<UpdatePacket, WireError> {
    let (seq, gen_ts) = read_preamble(buf, UPDATE_HEADER_LEN)?;
    let declared = u16::from_be_bytes([buf[17], buf[18]]) as usize;
    let actual = buf.len() - UPDATE_HEADER_LEN;
    if declared != actual {
        return Err(WireError::LengthMismatch { declared, actual });
    }
    Ok(UpdatePacket {
        seq,
        gen_ts,
        payload: buf[UPDATE_HEADER_LEN..].to_vec(),
    })
}

pub fn encode_ack(ack: &AckPacket) -> Vec<u8> {
    let mut buf = Vec::with_capacity(ACK_LEN);
    put_preamble(&mut buf, ack.seq, ack.gen_ts);
    buf
}

pub fn decode_ack(buf: &[u8]) -> Result<AckPacket, WireError> {
    let (seq, gen_ts) = read_preamble(buf, ACK_LEN)?;
    if buf.len() != ACK_LEN {
        return Err(WireError::LengthMismatch {
            declared: 0,
            actual: buf.len() - ACK_LEN,
        });
    }
    Ok(AckPacket { seq, gen_ts })
}

fn put_preamble(buf: &mut Vec<u8>, seq: u32, gen_ts: u64) {
    buf.extend_from_slice(&MAGIC);
    buf.push(VERSION);
    buf.extend_from_slice(&seq.to_be_bytes());
    buf.extend_from_slice(&gen_ts.to_be_bytes());
}

/// Validates the shared prefix and returns `(seq, gen_ts)`. `min_len` is the
/// fixed header size of the packet kind being decoded.
fn read_preamble(buf: &[u8], min_len: usize) -> Result<(u32, u64), WireError> {
    if buf.len() < min_len {
        return Err(WireError::Truncated {
            needed: min_len,
            got: buf.len(),
        });
    }
    let magic = [buf[0], buf[1], buf[2], buf[3]];
    if magic != MAGIC {
        return Err(WireError::BadMagic(magic));
    }
    if buf[4] != VERSION {
        return Err(WireError::UnsupportedVersion(buf[4]));
    }
    let seq = u32::from_be_bytes(buf[5..9].try_into().unwrap());
    let gen_ts = u64::from_be_bytes(buf[9..17].try_into().unwrap());
    Ok((seq, gen_ts))
}
