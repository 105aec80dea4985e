//! Wire format for the four transfer packets.
//!
//! Every datagram carries exactly one packet. All integers are big-endian and
//! fixed width; variable-length fields carry a `u16` length prefix.
//!
//! ```text
//! +------+------+---------+------+----------------------------+
//! | 0xEB | 0x01 | version | type | fields in declaration order |
//! +------+------+---------+------+----------------------------+
//!
//! type 1  WriteRequest     id u64 | info u16+bytes | data_size u64 | block_size u32
//!                          | window_size u32 | block_count u32 | nonce u64
//!                          | metadata u16+bytes
//! type 2  Acknowledgement  id u64 | window_index u32 | count u16 | count x block u32
//! type 3  Data             id u64 | block_number u32 | len u16 | payload
//! type 4  Error            id u64 | code u8 | message u16+bytes
//! ```
//!
//! See `docs/wire.md` for worked hex examples.

use std::fmt;

use thiserror::Error;

pub const MAGIC: [u8; 2] = [0xEB, 0x01];
pub const VERSION: u8 = 0x01;

/// Bytes preceding the per-type fields.
pub const HEADER_LEN: usize = 4;
/// Fixed bytes of a `Data` packet in front of the payload.
pub const DATA_OVERHEAD: usize = HEADER_LEN + 8 + 4 + 2;
/// Hard datagram ceiling imposed by the Ethernet MTU.
pub const MAX_DATAGRAM: usize = 1500;
/// Usable datagram payload observed on the reference overlay network.
pub const DATAGRAM_BUDGET: usize = 1241;
/// Largest encoded packet this codec produces for legal packets.
pub const MAX_ENCODED: usize = 1232;

pub const MAX_BLOCK_SIZE: u32 = 1200;
pub const MAX_INFO_LEN: usize = 64;
pub const MAX_METADATA_LEN: usize = 512;
pub const MAX_MESSAGE_LEN: usize = 128;
/// Entries an acknowledgement may carry; keeps it under [`MAX_ENCODED`].
pub const MAX_UNRECEIVED: usize = 300;

const TYPE_WRITE_REQUEST: u8 = 1;
const TYPE_ACK: u8 = 2;
const TYPE_DATA: u8 = 3;
const TYPE_ERROR: u8 = 4;

/// Identifier of one transfer, chosen by the initiating peer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TransferId(pub u64);

impl fmt::Display for TransferId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:016x}", self.0)
    }
}

/// Reason carried by an [`ErrorPacket`]. The discriminant is the wire value.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum ErrorCode {
    SizeExceeded = 0,
    Busy = 1,
    Collision = 2,
    Timeout = 3,
    DecodeFailure = 4,
    UnknownTransfer = 5,
}

impl ErrorCode {
    pub const ALL: [ErrorCode; 6] = [
        ErrorCode::SizeExceeded,
        ErrorCode::Busy,
        ErrorCode::Collision,
        ErrorCode::Timeout,
        ErrorCode::DecodeFailure,
        ErrorCode::UnknownTransfer,
    ];

    pub fn from_u8(v: u8) -> Option<Self> {
        Self::ALL.get(v as usize).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ErrorCode::SizeExceeded => "SIZE_EXCEEDED",
            ErrorCode::Busy => "BUSY",
            ErrorCode::Collision => "COLLISION",
            ErrorCode::Timeout => "TIMEOUT",
            ErrorCode::DecodeFailure => "DECODE_FAILURE",
            ErrorCode::UnknownTransfer => "UNKNOWN_TRANSFER",
        }
    }
}

impl fmt::Display for ErrorCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Transfer announcement. Carries every parameter both sides must agree on.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WriteRequest {
    pub id: TransferId,
    /// Application tag naming the consumer of the data.
    pub info: String,
    pub data_size: u64,
    pub block_size: u32,
    pub window_size: u32,
    pub block_count: u32,
    pub nonce: u64,
    pub metadata: Vec<u8>,
}

/// Confirms the announcement or a window of blocks.
///
/// `window_index` is the index of the next window the receiver expects, so
/// the announcement is confirmed with `0` and data window `k` with `k + 1`.
/// `unreceived` lists the blocks still missing, ascending.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Acknowledgement {
    pub id: TransferId,
    pub window_index: u32,
    pub unreceived: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Data {
    pub id: TransferId,
    pub block_number: u32,
    pub payload: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ErrorPacket {
    pub id: TransferId,
    pub code: ErrorCode,
    pub message: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Packet {
    WriteRequest(WriteRequest),
    Acknowledgement(Acknowledgement),
    Data(Data),
    Error(ErrorPacket),
}

/// Coarse classification of a decode failure.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecodeCategory {
    Truncation,
    Magic,
    Invariant,
}

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum DecodeError {
    #[error("packet truncated")]
    Truncated,
    #[error("bad magic bytes")]
    BadMagic,
    #[error("unsupported version {0}")]
    BadVersion(u8),
    #[error("unknown packet type {0}")]
    UnknownType(u8),
    #[error("invalid packet: {0}")]
    Invariant(&'static str),
}

impl DecodeError {
    pub fn category(&self) -> DecodeCategory {
        match self {
            DecodeError::Truncated => DecodeCategory::Truncation,
            DecodeError::BadMagic | DecodeError::BadVersion(_) | DecodeError::UnknownType(_) => {
                DecodeCategory::Magic
            }
            DecodeError::Invariant(_) => DecodeCategory::Invariant,
        }
    }
}

/// `ceil(data_size / block_size)`, or `None` when it does not fit a `u32`.
pub fn block_count_for(data_size: u64, block_size: u32) -> Option<u32> {
    if block_size == 0 {
        return None;
    }
    u32::try_from(data_size.div_ceil(u64::from(block_size))).ok()
}

impl Packet {
    pub fn id(&self) -> TransferId {
        match self {
            Packet::WriteRequest(p) => p.id,
            Packet::Acknowledgement(p) => p.id,
            Packet::Data(p) => p.id,
            Packet::Error(p) => p.id,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Packet::WriteRequest(_) => "WriteRequest",
            Packet::Acknowledgement(_) => "Acknowledgement",
            Packet::Data(_) => "Data",
            Packet::Error(_) => "Error",
        }
    }

    pub fn encoded_len(&self) -> usize {
        HEADER_LEN
            + match self {
                Packet::WriteRequest(p) => 8 + 2 + p.info.len() + 8 + 4 + 4 + 4 + 8 + 2 + p.metadata.len(),
                Packet::Acknowledgement(p) => 8 + 4 + 2 + 4 * p.unreceived.len(),
                Packet::Data(p) => 8 + 4 + 2 + p.payload.len(),
                Packet::Error(p) => 8 + 1 + 2 + p.message.len(),
            }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(self.encoded_len());
        self.encode_into(&mut buf);
        buf
    }

    /// Appends the encoding to `buf`.
    pub fn encode_into(&self, buf: &mut Vec<u8>) {
        buf.extend_from_slice(&MAGIC);
        buf.push(VERSION);
        match self {
            Packet::WriteRequest(p) => {
                debug_assert!(p.info.len() <= MAX_INFO_LEN && p.metadata.len() <= MAX_METADATA_LEN);
                buf.push(TYPE_WRITE_REQUEST);
                buf.extend_from_slice(&p.id.0.to_be_bytes());
                put_bytes(buf, p.info.as_bytes());
                buf.extend_from_slice(&p.data_size.to_be_bytes());
                buf.extend_from_slice(&p.block_size.to_be_bytes());
                buf.extend_from_slice(&p.window_size.to_be_bytes());
                buf.extend_from_slice(&p.block_count.to_be_bytes());
                buf.extend_from_slice(&p.nonce.to_be_bytes());
                put_bytes(buf, &p.metadata);
            }
            Packet::Acknowledgement(p) => {
                debug_assert!(p.unreceived.len() <= MAX_UNRECEIVED);
                buf.push(TYPE_ACK);
                buf.extend_from_slice(&p.id.0.to_be_bytes());
                buf.extend_from_slice(&p.window_index.to_be_bytes());
                buf.extend_from_slice(&(p.unreceived.len() as u16).to_be_bytes());
                for block in &p.unreceived {
                    buf.extend_from_slice(&block.to_be_bytes());
                }
            }
            Packet::Data(p) => {
                debug_assert!(p.payload.len() <= MAX_BLOCK_SIZE as usize);
                buf.push(TYPE_DATA);
                buf.extend_from_slice(&p.id.0.to_be_bytes());
                buf.extend_from_slice(&p.block_number.to_be_bytes());
                put_bytes(buf, &p.payload);
            }
            Packet::Error(p) => {
                debug_assert!(p.message.len() <= MAX_MESSAGE_LEN);
                buf.push(TYPE_ERROR);
                buf.extend_from_slice(&p.id.0.to_be_bytes());
                buf.push(p.code as u8);
                put_bytes(buf, p.message.as_bytes());
            }
        }
    }

    pub fn decode(bytes: &[u8]) -> Result<Packet, DecodeError> {
        let mut r = Reader { buf: bytes };
        if r.take(2)? != MAGIC {
            return Err(DecodeError::BadMagic);
        }
        let version = r.u8()?;
        if version != VERSION {
            return Err(DecodeError::BadVersion(version));
        }
        let packet = match r.u8()? {
            TYPE_WRITE_REQUEST => {
                let id = TransferId(r.u64()?);
                let info = r.string(MAX_INFO_LEN, "info too long")?;
                let data_size = r.u64()?;
                let block_size = r.u32()?;
                let window_size = r.u32()?;
                let block_count = r.u32()?;
                let nonce = r.u64()?;
                let metadata = r.bytes(MAX_METADATA_LEN, "metadata too long")?.to_vec();
                if block_size == 0 || block_size > MAX_BLOCK_SIZE {
                    return Err(DecodeError::Invariant("block size out of range"));
                }
                if window_size == 0 {
                    return Err(DecodeError::Invariant("zero window size"));
                }
                if block_count_for(data_size, block_size) != Some(block_count) {
                    return Err(DecodeError::Invariant("block count does not match data size"));
                }
                Packet::WriteRequest(WriteRequest {
                    id,
                    info,
                    data_size,
                    block_size,
                    window_size,
                    block_count,
                    nonce,
                    metadata,
                })
            }
            TYPE_ACK => {
                let id = TransferId(r.u64()?);
                let window_index = r.u32()?;
                let count = r.u16()? as usize;
                if count > MAX_UNRECEIVED {
                    return Err(DecodeError::Invariant("unreceived list too long"));
                }
                let raw = r.take(count * 4)?;
                let unreceived: Vec<u32> = raw
                    .chunks_exact(4)
                    .map(|c| u32::from_be_bytes([c[0], c[1], c[2], c[3]]))
                    .collect();
                if unreceived.windows(2).any(|w| w[0] >= w[1]) {
                    return Err(DecodeError::Invariant("unreceived list not strictly increasing"));
                }
                Packet::Acknowledgement(Acknowledgement {
                    id,
                    window_index,
                    unreceived,
                })
            }
            TYPE_DATA => {
                let id = TransferId(r.u64()?);
                let block_number = r.u32()?;
                let payload = r.bytes(MAX_BLOCK_SIZE as usize, "payload too long")?.to_vec();
                Packet::Data(Data {
                    id,
                    block_number,
                    payload,
                })
            }
            TYPE_ERROR => {
                let id = TransferId(r.u64()?);
                let code = ErrorCode::from_u8(r.u8()?)
                    .ok_or(DecodeError::Invariant("unknown error code"))?;
                let message = r.string(MAX_MESSAGE_LEN, "message too long")?;
                Packet::Error(ErrorPacket { id, code, message })
            }
            other => return Err(DecodeError::UnknownType(other)),
        };
        if !r.buf.is_empty() {
            return Err(DecodeError::Invariant("trailing bytes"));
        }
        Ok(packet)
    }
}

/// Largest block whose Data packet, after a cipher adding `cipher_overhead`
/// bytes, still fits [`DATAGRAM_BUDGET`].
pub fn max_block_size(cipher_overhead: usize) -> u32 {
    let room = DATAGRAM_BUDGET.saturating_sub(DATA_OVERHEAD + cipher_overhead);
    (room as u32).min(MAX_BLOCK_SIZE)
}

pub fn encode_packet(packet: &Packet) -> Vec<u8> {
    packet.encode()
}

pub fn decode_packet(bytes: &[u8]) -> Result<Packet, DecodeError> {
    Packet::decode(bytes)
}

fn put_bytes(buf: &mut Vec<u8>, bytes: &[u8]) {
    buf.extend_from_slice(&(bytes.len() as u16).to_be_bytes());
    buf.extend_from_slice(bytes);
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], DecodeError> {
        if self.buf.len() < n {
            return Err(DecodeError::Truncated);
        }
        let (head, tail) = self.buf.split_at(n);
        self.buf = tail;
        Ok(head)
    }

    fn u8(&mut self) -> Result<u8, DecodeError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, DecodeError> {
        let b = self.take(2)?;
        Ok(u16::from_be_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32, DecodeError> {
        let b = self.take(4)?;
        Ok(u32::from_be_bytes(b.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, DecodeError> {
        let b = self.take(8)?;
        Ok(u64::from_be_bytes(b.try_into().unwrap()))
    }

    /// Length-prefixed field; the cap is checked before the body is touched.
    fn bytes(&mut self, cap: usize, what: &'static str) -> Result<&'a [u8], DecodeError> {
        let len = self.u16()? as usize;
        if len > cap {
            return Err(DecodeError::Invariant(what));
        }
        self.take(len)
    }

    fn string(&mut self, cap: usize, what: &'static str) -> Result<String, DecodeError> {
        let raw = self.bytes(cap, what)?;
        std::str::from_utf8(raw)
            .map(str::to_owned)
            .map_err(|_| DecodeError::Invariant("invalid utf-8"))
    }
}
