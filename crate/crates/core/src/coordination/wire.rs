//! Wire format for the cooperation round.
//!
//! Binary framing: a 4-byte little-endian payload length, then the payload
//!
//! ```text
//! payload  := tag:u8  round:u32  body
//! tag 1    UploadBatch      pair:u16 dim:u16 count:u16 upload*count
//! tag 2    GlobalBroadcast  dim:u16 count:u16 upload*count   (pair = source)
//! tag 3    RoundBarrier     pair:u16
//! upload   := pair:u16 class:u16 f1:f32 value:f32*dim
//! ```
//!
//! All integers and floats are little-endian. The JSON framing carries the
//! same fields, one message per line, with values already rounded to `f32`
//! so both framings transport identical numbers.

use std::io::{BufRead, Read, Write};

use serde::{Deserialize, Serialize};

use super::{aggregate_global, GlobalSkb, KnowledgeUpload};
use crate::error::{Error, Result};
use crate::skb::{AttributeVector, ClassId};
use crate::PairId;

pub const TAG_UPLOAD_BATCH: u8 = 1;
pub const TAG_GLOBAL_BROADCAST: u8 = 2;
pub const TAG_ROUND_BARRIER: u8 = 3;

/// Frames larger than this are rejected before allocation.
pub const MAX_FRAME_LEN: usize = 64 << 20;

#[derive(Clone, Debug, PartialEq)]
pub enum RoundMessage {
    UploadBatch {
        round: u32,
        pair: PairId,
        uploads: Vec<KnowledgeUpload>,
    },
    GlobalBroadcast {
        round: u32,
        global: GlobalSkb,
    },
    RoundBarrier {
        round: u32,
        pair: PairId,
    },
}

impl RoundMessage {
    pub fn round(&self) -> u32 {
        match self {
            RoundMessage::UploadBatch { round, .. }
            | RoundMessage::GlobalBroadcast { round, .. }
            | RoundMessage::RoundBarrier { round, .. } => *round,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            RoundMessage::UploadBatch { .. } => "UploadBatch",
            RoundMessage::GlobalBroadcast { .. } => "GlobalBroadcast",
            RoundMessage::RoundBarrier { .. } => "RoundBarrier",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WireFormat {
    #[default]
    Binary,
    Json,
}

impl std::str::FromStr for WireFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "binary" => Ok(WireFormat::Binary),
            "json" => Ok(WireFormat::Json),
            other => Err(Error::Config(format!("unknown wire format {other:?}"))),
        }
    }
}

impl WireFormat {
    pub fn write_message<W: Write>(self, writer: &mut W, msg: &RoundMessage) -> Result<()> {
        match self {
            WireFormat::Binary => {
                let payload = encode_payload(msg)?;
                writer.write_all(&(payload.len() as u32).to_le_bytes())?;
                writer.write_all(&payload)?;
            }
            WireFormat::Json => {
                let mut line = serde_json::to_string(&JsonMessage::from(msg))?;
                line.push('\n');
                writer.write_all(line.as_bytes())?;
            }
        }
        writer.flush()?;
        Ok(())
    }

    /// Reads one message; `Ok(None)` on a clean end of stream.
    pub fn read_message<R: BufRead>(self, reader: &mut R) -> Result<Option<RoundMessage>> {
        match self {
            WireFormat::Binary => {
                let mut len = [0u8; 4];
                if !read_exact_or_eof(reader, &mut len)? {
                    return Ok(None);
                }
                let len = u32::from_le_bytes(len) as usize;
                if len > MAX_FRAME_LEN {
                    return Err(Error::Protocol(format!(
                        "frame of {len} bytes exceeds limit"
                    )));
                }
                let mut payload = vec![0u8; len];
                reader.read_exact(&mut payload)?;
                decode_payload(&payload).map(Some)
            }
            WireFormat::Json => {
                let mut line = String::new();
                loop {
                    line.clear();
                    if reader.read_line(&mut line)? == 0 {
                        return Ok(None);
                    }
                    if !line.trim().is_empty() {
                        break;
                    }
                }
                let json: JsonMessage = serde_json::from_str(line.trim())
                    .map_err(|e| Error::Protocol(format!("bad JSON message: {e}")))?;
                json.try_into().map(Some)
            }
        }
    }
}

fn read_exact_or_eof<R: Read>(reader: &mut R, buf: &mut [u8]) -> Result<bool> {
    let mut filled = 0;
    while filled < buf.len() {
        match reader.read(&mut buf[filled..]) {
            Ok(0) if filled == 0 => return Ok(false),
            Ok(0) => {
                return Err(Error::Io(std::io::Error::new(
                    std::io::ErrorKind::UnexpectedEof,
                    "truncated frame header",
                )))
            }
            Ok(n) => filled += n,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    Ok(true)
}

fn narrow<T: TryFrom<usize>>(value: usize, what: &str) -> Result<T> {
    T::try_from(value)
        .map_err(|_| Error::Protocol(format!("{what} {value} does not fit the wire field")))
}

fn put_upload(out: &mut Vec<u8>, u: &KnowledgeUpload, dim: usize) -> Result<()> {
    if u.vector.dim() != dim {
        return Err(Error::DimensionMismatch {
            expected: dim,
            found: u.vector.dim(),
        });
    }
    out.extend_from_slice(&u.pair.0.to_le_bytes());
    out.extend_from_slice(&u.class.0.to_le_bytes());
    out.extend_from_slice(&(u.f1 as f32).to_le_bytes());
    for v in u.vector.to_f32() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(())
}

fn batch_dim(uploads: &[KnowledgeUpload]) -> usize {
    uploads.first().map_or(0, |u| u.vector.dim())
}

pub fn encode_payload(msg: &RoundMessage) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    match msg {
        RoundMessage::UploadBatch {
            round,
            pair,
            uploads,
        } => {
            out.push(TAG_UPLOAD_BATCH);
            out.extend_from_slice(&round.to_le_bytes());
            out.extend_from_slice(&pair.0.to_le_bytes());
            let dim = batch_dim(uploads);
            out.extend_from_slice(&narrow::<u16>(dim, "dimension")?.to_le_bytes());
            out.extend_from_slice(&narrow::<u16>(uploads.len(), "upload count")?.to_le_bytes());
            for u in uploads {
                put_upload(&mut out, u, dim)?;
            }
        }
        RoundMessage::GlobalBroadcast { round, global } => {
            out.push(TAG_GLOBAL_BROADCAST);
            out.extend_from_slice(&round.to_le_bytes());
            let uploads = global.to_uploads();
            let dim = batch_dim(&uploads);
            out.extend_from_slice(&narrow::<u16>(dim, "dimension")?.to_le_bytes());
            out.extend_from_slice(&narrow::<u16>(uploads.len(), "entry count")?.to_le_bytes());
            for u in &uploads {
                put_upload(&mut out, u, dim)?;
            }
        }
        RoundMessage::RoundBarrier { round, pair } => {
            out.push(TAG_ROUND_BARRIER);
            out.extend_from_slice(&round.to_le_bytes());
            out.extend_from_slice(&pair.0.to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        let slice = self
            .bytes
            .get(self.pos..end)
            .ok_or_else(|| Error::Protocol(format!("payload truncated at byte {}", self.pos)))?;
        self.pos = end;
        Ok(slice)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f32(&mut self) -> Result<f32> {
        let b = self.take(4)?;
        Ok(f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn upload(&mut self, dim: usize) -> Result<KnowledgeUpload> {
        let pair = PairId(self.u16()?);
        let class = ClassId(self.u16()?);
        let f1 = f64::from(self.f32()?);
        let values = (0..dim).map(|_| self.f32()).collect::<Result<Vec<_>>>()?;
        Ok(KnowledgeUpload {
            pair,
            class,
            f1,
            vector: AttributeVector::from_f32(&values)?,
        })
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::Protocol(format!(
                "{} trailing bytes after message",
                self.bytes.len() - self.pos
            )));
        }
        Ok(())
    }
}

pub fn decode_payload(bytes: &[u8]) -> Result<RoundMessage> {
    let mut cur = Cursor { bytes, pos: 0 };
    let tag = cur.u8()?;
    let round = cur.u32()?;
    let msg = match tag {
        TAG_UPLOAD_BATCH => {
            let pair = PairId(cur.u16()?);
            let dim = usize::from(cur.u16()?);
            let count = cur.u16()?;
            let uploads = (0..count)
                .map(|_| cur.upload(dim))
                .collect::<Result<Vec<_>>>()?;
            RoundMessage::UploadBatch {
                round,
                pair,
                uploads,
            }
        }
        TAG_GLOBAL_BROADCAST => {
            let dim = usize::from(cur.u16()?);
            let count = cur.u16()?;
            let uploads = (0..count)
                .map(|_| cur.upload(dim))
                .collect::<Result<Vec<_>>>()?;
            RoundMessage::GlobalBroadcast {
                round,
                global: global_from_entries(uploads)?,
            }
        }
        TAG_ROUND_BARRIER => RoundMessage::RoundBarrier {
            round,
            pair: PairId(cur.u16()?),
        },
        other => return Err(Error::Protocol(format!("unknown message tag {other}"))),
    };
    cur.finish()?;
    Ok(msg)
}

fn global_from_entries(entries: Vec<KnowledgeUpload>) -> Result<GlobalSkb> {
    let n = entries.len();
    let global = aggregate_global(&entries);
    if global.len() != n {
        return Err(Error::Protocol("global broadcast repeats a class".into()));
    }
    Ok(global)
}

#[derive(Serialize, Deserialize)]
struct JsonUpload {
    pair: u16,
    class: u16,
    f1: f32,
    values: Vec<f32>,
}

impl From<&KnowledgeUpload> for JsonUpload {
    fn from(u: &KnowledgeUpload) -> Self {
        JsonUpload {
            pair: u.pair.0,
            class: u.class.0,
            f1: u.f1 as f32,
            values: u.vector.to_f32(),
        }
    }
}

impl TryFrom<JsonUpload> for KnowledgeUpload {
    type Error = Error;

    fn try_from(u: JsonUpload) -> Result<Self> {
        Ok(KnowledgeUpload {
            pair: PairId(u.pair),
            class: ClassId(u.class),
            f1: f64::from(u.f1),
            vector: AttributeVector::from_f32(&u.values)?,
        })
    }
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "type", deny_unknown_fields)]
enum JsonMessage {
    UploadBatch {
        round: u32,
        pair: u16,
        uploads: Vec<JsonUpload>,
    },
    GlobalBroadcast {
        round: u32,
        entries: Vec<JsonUpload>,
    },
    RoundBarrier {
        round: u32,
        pair: u16,
    },
}

impl From<&RoundMessage> for JsonMessage {
    fn from(msg: &RoundMessage) -> Self {
        match msg {
            RoundMessage::UploadBatch {
                round,
                pair,
                uploads,
            } => JsonMessage::UploadBatch {
                round: *round,
                pair: pair.0,
                uploads: uploads.iter().map(JsonUpload::from).collect(),
            },
            RoundMessage::GlobalBroadcast { round, global } => JsonMessage::GlobalBroadcast {
                round: *round,
                entries: global.to_uploads().iter().map(JsonUpload::from).collect(),
            },
            RoundMessage::RoundBarrier { round, pair } => JsonMessage::RoundBarrier {
                round: *round,
                pair: pair.0,
            },
        }
    }
}

impl TryFrom<JsonMessage> for RoundMessage {
    type Error = Error;

    fn try_from(msg: JsonMessage) -> Result<Self> {
        let convert = |v: Vec<JsonUpload>| {
            v.into_iter()
                .map(KnowledgeUpload::try_from)
                .collect::<Result<Vec<_>>>()
        };
        Ok(match msg {
            JsonMessage::UploadBatch {
                round,
                pair,
                uploads,
            } => RoundMessage::UploadBatch {
                round,
                pair: PairId(pair),
                uploads: convert(uploads)?,
            },
            JsonMessage::GlobalBroadcast { round, entries } => RoundMessage::GlobalBroadcast {
                round,
                global: global_from_entries(convert(entries)?)?,
            },
            JsonMessage::RoundBarrier { round, pair } => RoundMessage::RoundBarrier {
                round,
                pair: PairId(pair),
            },
        })
    }
}
