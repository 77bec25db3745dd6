//! QTT1 binary time-tag files.
//!
//! Little-endian throughout. A 32-byte header
//!
//! | offset | size | field                     |
//! |--------|------|---------------------------|
//! | 0      | 4    | magic `"QTT1"`            |
//! | 4      | 1    | version (1)               |
//! | 5      | 1    | channel count             |
//! | 6      | 2    | reserved, 0               |
//! | 8      | 8    | tick in picoseconds (1)   |
//! | 16     | 8    | duty on-duration, ps      |
//! | 24     | 8    | duty off-duration, ps     |
//!
//! is followed by 16-byte records: `timestamp_ticks: u64, channel: u32,
//! reserved: u32 = 0`. Both duty fields zero means the run was not gated.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::timetag::{DutyCycle, StreamHeader, TagStream, TimeTag};

pub const MAGIC: [u8; 4] = *b"QTT1";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 32;
pub const RECORD_LEN: usize = 16;
pub const TICK_PS: u64 = 1;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("bad magic {found:?} at byte 0")]
    BadMagic { found: [u8; 4] },

    #[error("unsupported version {version} at byte 4")]
    UnsupportedVersion { version: u8 },

    #[error("invalid header field at byte {offset}: {reason}")]
    InvalidHeader { offset: u64, reason: String },

    #[error("truncated at byte {offset}: needed {needed} bytes, found {found}")]
    Truncated {
        offset: u64,
        needed: usize,
        found: usize,
    },

    #[error("out-of-order record at byte {offset}: ({timestamp} ps, ch {channel}) after ({prev_timestamp} ps, ch {prev_channel})")]
    OutOfOrder {
        offset: u64,
        timestamp: u64,
        channel: u32,
        prev_timestamp: u64,
        prev_channel: u32,
    },

    #[error("record at byte {offset}: channel {channel} outside channel count {channel_count}")]
    ChannelOutOfRange {
        offset: u64,
        channel: u32,
        channel_count: u8,
    },

    #[error("record at byte {offset}: reserved field is {value}, expected 0")]
    ReservedRecordField { offset: u64, value: u32 },

    #[error("cannot encode stream: {0}")]
    Unencodable(String),

    #[error("i/o: {0}")]
    Io(#[from] io::Error),
}

impl FormatError {
    pub fn kind(&self) -> &'static str {
        match self {
            FormatError::BadMagic { .. } => "bad-magic",
            FormatError::UnsupportedVersion { .. } => "unsupported-version",
            FormatError::InvalidHeader { .. } => "invalid-header",
            FormatError::Truncated { .. } => "truncated",
            FormatError::OutOfOrder { .. } => "out-of-order",
            FormatError::ChannelOutOfRange { .. } => "channel-out-of-range",
            FormatError::ReservedRecordField { .. } => "reserved-field",
            FormatError::Unencodable(_) => "unencodable",
            FormatError::Io(_) => "io",
        }
    }

    /// Byte offset the error refers to, when it refers to one.
    pub fn offset(&self) -> Option<u64> {
        match self {
            FormatError::BadMagic { .. } => Some(0),
            FormatError::UnsupportedVersion { .. } => Some(4),
            FormatError::InvalidHeader { offset, .. }
            | FormatError::Truncated { offset, .. }
            | FormatError::OutOfOrder { offset, .. }
            | FormatError::ChannelOutOfRange { offset, .. }
            | FormatError::ReservedRecordField { offset, .. } => Some(*offset),
            FormatError::Unencodable(_) | FormatError::Io(_) => None,
        }
    }
}

/// Fills `buf` as far as the reader allows; returns the number of bytes read.
fn read_full(reader: &mut impl Read, buf: &mut [u8]) -> io::Result<usize> {
    let mut filled = 0;
    while filled < buf.len() {
        match reader.read(&mut buf[filled..]) {
            Ok(0) => break,
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    Ok(filled)
}

fn le_u64(b: &[u8]) -> u64 {
    u64::from_le_bytes(b[..8].try_into().unwrap())
}

fn le_u32(b: &[u8]) -> u32 {
    u32::from_le_bytes(b[..4].try_into().unwrap())
}

fn decode_header(buf: &[u8; HEADER_LEN]) -> Result<(u8, DutyCycle), FormatError> {
    let magic: [u8; 4] = buf[0..4].try_into().unwrap();
    if magic != MAGIC {
        return Err(FormatError::BadMagic { found: magic });
    }
    if buf[4] != VERSION {
        return Err(FormatError::UnsupportedVersion { version: buf[4] });
    }
    let channel_count = buf[5];
    let reserved = u16::from_le_bytes([buf[6], buf[7]]);
    if reserved != 0 {
        return Err(FormatError::InvalidHeader {
            offset: 6,
            reason: format!("reserved field is {reserved}, expected 0"),
        });
    }
    let tick = le_u64(&buf[8..]);
    if tick != TICK_PS {
        return Err(FormatError::InvalidHeader {
            offset: 8,
            reason: format!("tick of {tick} ps unsupported, only 1 ps"),
        });
    }
    let on = le_u64(&buf[16..]);
    let off = le_u64(&buf[24..]);
    if on == 0 && off != 0 {
        return Err(FormatError::InvalidHeader {
            offset: 16,
            reason: "duty on-duration is 0 with nonzero off-duration".into(),
        });
    }
    Ok((
        channel_count,
        DutyCycle {
            on_ps: on,
            off_ps: off,
            phase_ps: 0,
        },
    ))
}

fn encode_header(header: &StreamHeader) -> Result<[u8; HEADER_LEN], FormatError> {
    if header.duty.phase_ps != 0 {
        return Err(FormatError::Unencodable(format!(
            "duty phase {} ps cannot be stored, QTT1 windows start at 0",
            header.duty.phase_ps
        )));
    }
    let mut buf = [0u8; HEADER_LEN];
    buf[0..4].copy_from_slice(&MAGIC);
    buf[4] = VERSION;
    buf[5] = header.channel_count;
    buf[8..16].copy_from_slice(&TICK_PS.to_le_bytes());
    buf[16..24].copy_from_slice(&header.duty.on_ps.to_le_bytes());
    buf[24..32].copy_from_slice(&header.duty.off_ps.to_le_bytes());
    Ok(buf)
}

/// Decodes a stream, validating ordering unless `require_sorted` is false.
fn decode(reader: &mut impl Read, require_sorted: bool) -> Result<TagStream, FormatError> {
    let mut head = [0u8; HEADER_LEN];
    let n = read_full(reader, &mut head)?;
    if n < HEADER_LEN {
        // a short file with the wrong magic is reported as bad magic
        if n >= 4 && head[0..4] != MAGIC {
            return Err(FormatError::BadMagic {
                found: head[0..4].try_into().unwrap(),
            });
        }
        return Err(FormatError::Truncated {
            offset: 0,
            needed: HEADER_LEN,
            found: n,
        });
    }
    let (channel_count, duty) = decode_header(&head)?;

    let mut tags = Vec::new();
    let mut offset = HEADER_LEN as u64;
    let mut record = [0u8; RECORD_LEN];
    let mut prev: Option<(u64, u32)> = None;
    loop {
        let n = read_full(reader, &mut record)?;
        if n == 0 {
            break;
        }
        if n < RECORD_LEN {
            return Err(FormatError::Truncated {
                offset,
                needed: RECORD_LEN,
                found: n,
            });
        }
        let timestamp = le_u64(&record[0..]);
        let channel = le_u32(&record[8..]);
        let reserved = le_u32(&record[12..]);
        if channel >= channel_count as u32 {
            return Err(FormatError::ChannelOutOfRange {
                offset,
                channel,
                channel_count,
            });
        }
        if reserved != 0 {
            return Err(FormatError::ReservedRecordField {
                offset: offset + 12,
                value: reserved,
            });
        }
        if let Some((pt, pc)) = prev {
            if require_sorted && (pt, pc) > (timestamp, channel) {
                return Err(FormatError::OutOfOrder {
                    offset,
                    timestamp,
                    channel,
                    prev_timestamp: pt,
                    prev_channel: pc,
                });
            }
        }
        prev = Some((timestamp, channel));
        tags.push(TimeTag::new(timestamp, channel as u8));
        offset += RECORD_LEN as u64;
    }

    let duration = tags
        .iter()
        .map(|t| t.timestamp.saturating_add(1))
        .max()
        .unwrap_or(0);
    let header = StreamHeader::new(channel_count, duty, duration);
    if require_sorted {
        Ok(TagStream::from_parts_unchecked(header, tags))
    } else {
        Ok(TagStream::from_unsorted(header, tags).expect("channels validated, tags sorted"))
    }
}

pub fn read_from(reader: &mut impl Read) -> Result<TagStream, FormatError> {
    decode(reader, true)
}

pub fn write_to(stream: &TagStream, writer: &mut impl Write) -> Result<(), FormatError> {
    writer.write_all(&encode_header(stream.header())?)?;
    let mut record = [0u8; RECORD_LEN];
    for tag in stream.tags() {
        record[0..8].copy_from_slice(&tag.timestamp.to_le_bytes());
        record[8..12].copy_from_slice(&(tag.channel as u32).to_le_bytes());
        writer.write_all(&record)?;
    }
    Ok(())
}

pub fn encode(stream: &TagStream) -> Result<Vec<u8>, FormatError> {
    let mut out = Vec::with_capacity(HEADER_LEN + RECORD_LEN * stream.len());
    write_to(stream, &mut out)?;
    Ok(out)
}

pub fn decode_bytes(bytes: &[u8]) -> Result<TagStream, FormatError> {
    read_from(&mut &bytes[..])
}

pub fn read_stream(path: impl AsRef<Path>) -> Result<TagStream, FormatError> {
    let mut reader = BufReader::new(File::open(path)?);
    read_from(&mut reader)
}

/// Reads a file whose records may be out of order and sorts them.
pub fn read_stream_unsorted(path: impl AsRef<Path>) -> Result<TagStream, FormatError> {
    let mut reader = BufReader::new(File::open(path)?);
    decode(&mut reader, false)
}

pub fn write_stream(stream: &TagStream, path: impl AsRef<Path>) -> Result<(), FormatError> {
    let mut writer = BufWriter::new(File::create(path)?);
    write_to(stream, &mut writer)?;
    writer.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::timetag::PS_PER_MS;

    fn sample() -> TagStream {
        let header = StreamHeader::new(4, DutyCycle::default(), 0);
        TagStream::new(
            header,
            vec![
                TimeTag::new(0, 0),
                TimeTag::new(5, 1),
                TimeTag::new(5, 3),
                TimeTag::new(PS_PER_MS, 2),
            ],
        )
        .unwrap()
    }

    #[test]
    fn header_layout() {
        let bytes = encode(&sample()).unwrap();
        assert_eq!(bytes.len(), HEADER_LEN + 4 * RECORD_LEN);
        assert_eq!(&bytes[0..4], b"QTT1");
        assert_eq!(bytes[4], 1);
        assert_eq!(bytes[5], 4);
        assert_eq!(&bytes[6..8], &[0, 0]);
        assert_eq!(le_u64(&bytes[8..]), 1);
        assert_eq!(le_u64(&bytes[16..]), PS_PER_MS);
        assert_eq!(le_u64(&bytes[24..]), 12 * PS_PER_MS);
        // second record: t = 5, channel 1
        assert_eq!(le_u64(&bytes[48..]), 5);
        assert_eq!(le_u32(&bytes[56..]), 1);
        assert_eq!(le_u32(&bytes[60..]), 0);
    }

    #[test]
    fn empty_body() {
        let header = StreamHeader::new(2, DutyCycle::ungated(), 0);
        let bytes = encode(&TagStream::empty(header)).unwrap();
        assert_eq!(bytes.len(), HEADER_LEN);
        let back = decode_bytes(&bytes).unwrap();
        assert!(back.is_empty());
        assert!(!back.duty().is_gated());
    }

    #[test]
    fn timestamp_beyond_i64() {
        let header = StreamHeader::new(1, DutyCycle::ungated(), 0);
        let big = 1u64 << 63;
        let stream =
            TagStream::new(header, vec![TimeTag::new(big, 0), TimeTag::new(u64::MAX, 0)]).unwrap();
        let bytes = encode(&stream).unwrap();
        let back = decode_bytes(&bytes).unwrap();
        assert_eq!(back.tags()[0].timestamp, big);
        assert_eq!(back.tags()[1].timestamp, u64::MAX);
        assert_eq!(back.duration_ps(), u64::MAX);
        assert_eq!(encode(&back).unwrap(), bytes);
    }

    #[test]
    fn phase_cannot_be_encoded() {
        let header = StreamHeader::new(1, DutyCycle::default().with_phase(3), 0);
        assert!(matches!(
            encode(&TagStream::empty(header)),
            Err(FormatError::Unencodable(_))
        ));
    }

    #[test]
    fn unsorted_reader_sorts() {
        let mut bytes = encode(&sample()).unwrap();
        // swap records 0 and 3
        let (a, b) = (HEADER_LEN, HEADER_LEN + 3 * RECORD_LEN);
        for i in 0..RECORD_LEN {
            bytes.swap(a + i, b + i);
        }
        assert!(matches!(
            decode_bytes(&bytes),
            Err(FormatError::OutOfOrder { offset: 48, .. })
        ));
        let sorted = decode(&mut &bytes[..], false).unwrap();
        assert_eq!(sorted.tags(), sample().tags());
    }
}
