//! Binary persistence for shared tables and raw detection streams.
//!
//! Table layout, little-endian throughout:
//! `"OTPT" | version u16 | party u8 | reserved u8 | line_count u64 | seed u64`
//! followed by the records and a CRC32 over every preceding byte.

use std::fs;
use std::io::{self, Write};
use std::path::Path;

use thiserror::Error;

use super::{
    DetectionEvent, LineRecord, LineRecordAlice, LineRecordBob, LineStatus, Party, SharedTable,
    SharedTableAlice, SharedTableBob, TableError,
};
use crate::qsim::GateG1;

pub const TABLE_MAGIC: [u8; 4] = *b"OTPT";
pub const EVENTS_MAGIC: [u8; 4] = *b"OTPE";
pub const TABLE_VERSION: u16 = 1;
pub const TABLE_HEADER_LEN: usize = 24;
const EVENTS_HEADER_LEN: usize = 32;
const EVENT_RECORD_LEN: usize = 11;

#[derive(Debug, Error)]
pub enum TableFileError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("bad magic bytes")]
    BadMagic,
    #[error("unsupported format version {0}")]
    VersionMismatch(u16),
    #[error("file truncated")]
    Truncated,
    #[error("checksum mismatch (stored {stored:#010x}, computed {computed:#010x})")]
    ChecksumMismatch { stored: u32, computed: u32 },
    #[error("file holds a {found} table, expected {expected}")]
    PartyMismatch { expected: Party, found: Party },
    #[error("invalid record: {0}")]
    InvalidRecord(String),
    #[error(transparent)]
    Table(#[from] TableError),
}

/// Per-party record codec.
pub trait RecordCodec: LineRecord {
    const RECORD_LEN: usize;
    fn encode(&self, out: &mut Vec<u8>);
    fn decode(bytes: &[u8]) -> Result<Self, TableFileError>;
}

fn status_from(code: u8) -> Result<LineStatus, TableFileError> {
    LineStatus::from_code(code).ok_or_else(|| TableFileError::InvalidRecord(format!("status {code}")))
}

fn bit_from(code: u8, what: &str) -> Result<bool, TableFileError> {
    match code {
        0 => Ok(false),
        1 => Ok(true),
        other => Err(TableFileError::InvalidRecord(format!("{what} {other}"))),
    }
}

fn u64_at(bytes: &[u8], at: usize) -> u64 {
    u64::from_le_bytes(bytes[at..at + 8].try_into().expect("8 bytes"))
}

impl RecordCodec for LineRecordAlice {
    const RECORD_LEN: usize = 10;

    fn encode(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.line_id.to_le_bytes());
        out.push(self.gate.code());
        out.push(self.status.code());
    }

    fn decode(bytes: &[u8]) -> Result<Self, TableFileError> {
        let gate = GateG1::from_code(bytes[8])
            .ok_or_else(|| TableFileError::InvalidRecord(format!("gate {}", bytes[8])))?;
        Ok(LineRecordAlice {
            line_id: u64_at(bytes, 0),
            gate,
            status: status_from(bytes[9])?,
        })
    }
}

impl RecordCodec for LineRecordBob {
    const RECORD_LEN: usize = 11;

    fn encode(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.line_id.to_le_bytes());
        out.push(u8::from(self.input));
        out.push(u8::from(self.output));
        out.push(self.status.code());
    }

    fn decode(bytes: &[u8]) -> Result<Self, TableFileError> {
        Ok(LineRecordBob {
            line_id: u64_at(bytes, 0),
            input: bit_from(bytes[8], "input")?,
            output: bit_from(bytes[9], "output")?,
            status: status_from(bytes[10])?,
        })
    }
}

pub fn write_table<R: RecordCodec>(table: &SharedTable<R>) -> Vec<u8> {
    let mut out = Vec::with_capacity(TABLE_HEADER_LEN + table.len() * R::RECORD_LEN + 4);
    out.extend_from_slice(&TABLE_MAGIC);
    out.extend_from_slice(&TABLE_VERSION.to_le_bytes());
    out.push(R::PARTY.code());
    out.push(0);
    out.extend_from_slice(&(table.len() as u64).to_le_bytes());
    out.extend_from_slice(&table.seed().to_le_bytes());
    for r in table.records() {
        r.encode(&mut out);
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

pub fn read_table<R: RecordCodec>(bytes: &[u8]) -> Result<SharedTable<R>, TableFileError> {
    if bytes.len() < 4 || bytes[..4] != TABLE_MAGIC {
        return Err(TableFileError::BadMagic);
    }
    if bytes.len() < TABLE_HEADER_LEN + 4 {
        return Err(TableFileError::Truncated);
    }
    let body_len = bytes.len() - 4;
    let stored = u32::from_le_bytes(bytes[body_len..].try_into().expect("4 bytes"));
    let computed = crc32fast::hash(&bytes[..body_len]);
    if stored != computed {
        return Err(TableFileError::ChecksumMismatch { stored, computed });
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != TABLE_VERSION {
        return Err(TableFileError::VersionMismatch(version));
    }
    let found = Party::from_code(bytes[6])
        .ok_or_else(|| TableFileError::InvalidRecord(format!("party {}", bytes[6])))?;
    if found != R::PARTY {
        return Err(TableFileError::PartyMismatch {
            expected: R::PARTY,
            found,
        });
    }
    let count = u64_at(bytes, 8);
    let seed = u64_at(bytes, 16);
    let expected_len = (count as u128) * R::RECORD_LEN as u128 + TABLE_HEADER_LEN as u128;
    if expected_len != body_len as u128 {
        return Err(TableFileError::Truncated);
    }
    let records = bytes[TABLE_HEADER_LEN..body_len]
        .chunks_exact(R::RECORD_LEN)
        .map(R::decode)
        .collect::<Result<Vec<_>, _>>()?;
    Ok(SharedTable::new(seed, records)?)
}

pub fn save_table<R: RecordCodec>(table: &SharedTable<R>, path: &Path) -> Result<(), TableFileError> {
    let bytes = write_table(table);
    let mut file = fs::File::create(path)?;
    file.write_all(&bytes)?;
    file.sync_all()?;
    Ok(())
}

pub fn load_table<R: RecordCodec>(path: &Path) -> Result<SharedTable<R>, TableFileError> {
    read_table(&fs::read(path)?)
}

/// Which party wrote the table at `path`, without decoding the records.
pub fn peek_party(bytes: &[u8]) -> Result<Party, TableFileError> {
    if bytes.len() < 7 || bytes[..4] != TABLE_MAGIC {
        return Err(TableFileError::BadMagic);
    }
    Party::from_code(bytes[6]).ok_or_else(|| TableFileError::InvalidRecord(format!("party {}", bytes[6])))
}

/// Detection stream layout:
/// `"OTPE" | version u16 | party u8 | reserved u8 | count u64 | table_start i64 | seed u64`,
/// then `timestamp i64, channel u8, flags u8, reserved u8` per event and a CRC32.
pub fn write_events(party: Party, events: &[DetectionEvent], table_start: i64, seed: u64) -> Vec<u8> {
    let mut out = Vec::with_capacity(EVENTS_HEADER_LEN + events.len() * EVENT_RECORD_LEN + 4);
    out.extend_from_slice(&EVENTS_MAGIC);
    out.extend_from_slice(&TABLE_VERSION.to_le_bytes());
    out.push(party.code());
    out.push(0);
    out.extend_from_slice(&(events.len() as u64).to_le_bytes());
    out.extend_from_slice(&table_start.to_le_bytes());
    out.extend_from_slice(&seed.to_le_bytes());
    for e in events {
        out.extend_from_slice(&e.timestamp.to_le_bytes());
        out.push(e.channel);
        out.push(u8::from(e.multi_photon));
        out.push(0);
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

/// Decoded detection stream: `(party, events, table_start, seed)`.
pub fn read_events(bytes: &[u8]) -> Result<(Party, Vec<DetectionEvent>, i64, u64), TableFileError> {
    if bytes.len() < 4 || bytes[..4] != EVENTS_MAGIC {
        return Err(TableFileError::BadMagic);
    }
    if bytes.len() < EVENTS_HEADER_LEN + 4 {
        return Err(TableFileError::Truncated);
    }
    let body_len = bytes.len() - 4;
    let stored = u32::from_le_bytes(bytes[body_len..].try_into().expect("4 bytes"));
    let computed = crc32fast::hash(&bytes[..body_len]);
    if stored != computed {
        return Err(TableFileError::ChecksumMismatch { stored, computed });
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != TABLE_VERSION {
        return Err(TableFileError::VersionMismatch(version));
    }
    let party = Party::from_code(bytes[6])
        .ok_or_else(|| TableFileError::InvalidRecord(format!("party {}", bytes[6])))?;
    let count = u64_at(bytes, 8);
    let table_start = u64_at(bytes, 16) as i64;
    let seed = u64_at(bytes, 24);
    if (count as u128) * EVENT_RECORD_LEN as u128 + EVENTS_HEADER_LEN as u128 != body_len as u128 {
        return Err(TableFileError::Truncated);
    }
    let mut events = Vec::with_capacity(count as usize);
    for chunk in bytes[EVENTS_HEADER_LEN..body_len].chunks_exact(EVENT_RECORD_LEN) {
        let channel = chunk[8];
        if channel > 3 {
            return Err(TableFileError::InvalidRecord(format!("channel {channel}")));
        }
        events.push(DetectionEvent {
            timestamp: u64_at(chunk, 0) as i64,
            channel,
            party,
            multi_photon: bit_from(chunk[9], "flags")?,
        });
    }
    if events.windows(2).any(|w| w[0].timestamp > w[1].timestamp) {
        return Err(TableFileError::InvalidRecord("timestamps decrease".into()));
    }
    Ok((party, events, table_start, seed))
}

pub fn save_events(
    path: &Path,
    party: Party,
    events: &[DetectionEvent],
    table_start: i64,
    seed: u64,
) -> Result<(), TableFileError> {
    fs::write(path, write_events(party, events, table_start, seed))?;
    Ok(())
}

pub fn load_events(path: &Path) -> Result<(Party, Vec<DetectionEvent>, i64, u64), TableFileError> {
    read_events(&fs::read(path)?)
}

impl SharedTableAlice {
    pub fn save(&self, path: &Path) -> Result<(), TableFileError> {
        save_table(self, path)
    }

    pub fn load(path: &Path) -> Result<Self, TableFileError> {
        load_table(path)
    }
}

impl SharedTableBob {
    pub fn save(&self, path: &Path) -> Result<(), TableFileError> {
        save_table(self, path)
    }

    pub fn load(path: &Path) -> Result<Self, TableFileError> {
        load_table(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_alice() -> SharedTableAlice {
        let mut t = SharedTableAlice::from_gates(42, GateG1::ALL.iter().copied().cycle().take(9));
        t.set_status(3, LineStatus::Deleted).unwrap();
        t.set_status(4, LineStatus::Proposed).unwrap();
        t
    }

    #[test]
    fn empty_table_is_header_plus_crc() {
        let t = SharedTableBob::from_pairs(7, std::iter::empty());
        let bytes = write_table(&t);
        assert_eq!(bytes.len(), TABLE_HEADER_LEN + 4);
        assert_eq!(&bytes[..4], b"OTPT");
        let back: SharedTableBob = read_table(&bytes).unwrap();
        assert!(back.is_empty());
        assert_eq!(back.seed(), 7);
    }

    #[test]
    fn layout_is_bit_exact() {
        let t = SharedTableBob::from_pairs(0x0102, [(true, false)]);
        let bytes = write_table(&t);
        let mut expect = b"OTPT".to_vec();
        expect.extend_from_slice(&[1, 0, 1, 0]);
        expect.extend_from_slice(&1u64.to_le_bytes());
        expect.extend_from_slice(&0x0102u64.to_le_bytes());
        expect.extend_from_slice(&0u64.to_le_bytes());
        expect.extend_from_slice(&[1, 0, 0]);
        let crc = crc32fast::hash(&expect);
        expect.extend_from_slice(&crc.to_le_bytes());
        assert_eq!(bytes, expect);
    }

    #[test]
    fn round_trip_and_corruption() {
        let t = sample_alice();
        let bytes = write_table(&t);
        let back: SharedTableAlice = read_table(&bytes).unwrap();
        assert_eq!(back, t);
        assert_eq!(write_table(&back), bytes);

        let mut bad = bytes.clone();
        bad[9] ^= 0x40;
        assert!(matches!(read_table::<LineRecordAlice>(&bad), Err(TableFileError::ChecksumMismatch { .. })));

        assert!(matches!(
            read_table::<LineRecordAlice>(&bytes[..bytes.len() - 3]),
            Err(TableFileError::ChecksumMismatch { .. })
        ));
        assert!(matches!(read_table::<LineRecordAlice>(&bytes[..10]), Err(TableFileError::Truncated)));
        assert!(matches!(read_table::<LineRecordAlice>(b"XXXX"), Err(TableFileError::BadMagic)));
        assert!(matches!(
            read_table::<LineRecordBob>(&bytes),
            Err(TableFileError::PartyMismatch { .. })
        ));
    }

    #[test]
    fn version_checked_after_crc() {
        let mut bytes = write_table(&sample_alice());
        bytes[4] = 2;
        let n = bytes.len() - 4;
        let crc = crc32fast::hash(&bytes[..n]);
        bytes[n..].copy_from_slice(&crc.to_le_bytes());
        assert!(matches!(read_table::<LineRecordAlice>(&bytes), Err(TableFileError::VersionMismatch(2))));
    }

    #[test]
    fn events_round_trip() {
        let events: Vec<_> = (0..5)
            .map(|i| DetectionEvent {
                timestamp: i * 1000 - 2,
                channel: (i % 4) as u8,
                party: Party::Bob,
                multi_photon: i == 3,
            })
            .collect();
        let bytes = write_events(Party::Bob, &events, 77, 9);
        let (party, back, start, seed) = read_events(&bytes).unwrap();
        assert_eq!((party, start, seed), (Party::Bob, 77, 9));
        assert_eq!(back, events);
    }
}
