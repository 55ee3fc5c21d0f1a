// SPDX-License-Identifier: Apache-2.0

//! Classic libpcap capture files (Ethernet link type only).

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use super::{parse_packet, serialize_packet, CapturedPacket, PacketError};

pub const MAGIC_MICROS: u32 = 0xa1b2_c3d4;
pub const MAGIC_NANOS: u32 = 0xa1b2_3c4d;
pub const LINKTYPE_ETHERNET: u32 = 1;
const DEFAULT_SNAPLEN: u32 = 262_144;

#[derive(Debug, Error)]
pub enum PcapError {
    #[error("pcap I/O error: {0}")]
    Io(#[from] io::Error),
    #[error("not a pcap file (magic {0:#010x})")]
    BadMagic(u32),
    #[error("unsupported link type {0}, only Ethernet (1) is handled")]
    LinkType(u32),
    #[error("record {index}: captured length {captured} exceeds wire length {wire}")]
    BadRecord { index: u64, captured: u32, wire: u32 },
    #[error("truncated pcap record {0}")]
    TruncatedRecord(u64),
    #[error("record {index}: {source}")]
    Packet { index: u64, source: PacketError },
}

/// One pcap record: capture time, on-wire length and the captured bytes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PcapRecord {
    pub timestamp_us: u64,
    pub wire_len: u32,
    pub data: Vec<u8>,
}

impl PcapRecord {
    pub fn parse(&self) -> Result<CapturedPacket, PacketError> {
        parse_packet(&self.data, self.timestamp_us, self.wire_len as usize)
    }

    pub fn from_packet(p: &CapturedPacket) -> Self {
        PcapRecord {
            timestamp_us: p.timestamp_us,
            wire_len: p.wire_length as u32,
            data: serialize_packet(p),
        }
    }
}

pub struct PcapReader<R> {
    inner: R,
    big_endian: bool,
    nanos: bool,
    index: u64,
}

impl PcapReader<BufReader<File>> {
    pub fn open(path: impl AsRef<Path>) -> Result<Self, PcapError> {
        PcapReader::new(BufReader::new(File::open(path)?))
    }
}

impl<R: Read> PcapReader<R> {
    pub fn new(mut inner: R) -> Result<Self, PcapError> {
        let mut hdr = [0u8; 24];
        inner.read_exact(&mut hdr)?;
        let raw = u32::from_le_bytes(hdr[0..4].try_into().unwrap());
        let (big_endian, nanos) = match raw {
            MAGIC_MICROS => (false, false),
            MAGIC_NANOS => (false, true),
            m if m.swap_bytes() == MAGIC_MICROS => (true, false),
            m if m.swap_bytes() == MAGIC_NANOS => (true, true),
            m => return Err(PcapError::BadMagic(m)),
        };
        let reader = PcapReader {
            inner,
            big_endian,
            nanos,
            index: 0,
        };
        let linktype = reader.u32_at(&hdr, 20);
        if linktype != LINKTYPE_ETHERNET {
            return Err(PcapError::LinkType(linktype));
        }
        Ok(reader)
    }

    fn u32_at(&self, b: &[u8], at: usize) -> u32 {
        let raw: [u8; 4] = b[at..at + 4].try_into().unwrap();
        if self.big_endian {
            u32::from_be_bytes(raw)
        } else {
            u32::from_le_bytes(raw)
        }
    }

    pub fn next_record(&mut self) -> Result<Option<PcapRecord>, PcapError> {
        let mut hdr = [0u8; 16];
        match read_full(&mut self.inner, &mut hdr)? {
            0 => return Ok(None),
            16 => {}
            _ => return Err(PcapError::TruncatedRecord(self.index)),
        }
        let ts_sec = self.u32_at(&hdr, 0) as u64;
        let ts_frac = self.u32_at(&hdr, 4) as u64;
        let captured = self.u32_at(&hdr, 8);
        let wire = self.u32_at(&hdr, 12);
        if captured > wire {
            return Err(PcapError::BadRecord {
                index: self.index,
                captured,
                wire,
            });
        }
        let mut data = vec![0u8; captured as usize];
        if read_full(&mut self.inner, &mut data)? != data.len() {
            return Err(PcapError::TruncatedRecord(self.index));
        }
        self.index += 1;
        let frac_us = if self.nanos { ts_frac / 1000 } else { ts_frac };
        Ok(Some(PcapRecord {
            timestamp_us: ts_sec * 1_000_000 + frac_us,
            wire_len: wire,
            data,
        }))
    }

    pub fn next_packet(&mut self) -> Result<Option<CapturedPacket>, PcapError> {
        let index = self.index;
        match self.next_record()? {
            None => Ok(None),
            Some(r) => r.parse().map(Some).map_err(|source| PcapError::Packet { index, source }),
        }
    }

    pub fn records(self) -> impl Iterator<Item = Result<PcapRecord, PcapError>> {
        let mut me = self;
        std::iter::from_fn(move || me.next_record().transpose())
    }
}

fn read_full<R: Read>(r: &mut R, buf: &mut [u8]) -> io::Result<usize> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..]) {
            Ok(0) => break,
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    Ok(filled)
}

/// Writes little-endian, microsecond-resolution pcap files.
pub struct PcapWriter<W: Write> {
    inner: W,
    count: u64,
}

impl PcapWriter<BufWriter<File>> {
    pub fn create(path: impl AsRef<Path>) -> Result<Self, PcapError> {
        PcapWriter::new(BufWriter::new(File::create(path)?))
    }
}

impl<W: Write> PcapWriter<W> {
    pub fn new(mut inner: W) -> Result<Self, PcapError> {
        let mut hdr = Vec::with_capacity(24);
        hdr.extend_from_slice(&MAGIC_MICROS.to_le_bytes());
        hdr.extend_from_slice(&2u16.to_le_bytes());
        hdr.extend_from_slice(&4u16.to_le_bytes());
        hdr.extend_from_slice(&0i32.to_le_bytes());
        hdr.extend_from_slice(&0u32.to_le_bytes());
        hdr.extend_from_slice(&DEFAULT_SNAPLEN.to_le_bytes());
        hdr.extend_from_slice(&LINKTYPE_ETHERNET.to_le_bytes());
        inner.write_all(&hdr)?;
        Ok(PcapWriter { inner, count: 0 })
    }

    pub fn write_frame(&mut self, timestamp_us: u64, wire_len: usize, data: &[u8]) -> Result<(), PcapError> {
        let mut hdr = [0u8; 16];
        hdr[0..4].copy_from_slice(&((timestamp_us / 1_000_000) as u32).to_le_bytes());
        hdr[4..8].copy_from_slice(&((timestamp_us % 1_000_000) as u32).to_le_bytes());
        hdr[8..12].copy_from_slice(&(data.len() as u32).to_le_bytes());
        hdr[12..16].copy_from_slice(&(wire_len.max(data.len()) as u32).to_le_bytes());
        self.inner.write_all(&hdr)?;
        self.inner.write_all(data)?;
        self.count += 1;
        Ok(())
    }

    pub fn write_record(&mut self, r: &PcapRecord) -> Result<(), PcapError> {
        self.write_frame(r.timestamp_us, r.wire_len as usize, &r.data)
    }

    pub fn write_packet(&mut self, p: &CapturedPacket) -> Result<(), PcapError> {
        self.write_frame(p.timestamp_us, p.wire_length, &serialize_packet(p))
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn finish(mut self) -> Result<W, PcapError> {
        self.inner.flush()?;
        Ok(self.inner)
    }
}

/// Serializes records to an in-memory pcap image.
pub fn to_bytes<'a>(records: impl IntoIterator<Item = &'a PcapRecord>) -> Vec<u8> {
    let mut w = PcapWriter::new(Vec::new()).expect("writing to a Vec cannot fail");
    for r in records {
        w.write_record(r).expect("writing to a Vec cannot fail");
    }
    w.finish().expect("writing to a Vec cannot fail")
}

/// Reads every record of an in-memory pcap image.
pub fn from_bytes(bytes: &[u8]) -> Result<Vec<PcapRecord>, PcapError> {
    PcapReader::new(bytes)?.records().collect()
}

pub fn read_file(path: impl AsRef<Path>) -> Result<Vec<PcapRecord>, PcapError> {
    PcapReader::open(path)?.records().collect()
}

pub fn write_file<'a>(path: impl AsRef<Path>, records: impl IntoIterator<Item = &'a PcapRecord>) -> Result<u64, PcapError> {
    let mut w = PcapWriter::create(path)?;
    for r in records {
        w.write_record(r)?;
    }
    let n = w.count();
    w.finish()?;
    Ok(n)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Vec<PcapRecord> {
        vec![
            PcapRecord {
                timestamp_us: 1_500_000,
                wire_len: 60,
                data: vec![0xaa; 54],
            },
            PcapRecord {
                timestamp_us: 2_000_001,
                wire_len: 3,
                data: vec![1, 2, 3],
            },
        ]
    }

    #[test]
    fn round_trip_in_memory() {
        let bytes = to_bytes(&sample());
        assert_eq!(&bytes[0..4], &[0xd4, 0xc3, 0xb2, 0xa1]);
        assert_eq!(from_bytes(&bytes).unwrap(), sample());
    }

    #[test]
    fn big_endian_and_nanosecond_files() {
        let mut be = Vec::new();
        be.extend_from_slice(&MAGIC_NANOS.to_be_bytes());
        be.extend_from_slice(&2u16.to_be_bytes());
        be.extend_from_slice(&4u16.to_be_bytes());
        be.extend_from_slice(&[0; 8]);
        be.extend_from_slice(&65535u32.to_be_bytes());
        be.extend_from_slice(&1u32.to_be_bytes());
        be.extend_from_slice(&3u32.to_be_bytes());
        be.extend_from_slice(&123_456_789u32.to_be_bytes());
        be.extend_from_slice(&2u32.to_be_bytes());
        be.extend_from_slice(&2u32.to_be_bytes());
        be.extend_from_slice(&[9, 9]);
        let recs = from_bytes(&be).unwrap();
        assert_eq!(recs.len(), 1);
        assert_eq!(recs[0].timestamp_us, 3_123_456);
        assert_eq!(recs[0].data, vec![9, 9]);
    }

    #[test]
    fn rejects_bad_magic_and_linktype() {
        assert!(matches!(PcapReader::new(&[0u8; 24][..]), Err(PcapError::BadMagic(0))));
        let mut bytes = to_bytes(&[]);
        bytes[20] = 101;
        assert!(matches!(PcapReader::new(&bytes[..]), Err(PcapError::LinkType(101))));
    }

    #[test]
    fn truncated_record_is_an_error() {
        let bytes = to_bytes(&sample());
        let cut = &bytes[..bytes.len() - 1];
        let err = from_bytes(cut).unwrap_err();
        assert!(matches!(err, PcapError::TruncatedRecord(1)), "{err}");
    }
}
