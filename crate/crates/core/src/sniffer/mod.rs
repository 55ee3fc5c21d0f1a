// SPDX-License-Identifier: Apache-2.0

//! Customizable port sniffer.
//!
//! A listener filters watched-port TCP traffic into a bounded [`PacketBuffer`];
//! the consumer side scans HTTP headers ([`HttpExtractor`]) and hands one
//! [`ExtractedRecord`] per message to a [`RecordSink`]: the in-process
//! analysis engine (onsite mode) or a UDP forwarder (forward mode).

mod buffer;
mod http;
mod record;

pub use buffer::{BufferCounts, BufferReader, BufferWriter, OfferOutcome, PacketBuffer};
pub use http::{ExtractorStats, HttpExtractor, MAX_LINE_LEN};
pub use record::{decode_record, encode_record, ExtractedRecord, MalformedRecord, MAX_FIELD_LEN, RECORD_FIXED_LEN, RECORD_MAGIC, RECORD_VERSION};

use std::collections::BTreeSet;
use std::io::{self, Read, Write};
use std::net::{SocketAddr, UdpSocket};

use serde::Serialize;
use thiserror::Error;

use crate::analysis::AnalysisEngine;
use crate::packet::pcap::{PcapError, PcapReader};
use crate::packet::{CapturedPacket, PacketError};

pub const DEFAULT_WATCHED_PORTS: [u16; 2] = [80, 8080];

#[derive(Debug, Error)]
pub enum SnifferError {
    #[error("buffer capacity must be at least 1")]
    ZeroCapacity,
    #[error("no watched ports configured")]
    NoWatchedPorts,
    #[error("packet source failed: {0}")]
    Source(#[source] PcapError),
    #[error("listener thread panicked")]
    ListenerPanicked,
}

#[derive(Debug, Error)]
pub enum SinkError {
    #[error("record transport failed: {0}")]
    Io(#[from] io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SnifferMode {
    Onsite,
    Forward(SocketAddr),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum DropPolicy {
    #[default]
    DropNewest,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SnifferConfig {
    pub watched_ports: BTreeSet<u16>,
    pub mode: SnifferMode,
    pub buffer_capacity: usize,
    pub drop_policy: DropPolicy,
}

impl Default for SnifferConfig {
    fn default() -> Self {
        SnifferConfig {
            watched_ports: DEFAULT_WATCHED_PORTS.into(),
            mode: SnifferMode::Onsite,
            buffer_capacity: 4096,
            drop_policy: DropPolicy::DropNewest,
        }
    }
}

impl SnifferConfig {
    pub fn validate(&self) -> Result<(), SnifferError> {
        if self.buffer_capacity == 0 {
            return Err(SnifferError::ZeroCapacity);
        }
        if self.watched_ports.is_empty() {
            return Err(SnifferError::NoWatchedPorts);
        }
        Ok(())
    }
}

/// Listener predicate: TCP with a watched source or destination port.
pub fn listener_filter(cfg: &SnifferConfig, p: &CapturedPacket) -> bool {
    p.tcp()
        .is_some_and(|t| cfg.watched_ports.contains(&t.src_port) || cfg.watched_ports.contains(&t.dst_port))
}

/// A stream of timestamped packets. `Ok(None)` means the source is exhausted.
pub trait PacketSource {
    /// `Err(Ok(e))` is a single unparseable packet (skipped), `Err(Err(e))`
    /// a fatal source failure.
    fn next_packet(&mut self) -> Result<Option<CapturedPacket>, Result<PacketError, PcapError>>;
}

impl<R: Read> PacketSource for PcapReader<R> {
    fn next_packet(&mut self) -> Result<Option<CapturedPacket>, Result<PacketError, PcapError>> {
        match PcapReader::next_packet(self) {
            Ok(p) => Ok(p),
            Err(PcapError::Packet { source, .. }) => Err(Ok(source)),
            Err(e) => Err(Err(e)),
        }
    }
}

/// In-memory source, mostly for tests and composition.
pub struct VecSource(std::vec::IntoIter<CapturedPacket>);

impl VecSource {
    pub fn new(packets: Vec<CapturedPacket>) -> Self {
        VecSource(packets.into_iter())
    }
}

impl PacketSource for VecSource {
    fn next_packet(&mut self) -> Result<Option<CapturedPacket>, Result<PacketError, PcapError>> {
        Ok(self.0.next())
    }
}

/// Destination for extracted records.
pub trait RecordSink {
    fn deliver(&mut self, record: &ExtractedRecord) -> Result<(), SinkError>;
}

/// Onsite analysis: records feed the engine directly.
impl RecordSink for AnalysisEngine {
    fn deliver(&mut self, record: &ExtractedRecord) -> Result<(), SinkError> {
        self.observe(&record.to_event());
        Ok(())
    }
}

impl RecordSink for Vec<ExtractedRecord> {
    fn deliver(&mut self, record: &ExtractedRecord) -> Result<(), SinkError> {
        self.push(record.clone());
        Ok(())
    }
}

impl<S: RecordSink + ?Sized> RecordSink for &mut S {
    fn deliver(&mut self, record: &ExtractedRecord) -> Result<(), SinkError> {
        (**self).deliver(record)
    }
}

/// Forward mode: one UDP datagram per record.
#[derive(Debug)]
pub struct UdpForwarder {
    socket: UdpSocket,
    dest: SocketAddr,
    pub sent: u64,
}

impl UdpForwarder {
    pub fn new(dest: SocketAddr) -> io::Result<Self> {
        let bind: SocketAddr = if dest.is_ipv4() {
            "0.0.0.0:0".parse().unwrap()
        } else {
            "[::]:0".parse().unwrap()
        };
        Ok(UdpForwarder {
            socket: UdpSocket::bind(bind)?,
            dest,
            sent: 0,
        })
    }
}

impl RecordSink for UdpForwarder {
    fn deliver(&mut self, record: &ExtractedRecord) -> Result<(), SinkError> {
        self.socket.send_to(&encode_record(record), self.dest)?;
        self.sent += 1;
        Ok(())
    }
}

/// Writes records as a file of datagrams, each prefixed by its u16 big-endian
/// length, so forward-mode output can be replayed without sockets.
pub struct RecordFileWriter<W: Write> {
    inner: W,
    pub written: u64,
}

impl<W: Write> RecordFileWriter<W> {
    pub fn new(inner: W) -> Self {
        RecordFileWriter { inner, written: 0 }
    }

    pub fn finish(mut self) -> io::Result<W> {
        self.inner.flush()?;
        Ok(self.inner)
    }
}

impl<W: Write> RecordSink for RecordFileWriter<W> {
    fn deliver(&mut self, record: &ExtractedRecord) -> Result<(), SinkError> {
        let bytes = encode_record(record);
        self.inner.write_all(&(bytes.len() as u16).to_be_bytes())?;
        self.inner.write_all(&bytes)?;
        self.written += 1;
        Ok(())
    }
}

/// Splits a length-prefixed record file back into datagrams.
pub fn read_record_datagrams<R: Read>(mut r: R) -> io::Result<Vec<Vec<u8>>> {
    let mut out = Vec::new();
    let mut len = [0u8; 2];
    loop {
        match r.read_exact(&mut len) {
            Ok(()) => {}
            Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(out),
            Err(e) => return Err(e),
        }
        let mut buf = vec![0u8; u16::from_be_bytes(len) as usize];
        r.read_exact(&mut buf)?;
        out.push(buf);
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct SnifferStats {
    pub packets_seen: u64,
    /// Packets that could not be parsed and were skipped.
    pub unparseable: u64,
    /// Packets that passed the listener filter.
    pub filtered: u64,
    pub buffered: u64,
    pub dropped: u64,
    pub records: u64,
    pub malformed_records: u64,
    pub send_failures: u64,
    pub out_of_order: u64,
    pub retransmissions: u64,
}

fn deliver_all<S: RecordSink>(records: Vec<ExtractedRecord>, sink: &mut S, stats: &mut SnifferStats) {
    for r in &records {
        stats.records += 1;
        stats.malformed_records += r.malformed as u64;
        if let Err(e) = sink.deliver(r) {
            log::debug!("record delivery failed: {e}");
            stats.send_failures += 1;
        }
    }
}

fn finish_stats(stats: &mut SnifferStats, counts: BufferCounts, x: &HttpExtractor) {
    stats.buffered = counts.offered - counts.dropped;
    stats.dropped = counts.dropped;
    stats.out_of_order = x.stats().out_of_order;
    stats.retransmissions = x.stats().retransmissions;
}

/// Pull-driven single-threaded run: every accepted packet is consumed before
/// the next one is read, so nothing is dropped and results are deterministic.
pub fn run_sniffer<P: PacketSource + ?Sized, S: RecordSink>(
    cfg: &SnifferConfig,
    source: &mut P,
    mut sink: S,
) -> Result<SnifferStats, SnifferError> {
    cfg.validate()?;
    let buffer = PacketBuffer::new(cfg.buffer_capacity);
    let mut extractor = HttpExtractor::new(cfg.watched_ports.clone());
    let mut stats = SnifferStats::default();
    loop {
        let p = match source.next_packet() {
            Ok(Some(p)) => p,
            Ok(None) => break,
            Err(Ok(e)) => {
                log::debug!("skipping unparseable packet: {e}");
                stats.packets_seen += 1;
                stats.unparseable += 1;
                continue;
            }
            Err(Err(e)) => return Err(SnifferError::Source(e)),
        };
        stats.packets_seen += 1;
        if !listener_filter(cfg, &p) {
            continue;
        }
        stats.filtered += 1;
        buffer.offer(p);
        while let Some(p) = buffer.try_take() {
            deliver_all(extractor.extract(&p), &mut sink, &mut stats);
        }
    }
    finish_stats(&mut stats, buffer.counts(), &extractor);
    Ok(stats)
}

/// Listener on its own thread, extraction on the calling thread. Drops happen
/// when the consumer falls behind by more than the buffer capacity.
pub fn run_sniffer_threaded<P: PacketSource + Send, S: RecordSink>(
    cfg: &SnifferConfig,
    mut source: P,
    mut sink: S,
) -> Result<SnifferStats, SnifferError> {
    cfg.validate()?;
    let (writer, reader) = PacketBuffer::new(cfg.buffer_capacity).split();
    let mut extractor = HttpExtractor::new(cfg.watched_ports.clone());
    let mut stats = SnifferStats::default();
    let listener_result = std::thread::scope(|scope| {
        let listener = scope.spawn(move || {
            let (mut seen, mut unparseable, mut filtered) = (0u64, 0u64, 0u64);
            loop {
                match source.next_packet() {
                    Ok(Some(p)) => {
                        seen += 1;
                        if listener_filter(cfg, &p) {
                            filtered += 1;
                            writer.offer(p);
                        }
                    }
                    Ok(None) => break,
                    Err(Ok(_)) => {
                        seen += 1;
                        unparseable += 1;
                    }
                    Err(Err(e)) => return Err(SnifferError::Source(e)),
                }
            }
            Ok((seen, unparseable, filtered))
        });
        while let Some(p) = reader.take() {
            deliver_all(extractor.extract(&p), &mut sink, &mut stats);
        }
        listener.join().map_err(|_| SnifferError::ListenerPanicked)?
    })?;
    (stats.packets_seen, stats.unparseable, stats.filtered) = listener_result;
    finish_stats(&mut stats, reader.counts(), &extractor);
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analysis::{EngineConfig, MessageKind};
    use crate::packet::{build_tcp_frame, FiveTuple, MacAddr, TcpFlags, IPPROTO_TCP, IPPROTO_UDP};

    fn flow(sp: u16, dp: u16) -> FiveTuple {
        FiveTuple {
            protocol: IPPROTO_TCP,
            src_ip: [10, 0, 0, 1].into(),
            dst_ip: [10, 0, 0, 2].into(),
            src_port: sp,
            dst_port: dp,
        }
    }

    fn data(f: FiveTuple, ts: u64, seq: u32, payload: &[u8]) -> CapturedPacket {
        build_tcp_frame(ts, MacAddr::ZERO, MacAddr::ZERO, &f, seq, 0, TcpFlags::ACK | TcpFlags::PSH, 0, payload)
    }

    #[test]
    fn listener_filter_cases() {
        let cfg = SnifferConfig::default();
        assert!(listener_filter(&cfg, &data(flow(50000, 8080), 0, 0, &[])));
        assert!(listener_filter(&cfg, &data(flow(80, 50000), 0, 0, &[])));
        assert!(!listener_filter(&cfg, &data(flow(50000, 50001), 0, 0, &[])));
        let mut udp = data(flow(50000, 8080), 0, 0, &[]);
        udp.ipv4.as_mut().unwrap().protocol = IPPROTO_UDP;
        let bytes = crate::packet::serialize_packet(&udp);
        let udp = crate::packet::parse_packet(&bytes, 0, bytes.len()).unwrap();
        assert!(!listener_filter(&cfg, &udp));
    }

    fn exchange() -> Vec<CapturedPacket> {
        let req = b"GET /x HTTP/1.1\r\n\r\n";
        let resp = b"HTTP/1.1 404 Not Found\r\nContent-Length: 0\r\n\r\n";
        vec![
            data(flow(50000, 8080), 10, 1, req),
            data(flow(50000, 50001), 11, 1, req),
            data(flow(50000, 8080).reversed(), 50, 1, resp),
        ]
    }

    #[test]
    fn onsite_run_feeds_engine() {
        let mut engine = AnalysisEngine::new(EngineConfig::default());
        let stats = run_sniffer(&SnifferConfig::default(), &mut VecSource::new(exchange()), &mut engine).unwrap();
        assert_eq!((stats.packets_seen, stats.filtered, stats.records, stats.dropped), (3, 2, 2, 0));
        let w = engine.flush();
        assert_eq!(w[0].count, 1);
        assert_eq!(w[0].min_us, Some(40));
        assert_eq!(w[0].success_count, 0);
    }

    #[test]
    fn empty_source_all_zero() {
        let stats = run_sniffer(&SnifferConfig::default(), &mut VecSource::new(vec![]), Vec::new()).unwrap();
        assert_eq!(stats, SnifferStats::default());
    }

    #[test]
    fn threaded_matches_single_threaded() {
        let mut a = Vec::new();
        run_sniffer(&SnifferConfig::default(), &mut VecSource::new(exchange()), &mut a).unwrap();
        let mut b = Vec::new();
        let stats = run_sniffer_threaded(&SnifferConfig::default(), VecSource::new(exchange()), &mut b).unwrap();
        assert_eq!(a, b);
        assert_eq!(stats.records, 2);
    }

    #[test]
    fn record_file_round_trip() {
        let mut w = RecordFileWriter::new(Vec::new());
        run_sniffer(&SnifferConfig::default(), &mut VecSource::new(exchange()), &mut w).unwrap();
        let bytes = w.finish().unwrap();
        let datagrams = read_record_datagrams(&bytes[..]).unwrap();
        let kinds: Vec<_> = datagrams.iter().map(|d| decode_record(d).unwrap().kind).collect();
        assert_eq!(kinds, vec![MessageKind::Request, MessageKind::Response]);
    }

    #[test]
    fn forwarder_sends_one_datagram_per_record() {
        let rx = UdpSocket::bind("127.0.0.1:0").unwrap();
        rx.set_read_timeout(Some(std::time::Duration::from_secs(5))).unwrap();
        let fwd = UdpForwarder::new(rx.local_addr().unwrap()).unwrap();
        let mut fwd = fwd;
        run_sniffer(&SnifferConfig::default(), &mut VecSource::new(exchange()), &mut fwd).unwrap();
        assert_eq!(fwd.sent, 2);
        let mut buf = [0u8; 2048];
        for expected in [MessageKind::Request, MessageKind::Response] {
            let n = rx.recv(&mut buf).unwrap();
            assert_eq!(decode_record(&buf[..n]).unwrap().kind, expected);
        }
    }

    #[test]
    fn config_validation() {
        let cfg = SnifferConfig {
            buffer_capacity: 0,
            ..Default::default()
        };
        assert!(matches!(cfg.validate(), Err(SnifferError::ZeroCapacity)));
        let cfg = SnifferConfig {
            watched_ports: BTreeSet::new(),
            ..Default::default()
        };
        assert!(matches!(cfg.validate(), Err(SnifferError::NoWatchedPorts)));
    }
}
