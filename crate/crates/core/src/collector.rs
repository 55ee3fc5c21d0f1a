// SPDX-License-Identifier: Apache-2.0

//! Remote analysis endpoint.
//!
//! Accepts raw mirrored frames, tunneled frames and forwarded sniffer records,
//! turns each into at most one [`AnalysisEvent`] and feeds a single
//! [`AnalysisEngine`]. File mode merges capture files by timestamp; socket
//! mode receives one frame or record per UDP datagram.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{self, BufReader, BufWriter};
use std::net::{SocketAddr, UdpSocket};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use thiserror::Error;

use crate::analysis::report::{Report, SourceSummary, DEFAULT_TOP_N};
use crate::analysis::{header_only_event, AnalysisEngine, AnalysisEvent, EngineConfig, ServiceTimeSample, WindowAggregate};
use crate::packet::pcap::{PcapError, PcapReader, PcapWriter};
use crate::packet::{parse_packet, CapturedPacket, PacketError, ETHERNET_HEADER_LEN, ETHERTYPE_IPV4, IPPROTO_GRE};
use crate::sniffer::{decode_record, read_record_datagrams, MalformedRecord, DEFAULT_WATCHED_PORTS};
use crate::tunnel::{decapsulate, TunnelError, VXLAN_PORT};

/// How the bytes of one ingest unit are interpreted.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum IngestKind {
    RawMirror,
    Tunneled,
    Records,
    /// Per frame: decapsulate VXLAN/GRE frames, treat everything else as raw.
    Auto,
}

impl std::fmt::Display for IngestKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            IngestKind::RawMirror => "mirror",
            IngestKind::Tunneled => "tunnel",
            IngestKind::Records => "records",
            IngestKind::Auto => "auto",
        })
    }
}

#[derive(Debug, Error)]
pub enum IngestError {
    #[error(transparent)]
    Packet(#[from] PacketError),
    #[error(transparent)]
    Tunnel(#[from] TunnelError),
    #[error(transparent)]
    Record(#[from] MalformedRecord),
}

#[derive(Debug, Error)]
pub enum CollectorError {
    #[error("cannot read {path}: {source}")]
    Open { path: PathBuf, source: io::Error },
    #[error("{path}: {source}")]
    Pcap { path: PathBuf, source: PcapError },
    #[error("cannot bind {addr}: {source}")]
    Bind { addr: SocketAddr, source: io::Error },
    #[error("dump file: {0}")]
    Dump(PcapError),
    #[error("socket receive failed: {0}")]
    Receive(io::Error),
}

impl CollectorError {
    /// True when the input itself is not in a recognised format.
    pub fn is_input_format(&self) -> bool {
        matches!(
            self,
            CollectorError::Pcap {
                source: PcapError::BadMagic(_) | PcapError::LinkType(_),
                ..
            }
        )
    }
}

/// Wire length of a frame received without pcap metadata: the IPv4 total
/// length tells how long the frame was before any truncation.
pub fn inferred_wire_len(bytes: &[u8]) -> usize {
    if bytes.len() >= ETHERNET_HEADER_LEN + 4 && u16::from_be_bytes([bytes[12], bytes[13]]) == ETHERTYPE_IPV4 {
        let total = u16::from_be_bytes([bytes[16], bytes[17]]) as usize;
        return bytes.len().max(ETHERNET_HEADER_LEN + total);
    }
    bytes.len()
}

fn is_tunnel_frame(p: &CapturedPacket) -> bool {
    p.ipv4.as_ref().is_some_and(|ip| ip.protocol == IPPROTO_GRE) || p.udp().is_some_and(|u| u.dst_port == VXLAN_PORT)
}

/// Normalizes one unit. `Ok(None)` means the unit carried no event (filtered).
pub fn ingest(
    kind: IngestKind,
    bytes: &[u8],
    wire_len: usize,
    arrival_us: u64,
    watched_ports: &BTreeSet<u16>,
) -> Result<Option<AnalysisEvent>, IngestError> {
    let packet = match kind {
        IngestKind::Records => return Ok(Some(decode_record(bytes)?.to_event())),
        IngestKind::Tunneled => decapsulate(bytes, arrival_us)?.inner,
        IngestKind::RawMirror => parse_packet(bytes, arrival_us, wire_len)?,
        IngestKind::Auto => {
            let p = parse_packet(bytes, arrival_us, wire_len)?;
            if is_tunnel_frame(&p) {
                decapsulate(bytes, arrival_us)?.inner
            } else {
                p
            }
        }
    };
    Ok(header_only_event(&packet, watched_ports))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CollectorConfig {
    pub engine: EngineConfig,
    pub watched_ports: BTreeSet<u16>,
    pub top_n: usize,
    pub dump: Option<PathBuf>,
    /// Only write the dump; no analysis is performed.
    pub dump_only: bool,
    /// Keep every service-time sample for [`Collector::take_samples`].
    pub keep_samples: bool,
}

impl Default for CollectorConfig {
    fn default() -> Self {
        CollectorConfig {
            engine: EngineConfig::default(),
            watched_ports: DEFAULT_WATCHED_PORTS.into(),
            top_n: DEFAULT_TOP_N,
            dump: None,
            dump_only: false,
            keep_samples: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SourceId(usize);

/// Single-owner ingest state: the engine, per-source accounting and the
/// optional raw dump.
pub struct Collector {
    config: CollectorConfig,
    engine: AnalysisEngine,
    sources: Vec<SourceSummary>,
    windows: Vec<WindowAggregate>,
    dump: Option<PcapWriter<BufWriter<File>>>,
    max_event_ts: u64,
    samples: Vec<ServiceTimeSample>,
}

impl Collector {
    pub fn new(config: CollectorConfig) -> Result<Self, CollectorError> {
        let dump = match &config.dump {
            Some(path) => Some(PcapWriter::create(path).map_err(CollectorError::Dump)?),
            None => None,
        };
        Ok(Collector {
            engine: AnalysisEngine::new(config.engine),
            config,
            sources: Vec::new(),
            windows: Vec::new(),
            dump,
            max_event_ts: 0,
            samples: Vec::new(),
        })
    }

    pub fn add_source(&mut self, name: impl Into<String>) -> SourceId {
        self.sources.push(SourceSummary {
            name: name.into(),
            ..Default::default()
        });
        SourceId(self.sources.len() - 1)
    }

    pub fn source(&self, id: SourceId) -> &SourceSummary {
        &self.sources[id.0]
    }

    pub fn engine(&self) -> &AnalysisEngine {
        &self.engine
    }

    /// Ingests one unit, feeding any resulting event to the engine.
    pub fn ingest(
        &mut self,
        src: SourceId,
        kind: IngestKind,
        bytes: &[u8],
        wire_len: usize,
        arrival_us: u64,
    ) -> Result<Vec<AnalysisEvent>, CollectorError> {
        if kind != IngestKind::Records {
            if let Some(d) = &mut self.dump {
                d.write_frame(arrival_us, wire_len, bytes).map_err(CollectorError::Dump)?;
            }
        }
        let summary = &mut self.sources[src.0];
        summary.ingested += 1;
        let event = match ingest(kind, bytes, wire_len, arrival_us, &self.config.watched_ports) {
            Ok(Some(e)) => e,
            Ok(None) => {
                summary.filtered += 1;
                return Ok(Vec::new());
            }
            Err(e) => {
                log::debug!("{}: {e}", summary.name);
                summary.malformed += 1;
                return Ok(Vec::new());
            }
        };
        summary.events += 1;
        if !self.config.dump_only {
            self.max_event_ts = self.max_event_ts.max(event.timestamp_us);
            let sample = self.engine.observe(&event);
            if self.config.keep_samples {
                self.samples.extend(sample);
            }
        }
        Ok(vec![event])
    }

    pub fn take_samples(&mut self) -> Vec<ServiceTimeSample> {
        std::mem::take(&mut self.samples)
    }

    /// Seals windows that ended at least one full window before the newest
    /// event, leaving a grace window for stragglers.
    pub fn rollup_lagging(&mut self) {
        let up_to = self.max_event_ts.saturating_sub(self.config.engine.window_len_us);
        let sealed = self.engine.rollup(up_to);
        self.windows.extend(sealed);
    }

    pub fn finish(mut self) -> Result<Report, CollectorError> {
        if let Some(d) = self.dump.take() {
            d.finish().map_err(CollectorError::Dump)?;
        }
        self.windows.extend(self.engine.flush());
        let mut report = Report::new(self.config.engine.window_len_us, self.config.top_n, &self.windows, self.engine.stats());
        report.outstanding = self.engine.pending_total() as u64;
        report.sources = self.sources;
        Ok(report)
    }
}

/// One file-mode input.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FileInput {
    pub path: PathBuf,
    /// `Records` reads a length-prefixed record file, anything else a pcap.
    pub kind: IngestKind,
}

struct Unit {
    ts: u64,
    source: SourceId,
    kind: IngestKind,
    wire_len: usize,
    bytes: Vec<u8>,
}

fn load_units(c: &mut Collector, input: &FileInput, out: &mut Vec<Unit>) -> Result<(), CollectorError> {
    let name = format!("{}:{}", input.kind, input.path.display());
    let source = c.add_source(name);
    let open = |p: &Path| File::open(p).map_err(|e| CollectorError::Open { path: p.to_path_buf(), source: e });
    if input.kind == IngestKind::Records {
        let datagrams = read_record_datagrams(BufReader::new(open(&input.path)?)).map_err(|e| CollectorError::Pcap {
            path: input.path.clone(),
            source: PcapError::Io(e),
        })?;
        for bytes in datagrams {
            // Malformed records sort first; they only touch the counters.
            let ts = decode_record(&bytes).map(|r| r.timestamp_us).unwrap_or(0);
            out.push(Unit {
                ts,
                source,
                kind: input.kind,
                wire_len: bytes.len(),
                bytes,
            });
        }
        return Ok(());
    }
    let pcap_err = |e| CollectorError::Pcap {
        path: input.path.clone(),
        source: e,
    };
    let reader = PcapReader::new(BufReader::new(open(&input.path)?)).map_err(pcap_err)?;
    for rec in reader.records() {
        let rec = rec.map_err(pcap_err)?;
        out.push(Unit {
            ts: rec.timestamp_us,
            source,
            kind: input.kind,
            wire_len: rec.wire_len as usize,
            bytes: rec.data,
        });
    }
    Ok(())
}

/// File mode: merges all inputs by timestamp (ties keep input order) and
/// analyses them in one pass.
pub fn run_collector(config: CollectorConfig, inputs: &[FileInput]) -> Result<Report, CollectorError> {
    let mut c = Collector::new(config)?;
    let mut units = Vec::new();
    for input in inputs {
        load_units(&mut c, input, &mut units)?;
    }
    units.sort_by_key(|u| u.ts);
    for u in &units {
        c.ingest(u.source, u.kind, &u.bytes, u.wire_len, u.ts)?;
    }
    c.finish()
}

fn now_us() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_micros() as u64).unwrap_or(0)
}

/// Socket mode: one UDP listener per source, each on its own thread, all
/// funnelled through one channel into the collector.
pub struct SocketCollector {
    collector: Collector,
    listeners: Vec<(SourceId, IngestKind, UdpSocket)>,
}

const POLL_INTERVAL: Duration = Duration::from_millis(50);
const MAX_DATAGRAM: usize = 65_535;

impl SocketCollector {
    pub fn bind(config: CollectorConfig, listen: &[(IngestKind, SocketAddr)]) -> Result<Self, CollectorError> {
        let mut collector = Collector::new(config)?;
        let mut listeners = Vec::new();
        for &(kind, addr) in listen {
            let bind_err = |e| CollectorError::Bind { addr, source: e };
            let sock = UdpSocket::bind(addr).map_err(bind_err)?;
            sock.set_read_timeout(Some(POLL_INTERVAL)).map_err(bind_err)?;
            let local = sock.local_addr().map_err(bind_err)?;
            let id = collector.add_source(format!("{kind}:{local}"));
            listeners.push((id, kind, sock));
        }
        Ok(SocketCollector { collector, listeners })
    }

    pub fn local_addrs(&self) -> Vec<SocketAddr> {
        self.listeners.iter().filter_map(|(_, _, s)| s.local_addr().ok()).collect()
    }

    /// Runs until `shutdown` is set or `duration` elapses.
    pub fn run(self, shutdown: &AtomicBool, duration: Option<Duration>) -> Result<Report, CollectorError> {
        let SocketCollector {
            mut collector,
            listeners,
        } = self;
        let deadline = duration.map(|d| Instant::now() + d);
        let stop = AtomicBool::new(false);
        let (tx, rx) = mpsc::channel::<(SourceId, IngestKind, Vec<u8>, u64)>();
        let result = std::thread::scope(|scope| {
            let mut handles = Vec::new();
            for (id, kind, sock) in listeners {
                let tx = tx.clone();
                let stop = &stop;
                handles.push(scope.spawn(move || -> Result<(), CollectorError> {
                    let mut buf = vec![0u8; MAX_DATAGRAM];
                    while !stop.load(Ordering::Relaxed) {
                        match sock.recv_from(&mut buf) {
                            Ok((n, _)) => {
                                if tx.send((id, kind, buf[..n].to_vec(), now_us())).is_err() {
                                    break;
                                }
                            }
                            Err(e) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => {}
                            Err(e) => return Err(CollectorError::Receive(e)),
                        }
                    }
                    Ok(())
                }));
            }
            drop(tx);
            let mut outcome = Ok(());
            loop {
                if shutdown.load(Ordering::Relaxed) || deadline.is_some_and(|d| Instant::now() >= d) {
                    break;
                }
                match rx.recv_timeout(POLL_INTERVAL) {
                    Ok((id, kind, bytes, arrival)) => {
                        let wire = inferred_wire_len(&bytes);
                        if let Err(e) = collector.ingest(id, kind, &bytes, wire, arrival) {
                            outcome = Err(e);
                            break;
                        }
                        collector.rollup_lagging();
                    }
                    Err(mpsc::RecvTimeoutError::Timeout) => {}
                    Err(mpsc::RecvTimeoutError::Disconnected) => break,
                }
            }
            stop.store(true, Ordering::Relaxed);
            // Datagrams already queued are still analysed.
            while let Ok((id, kind, bytes, arrival)) = rx.try_recv() {
                if outcome.is_err() {
                    break;
                }
                outcome = collector.ingest(id, kind, &bytes, inferred_wire_len(&bytes), arrival).map(|_| ());
            }
            for h in handles {
                if let Ok(Err(e)) = h.join() {
                    outcome = outcome.and(Err(e));
                }
            }
            outcome
        });
        result?;
        collector.finish()
    }
}
