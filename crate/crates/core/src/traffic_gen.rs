// SPDX-License-Identifier: Apache-2.0

//! Synthetic HTTP-over-TCP workloads with a ground-truth log.
//!
//! Timing runs on a virtual clock starting at 0. Every segment of one HTTP
//! message carries the same timestamp, ACK is set on all data segments and PSH
//! only on the final one. Responses on a connection leave the server in
//! request order.
//!
//! Randomness comes from ChaCha8 (`rand_chacha::ChaCha8Rng::seed_from_u64`).
//! A draw in `[lo, hi]` is `lo + next_u64() % (hi - lo + 1)`. Per connection
//! the client and server initial sequence numbers are drawn first (two
//! `next_u32` calls), then per request, in order: URL (weighted, one draw over
//! the summed weights), request header size, request body size, response
//! header size, response body size, service time, think time. Fixed values and
//! list models consume no draws.

use std::collections::BTreeMap;
use std::net::Ipv4Addr;

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::packet::pcap::{to_bytes, PcapRecord};
use crate::packet::{build_tcp_frame, FiveTuple, MacAddr, TcpFlags, IPPROTO_TCP};

pub const CLIENT_MAC: MacAddr = MacAddr([0x02, 0, 0, 0, 0, 0x01]);
pub const SERVER_MAC: MacAddr = MacAddr([0x02, 0, 0, 0, 0, 0x02]);

#[derive(Debug, Error, PartialEq, Eq)]
pub enum GenError {
    #[error("invalid workload: {0}")]
    InvalidSpec(String),
    #[error("workload file: {0}")]
    Parse(String),
}

/// A size or duration that is fixed or drawn uniformly from `[min, max]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SizeModel {
    Fixed(u64),
    Range { min: u64, max: u64 },
}

/// Service or think time model, microseconds. `List` is indexed by the global
/// request number, wrapping around.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TimeModel {
    Fixed(u64),
    Range { min: u64, max: u64 },
    List { list: Vec<u64> },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UrlWeight {
    pub path: String,
    #[serde(default = "one")]
    pub weight: u64,
}

fn one() -> u64 {
    1
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FailureSpec {
    /// Global request number: `connection * requests_per_connection + i`.
    pub request: u64,
    pub status: u16,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorkloadSpec {
    pub connections: u32,
    pub requests_per_connection: u32,
    /// Maximum requests outstanding on one connection.
    pub pipelining_depth: u32,
    pub mss: u32,
    /// Emit SYN handshakes, pure ACKs and FIN teardowns.
    pub control_traffic: bool,
    pub client_ip: Ipv4Addr,
    pub client_port_base: u16,
    pub server_ip: Ipv4Addr,
    pub server_port: u16,
    /// Offset between the start times of consecutive connections.
    pub connection_stagger_us: u64,
    /// Gap between handshake and teardown packets.
    pub handshake_gap_us: u64,
    /// Header block sizes include the first line and the blank line. Values
    /// below the minimal header for the message are raised to it.
    pub request_header_bytes: SizeModel,
    pub request_body_bytes: SizeModel,
    pub response_header_bytes: SizeModel,
    pub response_body_bytes: SizeModel,
    pub service_time_us: TimeModel,
    /// Delay between sending consecutive requests on a connection.
    pub think_time_us: TimeModel,
    pub urls: Vec<UrlWeight>,
    pub failures: Vec<FailureSpec>,
    /// Every N-th request (1-based count) gets `failure_status`.
    pub failure_every: Option<u64>,
    pub failure_status: u16,
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        WorkloadSpec {
            connections: 1,
            requests_per_connection: 1,
            pipelining_depth: 1,
            mss: 1460,
            control_traffic: true,
            client_ip: Ipv4Addr::new(10, 0, 0, 1),
            client_port_base: 40000,
            server_ip: Ipv4Addr::new(10, 0, 0, 2),
            server_port: 8080,
            connection_stagger_us: 1000,
            handshake_gap_us: 100,
            request_header_bytes: SizeModel::Fixed(0),
            request_body_bytes: SizeModel::Fixed(0),
            response_header_bytes: SizeModel::Fixed(0),
            response_body_bytes: SizeModel::Fixed(0),
            service_time_us: TimeModel::Fixed(1000),
            think_time_us: TimeModel::Fixed(100),
            urls: vec![UrlWeight {
                path: "/".into(),
                weight: 1,
            }],
            failures: Vec::new(),
            failure_every: None,
            failure_status: 500,
        }
    }
}

fn check_range(name: &str, min: u64, max: u64) -> Result<(), GenError> {
    if min > max {
        return Err(GenError::InvalidSpec(format!("{name}: min {min} exceeds max {max}")));
    }
    Ok(())
}

impl WorkloadSpec {
    pub fn from_toml(text: &str) -> Result<Self, GenError> {
        let spec: WorkloadSpec = toml::from_str(text).map_err(|e| GenError::Parse(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("workload spec always serializes")
    }

    pub fn total_requests(&self) -> u64 {
        self.connections as u64 * self.requests_per_connection as u64
    }

    pub fn validate(&self) -> Result<(), GenError> {
        let bad = |m: String| Err(GenError::InvalidSpec(m));
        if self.pipelining_depth == 0 {
            return bad("pipelining_depth must be at least 1".into());
        }
        if self.mss == 0 || self.mss > 65_495 {
            return bad(format!("mss {} outside 1..=65495", self.mss));
        }
        if self.client_port_base as u64 + self.connections as u64 > 65_536 {
            return bad("client ports would exceed 65535".into());
        }
        if self.urls.is_empty() || self.urls.iter().map(|u| u.weight).sum::<u64>() == 0 {
            return bad("URL pool needs at least one positive weight".into());
        }
        for u in &self.urls {
            if u.path.is_empty() || u.path.len() > 2048 || u.path.bytes().any(|b| b <= b' ' || b == 0x7f) {
                return bad(format!("URL {:?} must be 1-2048 visible characters", u.path));
            }
        }
        for (name, m) in [
            ("request_header_bytes", &self.request_header_bytes),
            ("request_body_bytes", &self.request_body_bytes),
            ("response_header_bytes", &self.response_header_bytes),
            ("response_body_bytes", &self.response_body_bytes),
        ] {
            if let SizeModel::Range { min, max } = m {
                check_range(name, *min, *max)?;
            }
        }
        for (name, m) in [("service_time_us", &self.service_time_us), ("think_time_us", &self.think_time_us)] {
            match m {
                TimeModel::Range { min, max } => check_range(name, *min, *max)?,
                TimeModel::List { list } if list.is_empty() => return bad(format!("{name}: empty list")),
                _ => {}
            }
        }
        let status_ok = |s: u16| (100..=999).contains(&s);
        if !status_ok(self.failure_status) || self.failures.iter().any(|f| !status_ok(f.status)) {
            return bad("status codes must have three digits".into());
        }
        if self.failure_every == Some(0) {
            return bad("failure_every must be at least 1".into());
        }
        Ok(())
    }

    fn status_for(&self, global: u64) -> u16 {
        if let Some(f) = self.failures.iter().find(|f| f.request == global) {
            return f.status;
        }
        match self.failure_every {
            Some(n) if (global + 1).is_multiple_of(n) => self.failure_status,
            _ => 200,
        }
    }
}

/// Ground truth for one request/response exchange.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OracleRequest {
    /// Global request number.
    pub index: u64,
    /// Client-to-server direction of the connection.
    pub connection: FiveTuple,
    pub method: String,
    pub url: String,
    pub status: u16,
    /// Timestamp of the request's final segment.
    pub request_ts: u64,
    /// Timestamp of the response's final segment.
    pub response_ts: u64,
    pub service_time_us: u64,
    pub request_bytes: u64,
    pub response_bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OracleLog {
    pub seed: u64,
    pub requests: Vec<OracleRequest>,
    pub url_counts: BTreeMap<String, u64>,
    pub packets: u64,
    pub data_packets: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GeneratedTrace {
    pub records: Vec<PcapRecord>,
    pub oracle: OracleLog,
}

impl GeneratedTrace {
    pub fn pcap_bytes(&self) -> Vec<u8> {
        to_bytes(&self.records)
    }
}

struct Draw(ChaCha8Rng);

impl Draw {
    fn between(&mut self, lo: u64, hi: u64) -> u64 {
        match (hi - lo).checked_add(1) {
            Some(span) => lo + self.0.next_u64() % span,
            None => self.0.next_u64(),
        }
    }

    fn size(&mut self, m: &SizeModel) -> u64 {
        match *m {
            SizeModel::Fixed(v) => v,
            SizeModel::Range { min, max } => self.between(min, max),
        }
    }

    fn time(&mut self, m: &TimeModel, global: u64) -> u64 {
        match m {
            TimeModel::Fixed(v) => *v,
            TimeModel::Range { min, max } => self.between(*min, *max),
            TimeModel::List { list } => list[(global % list.len() as u64) as usize],
        }
    }

    fn url<'a>(&mut self, urls: &'a [UrlWeight]) -> &'a str {
        let total: u64 = urls.iter().map(|u| u.weight).sum();
        let mut pick = self.0.next_u64() % total;
        for u in urls {
            if pick < u.weight {
                return &u.path;
            }
            pick -= u.weight;
        }
        unreachable!("pick is below the weight total")
    }
}

const BODY_PATTERN: &[u8] = b"abcdefghijklmnopqrstuvwxyz0123456789ABCDEFGHIJKLMNOPQRSTUVWXYZ\r\n";

fn body(len: u64) -> impl Iterator<Item = u8> {
    BODY_PATTERN.iter().copied().cycle().take(len as usize)
}

/// Appends `X-Pad` so the header block reaches `target` bytes when there is
/// room for the line, then the terminator and the body.
fn finish_message(mut head: String, target: u64, body_len: u64) -> Vec<u8> {
    const PAD_LINE_MIN: usize = "X-Pad:\r\n".len();
    let current = head.len() + 2;
    if let Some(deficit) = (target as usize).checked_sub(current) {
        if deficit >= PAD_LINE_MIN {
            head.push_str("X-Pad:");
            head.extend(std::iter::repeat_n('p', deficit - PAD_LINE_MIN));
            head.push_str("\r\n");
        }
    }
    head.push_str("\r\n");
    let mut out = head.into_bytes();
    out.extend(body(body_len));
    out
}

fn reason(status: u16) -> &'static str {
    match status {
        200 => "OK",
        301 => "Moved Permanently",
        302 => "Found",
        404 => "Not Found",
        500 => "Internal Server Error",
        503 => "Service Unavailable",
        _ => "Status",
    }
}

struct Exchange {
    global: u64,
    method: &'static str,
    url: String,
    status: u16,
    request: Vec<u8>,
    response: Vec<u8>,
    service: u64,
    think: u64,
}

/// Packet emitter for one connection. Every packet gets a per-connection
/// ordinal so equal timestamps keep causal order after the global sort.
struct Conn<'a> {
    flow: FiveTuple,
    client_next: u32,
    server_next: u32,
    client_ip_id: u16,
    server_ip_id: u16,
    mss: usize,
    conn_index: u32,
    out: &'a mut Vec<(u64, u32, u64, PcapRecord)>,
    ordinal: u64,
    data_packets: u64,
}

impl Conn<'_> {
    fn emit(&mut self, ts: u64, from_client: bool, flags: TcpFlags, payload: &[u8]) {
        let (flow, seq, ack, id, src_mac, dst_mac) = if from_client {
            self.client_ip_id = self.client_ip_id.wrapping_add(1);
            (self.flow, self.client_next, self.server_next, self.client_ip_id, CLIENT_MAC, SERVER_MAC)
        } else {
            self.server_ip_id = self.server_ip_id.wrapping_add(1);
            (self.flow.reversed(), self.server_next, self.client_next, self.server_ip_id, SERVER_MAC, CLIENT_MAC)
        };
        let ack = if flags.ack() { ack } else { 0 };
        let p = build_tcp_frame(ts, src_mac, dst_mac, &flow, seq, ack, flags, id, payload);
        let consumed = payload.len() as u32 + (flags.syn() as u32) + (flags.fin() as u32);
        if from_client {
            self.client_next = self.client_next.wrapping_add(consumed);
        } else {
            self.server_next = self.server_next.wrapping_add(consumed);
        }
        self.out.push((ts, self.conn_index, self.ordinal, PcapRecord::from_packet(&p)));
        self.ordinal += 1;
    }

    fn message(&mut self, ts: u64, from_client: bool, bytes: &[u8]) {
        let chunks: Vec<&[u8]> = bytes.chunks(self.mss).collect();
        let last = chunks.len() - 1;
        for (i, c) in chunks.into_iter().enumerate() {
            let flags = if i == last { TcpFlags::ACK | TcpFlags::PSH } else { TcpFlags::ACK };
            self.emit(ts, from_client, flags, c);
            self.data_packets += 1;
        }
    }
}

/// Generates a workload. Identical `(spec, seed)` give identical output.
pub fn generate(spec: &WorkloadSpec, seed: u64) -> Result<GeneratedTrace, GenError> {
    spec.validate()?;
    let mut draw = Draw(ChaCha8Rng::seed_from_u64(seed));
    let mut packets = Vec::new();
    let mut oracle = OracleLog {
        seed,
        requests: Vec::with_capacity(spec.total_requests() as usize),
        url_counts: BTreeMap::new(),
        packets: 0,
        data_packets: 0,
    };
    let depth = spec.pipelining_depth as usize;
    let gap = spec.handshake_gap_us;

    for c in 0..spec.connections {
        let flow = FiveTuple {
            protocol: IPPROTO_TCP,
            src_ip: spec.client_ip,
            dst_ip: spec.server_ip,
            src_port: spec.client_port_base + c as u16,
            dst_port: spec.server_port,
        };
        let client_isn = draw.0.next_u32();
        let server_isn = draw.0.next_u32();

        let rpc = spec.requests_per_connection as u64;
        let exchanges: Vec<Exchange> = (0..rpc)
            .map(|i| {
                let global = c as u64 * rpc + i;
                let url = draw.url(&spec.urls).to_string();
                let req_hdr = draw.size(&spec.request_header_bytes);
                let req_body = draw.size(&spec.request_body_bytes);
                let resp_hdr = draw.size(&spec.response_header_bytes);
                let resp_body = draw.size(&spec.response_body_bytes);
                let service = draw.time(&spec.service_time_us, global);
                let think = draw.time(&spec.think_time_us, global);
                let status = spec.status_for(global);
                let method = if req_body > 0 { "POST" } else { "GET" };
                let mut head = format!("{method} {url} HTTP/1.1\r\nHost: {}:{}\r\n", spec.server_ip, spec.server_port);
                if req_body > 0 {
                    head.push_str(&format!("Content-Length: {req_body}\r\n"));
                }
                let request = finish_message(head, req_hdr, req_body);
                let head = format!("HTTP/1.1 {status} {}\r\nContent-Length: {resp_body}\r\n", reason(status));
                let response = finish_message(head, resp_hdr, resp_body);
                Exchange {
                    global,
                    method,
                    url,
                    status,
                    request,
                    response,
                    service,
                    think,
                }
            })
            .collect();

        let start = c as u64 * spec.connection_stagger_us;
        let ready = if spec.control_traffic { start + 2 * gap } else { start };
        let mut req_ts = Vec::with_capacity(exchanges.len());
        let mut resp_ts: Vec<u64> = Vec::with_capacity(exchanges.len());
        for (i, x) in exchanges.iter().enumerate() {
            let mut t = match i {
                0 => ready + x.think,
                _ => req_ts[i - 1] + x.think,
            };
            if i >= depth {
                t = t.max(resp_ts[i - depth] + 1);
            }
            req_ts.push(t);
            let mut r = t + x.service;
            if i > 0 {
                r = r.max(resp_ts[i - 1] + 1);
            }
            resp_ts.push(r);
        }

        let mut conn = Conn {
            flow,
            client_next: client_isn,
            server_next: server_isn,
            client_ip_id: 0,
            server_ip_id: 0,
            mss: spec.mss as usize,
            conn_index: c,
            out: &mut packets,
            ordinal: 0,
            data_packets: 0,
        };
        if spec.control_traffic {
            conn.emit(start, true, TcpFlags::SYN, &[]);
            conn.emit(start + gap, false, TcpFlags::SYN | TcpFlags::ACK, &[]);
            conn.emit(start + 2 * gap, true, TcpFlags::ACK, &[]);
        } else {
            conn.client_next = conn.client_next.wrapping_add(1);
            conn.server_next = conn.server_next.wrapping_add(1);
        }

        // Merge requests and responses by time; a request wins a tie so a
        // zero service time still puts the response after its request.
        let (mut ri, mut si) = (0, 0);
        while si < exchanges.len() {
            let take_request = ri < exchanges.len() && req_ts[ri] <= resp_ts[si];
            if take_request {
                conn.message(req_ts[ri], true, &exchanges[ri].request);
                if spec.control_traffic {
                    conn.emit(req_ts[ri], false, TcpFlags::ACK, &[]);
                }
                ri += 1;
            } else {
                conn.message(resp_ts[si], false, &exchanges[si].response);
                if spec.control_traffic {
                    conn.emit(resp_ts[si], true, TcpFlags::ACK, &[]);
                }
                si += 1;
            }
        }

        if spec.control_traffic {
            let end = resp_ts.last().copied().unwrap_or(ready) + gap;
            conn.emit(end, true, TcpFlags::FIN | TcpFlags::ACK, &[]);
            conn.emit(end + gap, false, TcpFlags::FIN | TcpFlags::ACK, &[]);
            conn.emit(end + 2 * gap, true, TcpFlags::ACK, &[]);
        }
        oracle.data_packets += conn.data_packets;

        for (i, x) in exchanges.into_iter().enumerate() {
            *oracle.url_counts.entry(x.url.clone()).or_default() += 1;
            oracle.requests.push(OracleRequest {
                index: x.global,
                connection: flow,
                method: x.method.to_string(),
                url: x.url,
                status: x.status,
                request_ts: req_ts[i],
                response_ts: resp_ts[i],
                service_time_us: resp_ts[i] - req_ts[i],
                request_bytes: x.request.len() as u64,
                response_bytes: x.response.len() as u64,
            });
        }
    }

    packets.sort_by_key(|(ts, conn, ord, _)| (*ts, *conn, *ord));
    oracle.packets = packets.len() as u64;
    Ok(GeneratedTrace {
        records: packets.into_iter().map(|(_, _, _, r)| r).collect(),
        oracle,
    })
}
