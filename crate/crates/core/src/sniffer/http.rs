// SPDX-License-Identifier: Apache-2.0

//! Streaming HTTP/1.x header boundary detection.
//!
//! Each flow direction is scanned line by line. The empty line (`CRLF CRLF`)
//! closes a header and yields one record stamped with the capture time of the
//! segment that carried it. `Content-Length` bodies are skipped so body bytes
//! are never mistaken for headers. Only the current line is buffered, capped at
//! [`MAX_LINE_LEN`] bytes.

use std::collections::{BTreeSet, HashMap};

use crate::analysis::MessageKind;
use crate::packet::{flow_key, CapturedPacket, FiveTuple};

use super::record::ExtractedRecord;

pub const MAX_LINE_LEN: usize = 8 * 1024;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ExtractorStats {
    /// Segments that arrived ahead of the expected sequence number.
    pub out_of_order: u64,
    /// Segments below the expected sequence number, skipped.
    pub retransmissions: u64,
    pub malformed: u64,
    pub records: u64,
}

#[derive(Debug, Default)]
struct StreamState {
    expected_seq: Option<u32>,
    body_remaining: u64,
    line: Vec<u8>,
    line_overflow: bool,
    lines_seen: u32,
    first_line: Option<FirstLine>,
    content_length: Option<u64>,
}

#[derive(Debug, Clone)]
enum FirstLine {
    Request { method: String, url: String },
    Status(u16),
    Malformed,
}

impl StreamState {
    fn reset_header(&mut self) {
        self.line.clear();
        self.line_overflow = false;
        self.lines_seen = 0;
        self.first_line = None;
        self.content_length = None;
    }
}

fn is_tchar(b: u8) -> bool {
    b.is_ascii_alphanumeric() || b"!#$%&'*+-.^_`|~".contains(&b)
}

fn is_http_version(v: &str) -> bool {
    let b = v.as_bytes();
    b.len() == 8 && v.starts_with("HTTP/") && b[5].is_ascii_digit() && b[6] == b'.' && b[7].is_ascii_digit()
}

fn parse_request_line(line: &str) -> Option<FirstLine> {
    let mut parts = line.split(' ');
    let (method, url, version) = (parts.next()?, parts.next()?, parts.next()?);
    if parts.next().is_some() || method.is_empty() || method.len() > 255 || url.is_empty() {
        return None;
    }
    if !method.bytes().all(is_tchar) || !is_http_version(version) || url.bytes().any(|b| b.is_ascii_control()) {
        return None;
    }
    Some(FirstLine::Request {
        method: method.to_string(),
        url: url.to_string(),
    })
}

fn parse_status_line(line: &str) -> Option<FirstLine> {
    let mut parts = line.splitn(3, ' ');
    let (version, code) = (parts.next()?, parts.next()?);
    if !is_http_version(version) || code.len() != 3 || !code.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    let code: u16 = code.parse().ok()?;
    (code >= 100).then_some(FirstLine::Status(code))
}

/// Per-direction HTTP header scanner.
#[derive(Debug)]
pub struct HttpExtractor {
    watched_ports: BTreeSet<u16>,
    streams: HashMap<FiveTuple, StreamState>,
    stats: ExtractorStats,
}

impl HttpExtractor {
    pub fn new(watched_ports: BTreeSet<u16>) -> Self {
        HttpExtractor {
            watched_ports,
            streams: HashMap::new(),
            stats: ExtractorStats::default(),
        }
    }

    pub fn stats(&self) -> ExtractorStats {
        self.stats
    }

    pub fn open_streams(&self) -> usize {
        self.streams.len()
    }

    fn kind_of(&self, flow: &FiveTuple) -> Option<MessageKind> {
        if self.watched_ports.contains(&flow.dst_port) {
            Some(MessageKind::Request)
        } else if self.watched_ports.contains(&flow.src_port) {
            Some(MessageKind::Response)
        } else {
            None
        }
    }

    /// Scans one segment and returns a record per header terminator found.
    pub fn extract(&mut self, p: &CapturedPacket) -> Vec<ExtractedRecord> {
        let (Ok(flow), Some(tcp)) = (flow_key(p), p.tcp()) else {
            return Vec::new();
        };
        let Some(kind) = self.kind_of(&flow) else {
            return Vec::new();
        };
        let flags = tcp.flags;
        let seq = tcp.seq;
        if flags.rst() {
            self.streams.remove(&flow);
            return Vec::new();
        }
        let state = self.streams.entry(flow).or_default();
        if flags.syn() {
            *state = StreamState {
                expected_seq: Some(seq.wrapping_add(1)),
                ..Default::default()
            };
            return Vec::new();
        }
        let seg_len = p.tcp_segment_len().unwrap_or(0) as u32;
        let consumed = seg_len + flags.fin() as u32;
        if consumed == 0 {
            return Vec::new();
        }
        if let Some(expected) = state.expected_seq {
            let delta = seq.wrapping_sub(expected) as i32;
            if delta < 0 {
                self.stats.retransmissions += 1;
                return Vec::new();
            }
            if delta > 0 {
                self.stats.out_of_order += 1;
            }
        }
        state.expected_seq = Some(seq.wrapping_add(consumed));

        let mut out = Vec::new();
        let payload = &p.payload;
        let mut at = 0;
        while at < payload.len() {
            if state.body_remaining > 0 {
                let skip = (state.body_remaining as usize).min(payload.len() - at);
                state.body_remaining -= skip as u64;
                at += skip;
                continue;
            }
            let b = payload[at];
            at += 1;
            if state.line.len() < MAX_LINE_LEN {
                state.line.push(b);
            } else {
                state.line_overflow = true;
            }
            if b != b'\n' {
                continue;
            }
            let line = std::mem::take(&mut state.line);
            let overflow = std::mem::replace(&mut state.line_overflow, false);
            let is_blank = !overflow && line == b"\r\n";
            if state.lines_seen == 0 {
                if is_blank || line == b"\n" {
                    continue;
                }
                state.lines_seen = 1;
                let text = (!overflow)
                    .then(|| std::str::from_utf8(&line).ok())
                    .flatten()
                    .map(|s| s.trim_end_matches(['\r', '\n']));
                let parsed = text.and_then(|t| match kind {
                    MessageKind::Request => parse_request_line(t),
                    MessageKind::Response => parse_status_line(t),
                });
                state.first_line = Some(parsed.unwrap_or(FirstLine::Malformed));
            } else if is_blank {
                let first = state.first_line.take().unwrap_or(FirstLine::Malformed);
                let mut rec = ExtractedRecord {
                    flow,
                    kind,
                    timestamp_us: p.timestamp_us,
                    method: None,
                    url: None,
                    status_code: None,
                    malformed: false,
                    url_truncated: false,
                };
                match first {
                    FirstLine::Request { method, url } => {
                        rec.method = Some(method);
                        rec.url = Some(url);
                    }
                    FirstLine::Status(code) => rec.status_code = Some(code),
                    FirstLine::Malformed => {
                        rec.malformed = true;
                        self.stats.malformed += 1;
                    }
                }
                out.push(rec);
                state.body_remaining = state.content_length.unwrap_or(0);
                state.reset_header();
            } else {
                state.lines_seen += 1;
                if !overflow {
                    if let Some(v) = header_value(&line, "content-length") {
                        state.content_length = v.trim().parse().ok();
                    }
                }
            }
        }
        // Bytes declared on the wire but cut from the capture.
        let missing = seg_len as u64 - payload.len() as u64;
        state.body_remaining = state.body_remaining.saturating_sub(missing);

        if flags.fin() {
            self.streams.remove(&flow);
        }
        self.stats.records += out.len() as u64;
        out
    }
}

fn header_value<'a>(line: &'a [u8], name: &str) -> Option<&'a str> {
    let colon = line.iter().position(|&b| b == b':')?;
    let key = std::str::from_utf8(&line[..colon]).ok()?;
    if !key.trim().eq_ignore_ascii_case(name) {
        return None;
    }
    std::str::from_utf8(&line[colon + 1..]).ok()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::packet::{build_tcp_frame, MacAddr, TcpFlags, IPPROTO_TCP};
    use proptest::prelude::*;

    fn client() -> FiveTuple {
        FiveTuple {
            protocol: IPPROTO_TCP,
            src_ip: [10, 0, 0, 1].into(),
            dst_ip: [10, 0, 0, 2].into(),
            src_port: 50000,
            dst_port: 8080,
        }
    }

    fn seg(flow: &FiveTuple, ts: u64, seq: u32, data: &[u8]) -> CapturedPacket {
        build_tcp_frame(ts, MacAddr::ZERO, MacAddr::ZERO, flow, seq, 0, TcpFlags::ACK | TcpFlags::PSH, 0, data)
    }

    fn extractor() -> HttpExtractor {
        HttpExtractor::new([80, 8080].into())
    }

    #[test]
    fn single_segment_request() {
        let mut x = extractor();
        let r = x.extract(&seg(&client(), 100, 1, b"GET /db?k=1 HTTP/1.1\r\nHost: s\r\n\r\n"));
        assert_eq!(r.len(), 1);
        assert_eq!(r[0].kind, MessageKind::Request);
        assert_eq!(r[0].method.as_deref(), Some("GET"));
        assert_eq!(r[0].url.as_deref(), Some("/db?k=1"));
        assert_eq!(r[0].timestamp_us, 100);
        assert!(!r[0].malformed);
    }

    #[test]
    fn terminator_straddles_segments() {
        let mut x = extractor();
        let a = b"GET / HTTP/1.1\r\nHost: s\r\n\r";
        assert!(x.extract(&seg(&client(), 100, 1, a)).is_empty());
        let r = x.extract(&seg(&client(), 200, 1 + a.len() as u32, b"\n"));
        assert_eq!(r.len(), 1);
        assert_eq!(r[0].timestamp_us, 200);
    }

    #[test]
    fn response_with_body_over_many_segments() {
        let mut x = extractor();
        let server = client().reversed();
        let body = vec![b'\r'; 10 * 1024 - 40];
        let mut msg = format!("HTTP/1.1 200 OK\r\nContent-Length: {}\r\n\r\n", body.len()).into_bytes();
        // Body full of CRs and LFs that would look like terminators if scanned.
        let body: Vec<u8> = body.iter().enumerate().map(|(i, _)| if i % 2 == 0 { b'\r' } else { b'\n' }).collect();
        msg.extend_from_slice(&body);
        let mut seq = 7u32;
        let mut records = Vec::new();
        for (i, chunk) in msg.chunks(1460).enumerate() {
            records.extend(x.extract(&seg(&server, 1000 + i as u64, seq, chunk)));
            seq += chunk.len() as u32;
        }
        assert_eq!(msg.chunks(1460).count(), 8);
        assert_eq!(records.len(), 1);
        assert_eq!(records[0].status_code, Some(200));
        assert_eq!(records[0].timestamp_us, 1000);
    }

    #[test]
    fn two_messages_in_one_segment() {
        let mut x = extractor();
        let r = x.extract(&seg(&client(), 5, 1, b"GET /a HTTP/1.1\r\n\r\nPOST /b HTTP/1.1\r\nContent-Length: 4\r\n\r\n\r\n\r\n"));
        assert_eq!(r.iter().map(|r| r.url.clone().unwrap()).collect::<Vec<_>>(), vec!["/a", "/b"]);
    }

    #[test]
    fn malformed_first_lines() {
        let mut x = extractor();
        let r = x.extract(&seg(&client(), 5, 1, b"NOT A VALID LINE AT ALL\r\n\r\n"));
        assert!(r[0].malformed && r[0].method.is_none() && r[0].url.is_none());
        let r = x.extract(&seg(&client().reversed(), 6, 1, b"HTTP/1.1 20x OK\r\n\r\n"));
        assert!(r[0].malformed && r[0].status_code.is_none());
        let long = format!("GET /{} HTTP/1.1\r\n\r\n", "a".repeat(MAX_LINE_LEN));
        let r = x.extract(&seg(&client(), 7, 28, long.as_bytes()));
        assert_eq!(r.len(), 1);
        assert!(r[0].malformed);
        assert_eq!(x.stats().malformed, 3);
    }

    #[test]
    fn retransmission_and_gap() {
        let mut x = extractor();
        let m = b"GET /a HTTP/1.1\r\n\r\n";
        assert_eq!(x.extract(&seg(&client(), 1, 100, m)).len(), 1);
        assert!(x.extract(&seg(&client(), 2, 100, m)).is_empty());
        assert_eq!(x.stats().retransmissions, 1);
        assert_eq!(x.extract(&seg(&client(), 3, 500, m)).len(), 1);
        assert_eq!(x.stats().out_of_order, 1);
    }

    #[test]
    fn syn_sets_expected_sequence() {
        let mut x = extractor();
        let syn = build_tcp_frame(0, MacAddr::ZERO, MacAddr::ZERO, &client(), u32::MAX, 0, TcpFlags::SYN, 0, &[]);
        x.extract(&syn);
        // Sequence wraps to 0 after the SYN.
        assert_eq!(x.extract(&seg(&client(), 1, 0, b"GET / HTTP/1.1\r\n\r\n")).len(), 1);
        assert_eq!(x.stats().out_of_order, 0);
    }

    #[test]
    fn unwatched_ports_ignored() {
        let mut x = extractor();
        let mut f = client();
        f.dst_port = 50001;
        assert!(x.extract(&seg(&f, 1, 1, b"GET / HTTP/1.1\r\n\r\n")).is_empty());
    }

    proptest! {
        // Any segmentation of the same byte stream yields the same records.
        #[test]
        fn segmentation_invariant(cuts in proptest::collection::btree_set(1usize..200, 0..30)) {
            let stream: &[u8] = b"GET /a HTTP/1.1\r\nHost: x\r\n\r\nPOST /b?q=1 HTTP/1.1\r\nContent-Length: 12\r\n\r\n\r\n\r\n\r\n\r\n\r\n\r\nX GET /c HTTP/1.0\r\n\r\n";
            let mut x = extractor();
            let mut got = Vec::new();
            let mut start = 0;
            for end in cuts.into_iter().filter(|&c| c < stream.len()).chain([stream.len()]) {
                got.extend(x.extract(&seg(&client(), 0, start as u32, &stream[start..end])));
                start = end;
            }
            let urls: Vec<_> = got.iter().map(|r| r.url.clone()).collect();
            prop_assert_eq!(urls, vec![Some("/a".to_string()), Some("/b?q=1".to_string()), None]);
            prop_assert!(got[2].malformed);
        }
    }
}
