// SPDX-License-Identifier: Apache-2.0

//! Request service time, load, success rate and URL frequency.
//!
//! Events carry a directional flow, a kind (request or response) and a
//! timestamp. Requests queue per connection; each response is matched with the
//! oldest queued request on its connection. Metrics are folded into tumbling
//! windows aligned to timestamp zero: requests (load, URL counts) land in the
//! window of the request, samples and status codes in the window of the
//! response.

pub mod report;

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::packet::{flow_key, CapturedPacket, FiveTuple};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MessageKind {
    Request,
    Response,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AnalysisEvent {
    /// Directional flow as observed (client→server for requests).
    pub flow: FiveTuple,
    pub kind: MessageKind,
    pub timestamp_us: u64,
    pub url: Option<String>,
    pub status_code: Option<u16>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ServiceTimeSample {
    /// Canonical connection key.
    pub connection: FiveTuple,
    pub url: Option<String>,
    pub request_ts: u64,
    pub response_ts: u64,
    pub service_time_us: u64,
}

/// Success predicate for a response status code: informational, success and
/// redirect classes count as processed.
pub fn success_classify(status_code: u16) -> bool {
    (100..=399).contains(&status_code)
}

/// Derives an event from a PSH-flagged TCP packet, without looking at payload.
///
/// The packet's timestamp is its arrival at the analysis host.
pub fn header_only_event(p: &CapturedPacket, watched_ports: &BTreeSet<u16>) -> Option<AnalysisEvent> {
    let tcp = p.tcp()?;
    if !tcp.flags.psh() {
        return None;
    }
    let kind = if watched_ports.contains(&tcp.dst_port) {
        MessageKind::Request
    } else if watched_ports.contains(&tcp.src_port) {
        MessageKind::Response
    } else {
        return None;
    };
    Some(AnalysisEvent {
        flow: flow_key(p).ok()?,
        kind,
        timestamp_us: p.timestamp_us,
        url: None,
        status_code: None,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EngineConfig {
    pub window_len_us: u64,
    /// Connections without activity for this long are evicted on rollup.
    pub idle_timeout_us: u64,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            window_len_us: 1_000_000,
            idle_timeout_us: 60_000_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
struct PendingRequest {
    timestamp_us: u64,
    url: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConnectionState {
    pub key: FiveTuple,
    pending: VecDeque<PendingRequest>,
    pub last_activity: u64,
}

impl ConnectionState {
    pub fn pending_len(&self) -> usize {
        self.pending.len()
    }
}

#[derive(Clone, Debug, Default)]
struct WindowAcc {
    count: u64,
    sum: u64,
    min: Option<u64>,
    max: Option<u64>,
    requests: u64,
    responses: u64,
    successes: u64,
    urls: BTreeMap<String, u64>,
}

/// Metrics for one sealed tumbling window.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowAggregate {
    pub start_us: u64,
    pub len_us: u64,
    /// Number of service-time samples completed in this window.
    pub count: u64,
    pub sum_us: u64,
    pub min_us: Option<u64>,
    pub max_us: Option<u64>,
    pub mean_us: Option<f64>,
    /// Requests observed in this window (server load).
    pub request_count: u64,
    /// Responses whose status code was observed.
    pub response_count: u64,
    pub success_count: u64,
    pub url_counts: BTreeMap<String, u64>,
}

impl WindowAggregate {
    pub fn load(&self) -> u64 {
        self.request_count
    }

    pub fn success_rate(&self) -> Option<f64> {
        (self.response_count > 0).then(|| self.success_count as f64 / self.response_count as f64)
    }

    /// The `n` most frequent URLs, ties broken alphabetically.
    pub fn top_urls(&self, n: usize) -> Vec<(String, u64)> {
        let mut v: Vec<(String, u64)> = self.url_counts.iter().map(|(u, c)| (u.clone(), *c)).collect();
        v.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        v.truncate(n);
        v
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EngineStats {
    pub requests: u64,
    pub responses: u64,
    pub samples: u64,
    /// Responses that found no pending request.
    pub orphans: u64,
    /// Pending requests dropped when their connection was evicted.
    pub unanswered: u64,
    pub evicted_connections: u64,
    /// Events that fell into an already sealed window; FIFO state is still
    /// updated but the window is not.
    pub late_events: u64,
    /// Requests carrying a status code or responses carrying a URL.
    pub malformed: u64,
}

/// Single-owner analysis state machine.
#[derive(Debug)]
pub struct AnalysisEngine {
    config: EngineConfig,
    connections: HashMap<FiveTuple, ConnectionState>,
    windows: BTreeMap<u64, WindowAcc>,
    next_unsealed: Option<u64>,
    stats: EngineStats,
}

impl AnalysisEngine {
    pub fn new(config: EngineConfig) -> Self {
        assert!(config.window_len_us > 0, "window length must be positive");
        AnalysisEngine {
            config,
            connections: HashMap::new(),
            windows: BTreeMap::new(),
            next_unsealed: None,
            stats: EngineStats::default(),
        }
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn stats(&self) -> EngineStats {
        self.stats
    }

    /// Requests still waiting for a response, over all connections.
    pub fn pending_total(&self) -> usize {
        self.connections.values().map(ConnectionState::pending_len).sum()
    }

    pub fn connection(&self, flow: &FiveTuple) -> Option<&ConnectionState> {
        self.connections.get(&flow.canonical())
    }

    fn window_mut(&mut self, ts: u64) -> Option<&mut WindowAcc> {
        let idx = ts / self.config.window_len_us;
        if self.next_unsealed.is_some_and(|n| idx < n) {
            self.stats.late_events += 1;
            return None;
        }
        Some(self.windows.entry(idx).or_default())
    }

    pub fn observe(&mut self, e: &AnalysisEvent) -> Option<ServiceTimeSample> {
        let key = e.flow.canonical();
        match e.kind {
            MessageKind::Request => {
                if e.status_code.is_some() {
                    self.stats.malformed += 1;
                    return None;
                }
                self.stats.requests += 1;
                let conn = self.connections.entry(key).or_insert_with(|| ConnectionState {
                    key,
                    pending: VecDeque::new(),
                    last_activity: e.timestamp_us,
                });
                conn.pending.push_back(PendingRequest {
                    timestamp_us: e.timestamp_us,
                    url: e.url.clone(),
                });
                conn.last_activity = conn.last_activity.max(e.timestamp_us);
                if let Some(w) = self.window_mut(e.timestamp_us) {
                    w.requests += 1;
                    if let Some(url) = &e.url {
                        *w.urls.entry(url.clone()).or_default() += 1;
                    }
                }
                None
            }
            MessageKind::Response => {
                if e.url.is_some() {
                    self.stats.malformed += 1;
                    return None;
                }
                self.stats.responses += 1;
                let matched = self.connections.get_mut(&key).and_then(|conn| {
                    conn.last_activity = conn.last_activity.max(e.timestamp_us);
                    conn.pending.pop_front()
                });
                let sample = match matched {
                    Some(req) => {
                        self.stats.samples += 1;
                        Some(ServiceTimeSample {
                            connection: key,
                            url: req.url,
                            request_ts: req.timestamp_us,
                            response_ts: e.timestamp_us,
                            service_time_us: e.timestamp_us.saturating_sub(req.timestamp_us),
                        })
                    }
                    None => {
                        self.stats.orphans += 1;
                        None
                    }
                };
                if let Some(w) = self.window_mut(e.timestamp_us) {
                    if let Some(status) = e.status_code {
                        w.responses += 1;
                        if success_classify(status) {
                            w.successes += 1;
                        }
                    }
                    if let Some(s) = &sample {
                        let st = s.service_time_us;
                        w.count += 1;
                        w.sum += st;
                        w.min = Some(w.min.map_or(st, |m| m.min(st)));
                        w.max = Some(w.max.map_or(st, |m| m.max(st)));
                    }
                }
                sample
            }
        }
    }

    /// Drops connections idle for longer than the configured timeout at `now`.
    pub fn evict_idle(&mut self, now: u64) -> usize {
        let timeout = self.config.idle_timeout_us;
        let stale: Vec<FiveTuple> = self
            .connections
            .values()
            .filter(|c| now.saturating_sub(c.last_activity) > timeout)
            .map(|c| c.key)
            .collect();
        for key in &stale {
            if let Some(c) = self.connections.remove(key) {
                self.stats.unanswered += c.pending.len() as u64;
            }
        }
        self.stats.evicted_connections += stale.len() as u64;
        stale.len()
    }

    /// Seals and returns every window that ends at or before `up_to`, starting
    /// from the first window that has seen an event. Windows without events are
    /// included so the series is contiguous.
    pub fn rollup(&mut self, up_to: u64) -> Vec<WindowAggregate> {
        self.evict_idle(up_to);
        self.seal_before(up_to / self.config.window_len_us)
    }

    /// Seals every window that has seen an event.
    pub fn flush(&mut self) -> Vec<WindowAggregate> {
        match self.windows.last_key_value() {
            Some((&last, _)) => self.seal_before(last + 1),
            None => Vec::new(),
        }
    }

    fn seal_before(&mut self, end_idx: u64) -> Vec<WindowAggregate> {
        let start = match (self.next_unsealed, self.windows.first_key_value()) {
            (Some(n), _) => n,
            (None, Some((&first, _))) => first,
            (None, None) => return Vec::new(),
        };
        if end_idx <= start {
            return Vec::new();
        }
        let len = self.config.window_len_us;
        let mut out = Vec::with_capacity((end_idx - start) as usize);
        for idx in start..end_idx {
            let acc = self.windows.remove(&idx).unwrap_or_default();
            out.push(WindowAggregate {
                start_us: idx * len,
                len_us: len,
                count: acc.count,
                sum_us: acc.sum,
                min_us: acc.min,
                max_us: acc.max,
                mean_us: (acc.count > 0).then(|| acc.sum as f64 / acc.count as f64),
                request_count: acc.requests,
                response_count: acc.responses,
                success_count: acc.successes,
                url_counts: acc.urls,
            });
        }
        self.next_unsealed = Some(end_idx);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::packet::{build_tcp_frame, MacAddr, TcpFlags, IPPROTO_TCP};
    use proptest::prelude::*;
    use std::net::Ipv4Addr;

    fn conn(client_port: u16) -> FiveTuple {
        FiveTuple {
            protocol: IPPROTO_TCP,
            src_ip: Ipv4Addr::new(10, 0, 1, 1),
            dst_ip: Ipv4Addr::new(10, 0, 0, 2),
            src_port: client_port,
            dst_port: 8080,
        }
    }

    fn req(c: u16, ts: u64, url: &str) -> AnalysisEvent {
        AnalysisEvent {
            flow: conn(c),
            kind: MessageKind::Request,
            timestamp_us: ts,
            url: Some(url.into()),
            status_code: None,
        }
    }

    fn resp(c: u16, ts: u64, status: u16) -> AnalysisEvent {
        AnalysisEvent {
            flow: conn(c).reversed(),
            kind: MessageKind::Response,
            timestamp_us: ts,
            url: None,
            status_code: Some(status),
        }
    }

    fn engine(window: u64) -> AnalysisEngine {
        AnalysisEngine::new(EngineConfig {
            window_len_us: window,
            idle_timeout_us: u64::MAX,
        })
    }

    #[test]
    fn single_request_response() {
        let mut e = engine(1_000_000);
        assert!(e.observe(&req(1, 1000, "/a")).is_none());
        let s = e.observe(&resp(1, 3500, 200)).unwrap();
        assert_eq!(s.service_time_us, 2500);
        assert_eq!(s.url.as_deref(), Some("/a"));
    }

    #[test]
    fn pipelined_fifo_matching() {
        let mut e = engine(1_000_000);
        e.observe(&req(1, 0, "/A"));
        e.observe(&req(1, 10, "/B"));
        let a = e.observe(&resp(1, 100, 200)).unwrap();
        let b = e.observe(&resp(1, 150, 200)).unwrap();
        assert_eq!((a.url.as_deref(), a.service_time_us), (Some("/A"), 100));
        assert_eq!((b.url.as_deref(), b.service_time_us), (Some("/B"), 140));
    }

    #[test]
    fn orphan_response_is_counted() {
        let mut e = engine(1000);
        assert!(e.observe(&resp(1, 5, 200)).is_none());
        e.observe(&req(2, 6, "/x"));
        assert!(e.observe(&resp(1, 7, 200)).is_none());
        assert_eq!(e.stats().orphans, 2);
        assert_eq!(e.pending_total(), 1);
    }

    #[test]
    fn window_aggregates() {
        let mut e = engine(1000);
        for (i, st) in [100u64, 200, 300].into_iter().enumerate() {
            let c = i as u16;
            e.observe(&req(c, 0, "/u"));
            e.observe(&resp(c, st, 200));
        }
        e.observe(&req(9, 2500, "/v"));
        let w = e.rollup(3000);
        assert_eq!(w.len(), 3);
        assert_eq!((w[0].count, w[0].min_us, w[0].max_us, w[0].mean_us), (3, Some(100), Some(300), Some(200.0)));
        assert_eq!(w[0].load(), 3);
        assert_eq!(w[0].success_rate(), Some(1.0));
        assert_eq!((w[1].count, w[1].min_us, w[1].max_us, w[1].mean_us), (0, None, None, None));
        assert_eq!(w[1].success_rate(), None);
        assert_eq!(w[2].load(), 1);
        assert_eq!(w[2].url_counts.get("/v"), Some(&1));
        // Sealed windows do not come back.
        assert!(e.rollup(3000).is_empty());
    }

    #[test]
    fn sample_lands_in_response_window() {
        let mut e = engine(1000);
        e.observe(&req(1, 900, "/a"));
        e.observe(&resp(1, 1100, 500));
        let w = e.flush();
        assert_eq!((w[0].count, w[0].load()), (0, 1));
        assert_eq!((w[1].count, w[1].response_count, w[1].success_count), (1, 1, 0));
    }

    #[test]
    fn late_events_do_not_touch_sealed_windows() {
        let mut e = engine(1000);
        e.observe(&req(1, 10, "/a"));
        let sealed = e.rollup(1000);
        assert_eq!(sealed[0].load(), 1);
        let s = e.observe(&resp(1, 500, 200)).unwrap();
        assert_eq!(s.service_time_us, 490);
        assert_eq!(e.stats().late_events, 1);
        assert!(e.flush().is_empty());
    }

    #[test]
    fn idle_connections_are_evicted() {
        let mut e = AnalysisEngine::new(EngineConfig {
            window_len_us: 1000,
            idle_timeout_us: 5000,
        });
        e.observe(&req(1, 0, "/a"));
        e.observe(&req(1, 10, "/b"));
        e.observe(&req(2, 9000, "/c"));
        e.rollup(10_000);
        assert_eq!(e.stats().unanswered, 2);
        assert_eq!(e.stats().evicted_connections, 1);
        assert_eq!(e.pending_total(), 1);
    }

    #[test]
    fn inconsistent_events_are_rejected() {
        let mut e = engine(1000);
        let mut bad = req(1, 0, "/a");
        bad.status_code = Some(200);
        assert!(e.observe(&bad).is_none());
        let mut bad = resp(1, 0, 200);
        bad.url = Some("/x".into());
        assert!(e.observe(&bad).is_none());
        assert_eq!(e.stats().malformed, 2);
        assert_eq!(e.stats().requests + e.stats().responses, 0);
    }

    #[test]
    fn success_predicate() {
        assert!(success_classify(200));
        assert!(success_classify(302));
        assert!(success_classify(100));
        assert!(!success_classify(99));
        assert!(!success_classify(404));
        assert!(!success_classify(500));
    }

    #[test]
    fn header_only_events() {
        let watched: BTreeSet<u16> = [8080].into();
        let f = conn(50000);
        let p = build_tcp_frame(77, MacAddr::ZERO, MacAddr::ZERO, &f, 1, 1, TcpFlags::ACK | TcpFlags::PSH, 0, b"x");
        let e = header_only_event(&p, &watched).unwrap();
        assert_eq!((e.kind, e.timestamp_us, e.flow), (MessageKind::Request, 77, f));
        let p = build_tcp_frame(78, MacAddr::ZERO, MacAddr::ZERO, &f.reversed(), 1, 1, TcpFlags::ACK | TcpFlags::PSH, 0, b"x");
        assert_eq!(header_only_event(&p, &watched).unwrap().kind, MessageKind::Response);
        let p = build_tcp_frame(79, MacAddr::ZERO, MacAddr::ZERO, &f, 1, 1, TcpFlags::ACK, 0, &[]);
        assert!(header_only_event(&p, &watched).is_none());
    }

    proptest! {
        // Conservation, FIFO order and window partition over random interleavings.
        #[test]
        fn conservation_and_partition(ops in proptest::collection::vec((0u16..4, any::<bool>(), 1u64..500), 0..300)) {
            let mut e = engine(700);
            let mut ts = 0;
            let mut queued: HashMap<u16, VecDeque<u64>> = HashMap::new();
            let mut samples = 0u64;
            for (c, is_req, gap) in ops {
                ts += gap;
                if is_req {
                    e.observe(&req(c, ts, "/p"));
                    queued.entry(c).or_default().push_back(ts);
                } else {
                    let expect = queued.entry(c).or_default().pop_front();
                    let got = e.observe(&resp(c, ts, 200));
                    prop_assert_eq!(got.as_ref().map(|s| s.request_ts), expect);
                    samples += got.is_some() as u64;
                }
            }
            let st = e.stats();
            prop_assert_eq!(st.samples, samples);
            prop_assert_eq!(st.samples + st.orphans, st.responses);
            prop_assert_eq!(e.pending_total() as u64, st.requests - st.samples);
            let windows = e.flush();
            prop_assert_eq!(windows.iter().map(|w| w.count).sum::<u64>(), samples);
            prop_assert_eq!(windows.iter().map(|w| w.load()).sum::<u64>(), st.requests);
            for w in &windows {
                if let (Some(lo), Some(mean), Some(hi)) = (w.min_us, w.mean_us, w.max_us) {
                    prop_assert!(lo as f64 <= mean && mean <= hi as f64);
                }
                prop_assert!(w.success_count <= w.response_count);
            }
        }
    }
}
