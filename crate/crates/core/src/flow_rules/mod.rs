// SPDX-License-Identifier: Apache-2.0

//! Single-table OpenFlow-style flow rules.
//!
//! Lookup picks the highest-priority rule whose conditions all hold; rules of
//! equal priority are ordered by insertion. Actions forward the packet,
//! mirror it, mirror a truncated copy, or tunnel it to a remote endpoint.

mod rules_file;

pub use rules_file::{parse_rules, RuleFileError, RulesConfig};

use std::collections::BTreeMap;
use std::fmt;
use std::net::Ipv4Addr;
use std::sync::atomic::{AtomicU64, Ordering};

use thiserror::Error;

use crate::packet::{serialize_packet, CapturedPacket, TcpFlags, Transport, MIN_TCP_FRAME_LEN};
use crate::tunnel::{encapsulate, TunnelSpec};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RuleError {
    #[error("unknown rule id {0}")]
    UnknownRule(RuleId),
    #[error("rule has no actions")]
    NoActions,
    #[error("truncation length {0} is below the {MIN_TCP_FRAME_LEN}-byte header floor")]
    TruncateTooShort(usize),
    #[error("rule references unknown tunnel '{0}'")]
    UnknownTunnel(String),
    #[error("duplicate tunnel id '{0}'")]
    DuplicateTunnel(String),
}

#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Debug)]
pub struct PortId(pub u32);

impl fmt::Display for PortId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Rule identifier, equal to the rule's insertion sequence number.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Debug)]
pub struct RuleId(pub u64);

impl fmt::Display for RuleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

/// Header conditions; `None` and empty flag masks are wildcards.
///
/// Flag masks only ever match TCP packets. Port conditions match TCP or UDP.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MatchConditions {
    pub protocol: Option<u8>,
    pub src_ip: Option<Ipv4Addr>,
    pub dst_ip: Option<Ipv4Addr>,
    pub src_port: Option<u16>,
    pub dst_port: Option<u16>,
    /// Matches if any of these flags is set.
    pub tcp_flags_any_set: TcpFlags,
    /// Matches only if all of these flags are set.
    pub tcp_flags_all_set: TcpFlags,
}

impl MatchConditions {
    pub fn matches(&self, p: &CapturedPacket) -> bool {
        if let Some(proto) = self.protocol {
            if p.ipv4.as_ref().map(|ip| ip.protocol) != Some(proto) {
                return false;
            }
        }
        if self.src_ip.is_some() || self.dst_ip.is_some() {
            let Some(ip) = &p.ipv4 else { return false };
            if self.src_ip.is_some_and(|a| a != ip.src) || self.dst_ip.is_some_and(|a| a != ip.dst) {
                return false;
            }
        }
        if self.src_port.is_some() || self.dst_port.is_some() {
            let (sp, dp) = match &p.transport {
                Transport::Tcp(t) => (t.src_port, t.dst_port),
                Transport::Udp(u) => (u.src_port, u.dst_port),
                Transport::Unparsed => return false,
            };
            if self.src_port.is_some_and(|x| x != sp) || self.dst_port.is_some_and(|x| x != dp) {
                return false;
            }
        }
        if !self.tcp_flags_any_set.is_empty() || !self.tcp_flags_all_set.is_empty() {
            let Some(tcp) = p.tcp() else { return false };
            if !self.tcp_flags_any_set.is_empty() && !tcp.flags.intersects(self.tcp_flags_any_set) {
                return false;
            }
            if !tcp.flags.contains(self.tcp_flags_all_set) {
                return false;
            }
        }
        true
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum RuleAction {
    Output(PortId),
    Mirror(PortId),
    TruncateMirror { port: PortId, max_bytes: usize },
    Tunnel { tunnel: String, port: PortId },
}

impl RuleAction {
    fn is_output(&self) -> bool {
        matches!(self, RuleAction::Output(_))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FlowRule {
    pub priority: i32,
    pub conditions: MatchConditions,
    pub actions: Vec<RuleAction>,
}

impl FlowRule {
    pub fn new(priority: i32, conditions: MatchConditions, actions: Vec<RuleAction>) -> Self {
        FlowRule {
            priority,
            conditions,
            actions,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DefaultAction {
    Output(PortId),
    Drop,
}

#[derive(Debug, Default)]
struct Counters {
    packets: AtomicU64,
    bytes: AtomicU64,
}

impl Counters {
    fn hit(&self, bytes: usize) {
        self.packets.fetch_add(1, Ordering::Relaxed);
        self.bytes.fetch_add(bytes as u64, Ordering::Relaxed);
    }

    fn snapshot(&self) -> CounterSnapshot {
        CounterSnapshot {
            packets: self.packets.load(Ordering::Relaxed),
            bytes: self.bytes.load(Ordering::Relaxed),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize)]
pub struct CounterSnapshot {
    pub packets: u64,
    pub bytes: u64,
}

#[derive(Debug)]
struct Entry {
    id: RuleId,
    rule: FlowRule,
    counters: Counters,
}

/// One frame leaving the switch on `port`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Emission {
    pub port: PortId,
    pub bytes: Vec<u8>,
    /// On-wire length; larger than `bytes.len()` for truncated mirrors.
    pub wire_length: usize,
}

/// A single flow table with a tunnel registry for `Tunnel` actions.
///
/// `apply` takes `&self`: counters are atomics, so lookups may run from many
/// readers while mutation requires exclusive access.
#[derive(Debug)]
pub struct FlowTable {
    entries: Vec<Entry>,
    next_seq: u64,
    default_action: DefaultAction,
    tunnels: BTreeMap<String, TunnelSpec>,
    miss: Counters,
}

impl FlowTable {
    pub fn new(default_action: DefaultAction) -> Self {
        FlowTable {
            entries: Vec::new(),
            next_seq: 0,
            default_action,
            tunnels: BTreeMap::new(),
            miss: Counters::default(),
        }
    }

    pub fn default_action(&self) -> DefaultAction {
        self.default_action
    }

    pub fn set_default_action(&mut self, action: DefaultAction) {
        self.default_action = action;
    }

    pub fn add_tunnel(&mut self, spec: TunnelSpec) -> Result<(), RuleError> {
        if self.tunnels.contains_key(&spec.id) {
            return Err(RuleError::DuplicateTunnel(spec.id));
        }
        self.tunnels.insert(spec.id.clone(), spec);
        Ok(())
    }

    pub fn tunnel(&self, id: &str) -> Option<&TunnelSpec> {
        self.tunnels.get(id)
    }

    pub fn add_rule(&mut self, rule: FlowRule) -> Result<RuleId, RuleError> {
        if rule.actions.is_empty() {
            return Err(RuleError::NoActions);
        }
        for action in &rule.actions {
            match action {
                RuleAction::TruncateMirror { max_bytes, .. } if *max_bytes < MIN_TCP_FRAME_LEN => {
                    return Err(RuleError::TruncateTooShort(*max_bytes));
                }
                RuleAction::Tunnel { tunnel, .. } if !self.tunnels.contains_key(tunnel) => {
                    return Err(RuleError::UnknownTunnel(tunnel.clone()));
                }
                _ => {}
            }
        }
        let id = RuleId(self.next_seq);
        self.next_seq += 1;
        // Keep entries sorted by (priority desc, insertion asc).
        let at = self.entries.partition_point(|e| e.rule.priority >= rule.priority);
        self.entries.insert(
            at,
            Entry {
                id,
                rule,
                counters: Counters::default(),
            },
        );
        Ok(id)
    }

    pub fn remove_rule(&mut self, id: RuleId) -> Result<FlowRule, RuleError> {
        let at = self.entries.iter().position(|e| e.id == id).ok_or(RuleError::UnknownRule(id))?;
        Ok(self.entries.remove(at).rule)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn rules(&self) -> impl Iterator<Item = (RuleId, &FlowRule)> {
        self.entries.iter().map(|e| (e.id, &e.rule))
    }

    fn lookup_entry(&self, p: &CapturedPacket) -> Option<&Entry> {
        self.entries.iter().find(|e| e.rule.conditions.matches(p))
    }

    /// Highest-priority matching rule, if any.
    pub fn lookup(&self, p: &CapturedPacket) -> Option<(RuleId, &FlowRule)> {
        self.lookup_entry(p).map(|e| (e.id, &e.rule))
    }

    /// Executes the matching rule's actions (or the default action).
    ///
    /// Output emissions always precede mirror, truncate and tunnel emissions.
    pub fn apply(&self, p: &CapturedPacket) -> Vec<Emission> {
        let bytes = serialize_packet(p);
        let Some(entry) = self.lookup_entry(p) else {
            self.miss.hit(p.wire_length);
            return match self.default_action {
                DefaultAction::Output(port) => vec![Emission {
                    port,
                    bytes,
                    wire_length: p.wire_length,
                }],
                DefaultAction::Drop => Vec::new(),
            };
        };
        entry.counters.hit(p.wire_length);

        let mut out = Vec::with_capacity(entry.rule.actions.len());
        let outputs = entry.rule.actions.iter().filter(|a| a.is_output());
        let others = entry.rule.actions.iter().filter(|a| !a.is_output());
        for action in outputs.chain(others) {
            out.push(match action {
                RuleAction::Output(port) | RuleAction::Mirror(port) => Emission {
                    port: *port,
                    bytes: bytes.clone(),
                    wire_length: p.wire_length,
                },
                RuleAction::TruncateMirror { port, max_bytes } => Emission {
                    port: *port,
                    bytes: bytes[..bytes.len().min(*max_bytes)].to_vec(),
                    wire_length: p.wire_length,
                },
                RuleAction::Tunnel { tunnel, port } => {
                    let spec = &self.tunnels[tunnel];
                    let frame = encapsulate(spec, p);
                    Emission {
                        port: *port,
                        wire_length: frame.len(),
                        bytes: frame,
                    }
                }
            });
        }
        out
    }

    pub fn counters(&self, id: RuleId) -> Option<CounterSnapshot> {
        self.entries.iter().find(|e| e.id == id).map(|e| e.counters.snapshot())
    }

    pub fn miss_counters(&self) -> CounterSnapshot {
        self.miss.snapshot()
    }
}
