// SPDX-License-Identifier: Apache-2.0

//! Offline switch: replays a capture through a [`FlowTable`] and collects
//! what leaves each port.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::Serialize;

use crate::flow_rules::{CounterSnapshot, FlowTable, PortId};
use crate::packet::pcap::PcapRecord;

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct PortSummary {
    pub port: u32,
    pub packets: u64,
    /// Bytes actually emitted (after truncation).
    pub bytes: u64,
    pub wire_bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct RuleSummary {
    pub rule: u64,
    pub priority: i32,
    /// Line in the rules file, when the table came from one.
    pub line: Option<usize>,
    pub packets: u64,
    pub bytes: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct SwitchSummary {
    pub input_packets: u64,
    pub unparseable: u64,
    pub ports: Vec<PortSummary>,
    pub rules: Vec<RuleSummary>,
    pub table_miss: CounterSnapshot,
}

#[derive(Clone, Debug, Default)]
pub struct SwitchRun {
    pub ports: BTreeMap<PortId, Vec<PcapRecord>>,
    pub summary: SwitchSummary,
}

/// Routes every record through `table`. Unparseable frames are counted and
/// dropped. `rule_lines` maps rule ids to rules-file line numbers.
pub fn replay<I>(table: &FlowTable, records: I, rule_lines: &[(crate::flow_rules::RuleId, usize)]) -> SwitchRun
where
    I: IntoIterator<Item = PcapRecord>,
{
    let mut run = SwitchRun::default();
    let mut per_port: BTreeMap<PortId, PortSummary> = BTreeMap::new();
    for rec in records {
        run.summary.input_packets += 1;
        let p = match rec.parse() {
            Ok(p) => p,
            Err(e) => {
                log::debug!("dropping unparseable frame at {} us: {e}", rec.timestamp_us);
                run.summary.unparseable += 1;
                continue;
            }
        };
        for em in table.apply(&p) {
            let s = per_port.entry(em.port).or_insert_with(|| PortSummary {
                port: em.port.0,
                ..Default::default()
            });
            s.packets += 1;
            s.bytes += em.bytes.len() as u64;
            s.wire_bytes += em.wire_length as u64;
            run.ports.entry(em.port).or_default().push(PcapRecord {
                timestamp_us: p.timestamp_us,
                wire_len: em.wire_length as u32,
                data: em.bytes,
            });
        }
    }
    run.summary.ports = per_port.into_values().collect();
    run.summary.rules = table
        .rules()
        .map(|(id, rule)| {
            let c = table.counters(id).unwrap_or_default();
            RuleSummary {
                rule: id.0,
                priority: rule.priority,
                line: rule_lines.iter().find(|(r, _)| *r == id).map(|&(_, l)| l),
                packets: c.packets,
                bytes: c.bytes,
            }
        })
        .collect();
    run.summary.table_miss = table.miss_counters();
    run
}

pub fn render_summary(s: &SwitchSummary) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "input packets: {}  unparseable: {}", s.input_packets, s.unparseable);
    let _ = writeln!(out, "{:>6} {:>10} {:>14} {:>14}", "port", "packets", "bytes", "wire_bytes");
    for p in &s.ports {
        let _ = writeln!(out, "{:>6} {:>10} {:>14} {:>14}", p.port, p.packets, p.bytes, p.wire_bytes);
    }
    let _ = writeln!(out, "{:>6} {:>8} {:>6} {:>10} {:>14}", "rule", "priority", "line", "packets", "bytes");
    for r in &s.rules {
        let line = r.line.map(|l| l.to_string()).unwrap_or_else(|| "-".into());
        let _ = writeln!(out, "{:>6} {:>8} {:>6} {:>10} {:>14}", r.rule, r.priority, line, r.packets, r.bytes);
    }
    let _ = writeln!(out, "table miss: {} packets, {} bytes", s.table_miss.packets, s.table_miss.bytes);
    out
}
