// SPDX-License-Identifier: Apache-2.0

//! Line-oriented rules file.
//!
//! ```text
//! # comment
//! tunnel vx0 vxlan src_mac=02:00:00:00:00:01 dst_mac=02:00:00:00:00:02 src_ip=192.168.0.1 dst_ip=192.168.0.9 vni=42
//! default=output:1
//! priority=10 proto=tcp dst_port=8080 flags_any=ACK|PSH actions=output:1,mirror:2
//! priority=10 proto=tcp src_port=8080 flags_all=PSH actions=output:3,trunc:2:54,tunnel:vx0:4
//! ```
//!
//! `default=` is either `drop` or `output:<port>`; without it unmatched
//! packets are dropped. Tunnel declarations may appear anywhere in the file.

use std::net::Ipv4Addr;

use thiserror::Error;

use super::{DefaultAction, FlowRule, FlowTable, MatchConditions, PortId, RuleAction, RuleError};
use crate::packet::{MacAddr, TcpFlags, IPPROTO_TCP, IPPROTO_UDP};
use crate::tunnel::{OuterHeaders, TunnelKind, TunnelSpec, Vni};

#[derive(Debug, Error, PartialEq, Eq)]
#[error("rules file line {line}: {message}")]
pub struct RuleFileError {
    pub line: usize,
    pub message: String,
}

/// Parsed rules file: the populated table plus the rule lines in file order.
#[derive(Debug)]
pub struct RulesConfig {
    pub table: FlowTable,
    pub rule_lines: Vec<(super::RuleId, usize)>,
}

pub fn parse_rules(text: &str) -> Result<RulesConfig, RuleFileError> {
    let mut table = FlowTable::new(DefaultAction::Drop);
    let lines: Vec<(usize, &str)> = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.split('#').next().unwrap_or("").trim()))
        .filter(|(_, l)| !l.is_empty())
        .collect();

    for &(line, l) in &lines {
        if let Some(rest) = l.strip_prefix("tunnel ") {
            let spec = parse_tunnel(rest).map_err(|message| RuleFileError { line, message })?;
            table.add_tunnel(spec).map_err(|e| RuleFileError {
                line,
                message: e.to_string(),
            })?;
        }
    }

    let mut rule_lines = Vec::new();
    for &(line, l) in &lines {
        if l.starts_with("tunnel ") {
            continue;
        }
        let err = |message: String| RuleFileError { line, message };
        if let Some(d) = l.strip_prefix("default=") {
            let action = match d {
                "drop" => DefaultAction::Drop,
                _ => match d.strip_prefix("output:") {
                    Some(p) => DefaultAction::Output(parse_port(p).map_err(err)?),
                    None => return Err(err(format!("invalid default action '{d}'"))),
                },
            };
            table.set_default_action(action);
            continue;
        }
        let rule = parse_rule(l).map_err(err)?;
        let id = table.add_rule(rule).map_err(|e: RuleError| err(e.to_string()))?;
        rule_lines.push((id, line));
    }
    Ok(RulesConfig { table, rule_lines })
}

fn parse_port(s: &str) -> Result<PortId, String> {
    s.parse::<u32>().map(PortId).map_err(|_| format!("invalid port id '{s}'"))
}

fn parse_wild<T: std::str::FromStr>(key: &str, v: &str) -> Result<Option<T>, String> {
    if v == "*" {
        return Ok(None);
    }
    v.parse().map(Some).map_err(|_| format!("invalid value '{v}' for {key}"))
}

fn parse_rule(line: &str) -> Result<FlowRule, String> {
    let mut priority = None;
    let mut cond = MatchConditions::default();
    let mut actions = None;
    for token in line.split_whitespace() {
        let (key, value) = token.split_once('=').ok_or_else(|| format!("expected key=value, found '{token}'"))?;
        match key {
            "priority" => priority = Some(value.parse::<i32>().map_err(|_| format!("invalid priority '{value}'"))?),
            "proto" => {
                cond.protocol = match value {
                    "tcp" => Some(IPPROTO_TCP),
                    "udp" => Some(IPPROTO_UDP),
                    "*" => None,
                    n => Some(n.parse().map_err(|_| format!("invalid protocol '{n}'"))?),
                }
            }
            "src_ip" => cond.src_ip = parse_wild::<Ipv4Addr>(key, value)?,
            "dst_ip" => cond.dst_ip = parse_wild::<Ipv4Addr>(key, value)?,
            "src_port" => cond.src_port = parse_wild::<u16>(key, value)?,
            "dst_port" => cond.dst_port = parse_wild::<u16>(key, value)?,
            "flags_any" => cond.tcp_flags_any_set = TcpFlags::parse_names(value)?,
            "flags_all" => cond.tcp_flags_all_set = TcpFlags::parse_names(value)?,
            "actions" => actions = Some(parse_actions(value)?),
            other => return Err(format!("unknown key '{other}'")),
        }
    }
    let priority = priority.ok_or("missing priority=")?;
    let actions = actions.ok_or("missing actions=")?;
    Ok(FlowRule::new(priority, cond, actions))
}

fn parse_actions(s: &str) -> Result<Vec<RuleAction>, String> {
    s.split(',')
        .map(|a| {
            let parts: Vec<&str> = a.split(':').collect();
            match parts.as_slice() {
                ["output", p] => Ok(RuleAction::Output(parse_port(p)?)),
                ["mirror", p] => Ok(RuleAction::Mirror(parse_port(p)?)),
                ["trunc", p, n] => Ok(RuleAction::TruncateMirror {
                    port: parse_port(p)?,
                    max_bytes: n.parse().map_err(|_| format!("invalid truncation length '{n}'"))?,
                }),
                ["tunnel", t, p] => Ok(RuleAction::Tunnel {
                    tunnel: t.to_string(),
                    port: parse_port(p)?,
                }),
                _ => Err(format!("invalid action '{a}'")),
            }
        })
        .collect()
}

fn parse_tunnel(rest: &str) -> Result<TunnelSpec, String> {
    let mut tokens = rest.split_whitespace();
    let id = tokens.next().ok_or("tunnel needs an id")?.to_string();
    let proto = tokens.next().ok_or("tunnel needs a protocol")?;
    let (mut src_mac, mut dst_mac) = (MacAddr::ZERO, MacAddr::ZERO);
    let (mut src_ip, mut dst_ip) = (None, None);
    let (mut vni, mut key) = (None, None);
    for token in tokens {
        let (k, v) = token.split_once('=').ok_or_else(|| format!("expected key=value, found '{token}'"))?;
        match k {
            "src_mac" => src_mac = v.parse()?,
            "dst_mac" => dst_mac = v.parse()?,
            "src_ip" => src_ip = Some(v.parse::<Ipv4Addr>().map_err(|_| format!("invalid src_ip '{v}'"))?),
            "dst_ip" => dst_ip = Some(v.parse::<Ipv4Addr>().map_err(|_| format!("invalid dst_ip '{v}'"))?),
            "vni" => vni = Some(v.parse::<u32>().map_err(|_| format!("invalid vni '{v}'"))?),
            "key" => key = Some(v.parse::<u32>().map_err(|_| format!("invalid key '{v}'"))?),
            other => return Err(format!("unknown tunnel key '{other}'")),
        }
    }
    let kind = match proto {
        "vxlan" => {
            if key.is_some() {
                return Err("key= is only valid for gre tunnels".into());
            }
            TunnelKind::Vxlan {
                vni: Vni::new(vni.unwrap_or(0)).map_err(|e| e.to_string())?,
            }
        }
        "gre" => {
            if vni.is_some() {
                return Err("vni= is only valid for vxlan tunnels".into());
            }
            TunnelKind::Gre { key }
        }
        other => return Err(format!("unknown tunnel protocol '{other}'")),
    };
    Ok(TunnelSpec {
        id,
        kind,
        outer: OuterHeaders {
            src_mac,
            dst_mac,
            src_ip: src_ip.ok_or("tunnel needs src_ip=")?,
            dst_ip: dst_ip.ok_or("tunnel needs dst_ip=")?,
        },
    })
}
