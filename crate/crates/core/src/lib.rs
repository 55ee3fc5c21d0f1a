// SPDX-License-Identifier: Apache-2.0

//! Network-based application monitoring.
//!
//! Collection mechanisms (port mirroring, selective and truncated mirroring
//! through [`flow_rules`], GRE/VXLAN [`tunnel`]ing, the port [`sniffer`]) feed
//! the [`analysis`] engine, which derives HTTP request service times, windowed
//! aggregates, server load, success rate and per-URL frequency. The
//! [`traffic_gen`] module produces synthetic captures with ground truth.

pub mod analysis;
pub mod collector;
pub mod flow_rules;
pub mod packet;
pub mod sniffer;
pub mod switch;
pub mod traffic_gen;
pub mod tunnel;
