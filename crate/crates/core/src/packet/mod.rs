// SPDX-License-Identifier: Apache-2.0

//! Ethernet / IPv4 / TCP / UDP frame model.
//!
//! A [`CapturedPacket`] keeps every byte it was parsed from: header fields are
//! decoded into structs, anything the model does not interpret (IP options, TCP
//! options, Ethernet padding, non-IPv4 bodies) is kept verbatim so that
//! [`serialize_packet`] reproduces the captured bytes exactly.

pub mod pcap;

use std::fmt;
use std::net::Ipv4Addr;

use thiserror::Error;

pub const ETHERNET_HEADER_LEN: usize = 14;
pub const IPV4_MIN_HEADER_LEN: usize = 20;
pub const TCP_MIN_HEADER_LEN: usize = 20;
pub const UDP_HEADER_LEN: usize = 8;

/// Ethernet + IPv4 + TCP without options.
pub const MIN_TCP_FRAME_LEN: usize = ETHERNET_HEADER_LEN + IPV4_MIN_HEADER_LEN + TCP_MIN_HEADER_LEN;

pub const ETHERTYPE_IPV4: u16 = 0x0800;
pub const IPPROTO_TCP: u8 = 6;
pub const IPPROTO_UDP: u8 = 17;
pub const IPPROTO_GRE: u8 = 47;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PacketError {
    #[error("malformed {layer} header: {reason}")]
    MalformedHeader { layer: &'static str, reason: String },
    #[error("captured length {captured} exceeds wire length {wire}")]
    WireLength { captured: usize, wire: usize },
    #[error("packet is not TCP over IPv4")]
    NotTcp,
}

fn malformed(layer: &'static str, reason: impl Into<String>) -> PacketError {
    PacketError::MalformedHeader {
        layer,
        reason: reason.into(),
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Hash, Default, PartialOrd, Ord)]
pub struct MacAddr(pub [u8; 6]);

impl MacAddr {
    pub const ZERO: MacAddr = MacAddr([0; 6]);
}

impl fmt::Display for MacAddr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let b = self.0;
        write!(
            f,
            "{:02x}:{:02x}:{:02x}:{:02x}:{:02x}:{:02x}",
            b[0], b[1], b[2], b[3], b[4], b[5]
        )
    }
}

impl fmt::Debug for MacAddr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

impl std::str::FromStr for MacAddr {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut out = [0u8; 6];
        let mut parts = s.split(':');
        for byte in out.iter_mut() {
            let part = parts.next().ok_or_else(|| format!("invalid MAC address '{s}'"))?;
            *byte = u8::from_str_radix(part, 16).map_err(|_| format!("invalid MAC address '{s}'"))?;
        }
        if parts.next().is_some() {
            return Err(format!("invalid MAC address '{s}'"));
        }
        Ok(MacAddr(out))
    }
}

/// The TCP flags byte (offset 13 of the TCP header).
///
/// All eight bits are retained; the named accessors cover the six classic flags.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct TcpFlags(u8);

impl TcpFlags {
    pub const FIN: TcpFlags = TcpFlags(0x01);
    pub const SYN: TcpFlags = TcpFlags(0x02);
    pub const RST: TcpFlags = TcpFlags(0x04);
    pub const PSH: TcpFlags = TcpFlags(0x08);
    pub const ACK: TcpFlags = TcpFlags(0x10);
    pub const URG: TcpFlags = TcpFlags(0x20);
    pub const ECE: TcpFlags = TcpFlags(0x40);
    pub const CWR: TcpFlags = TcpFlags(0x80);

    pub const fn empty() -> Self {
        TcpFlags(0)
    }

    pub const fn from_bits(bits: u8) -> Self {
        TcpFlags(bits)
    }

    pub const fn bits(self) -> u8 {
        self.0
    }

    pub const fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub const fn contains(self, other: TcpFlags) -> bool {
        self.0 & other.0 == other.0
    }

    pub const fn intersects(self, other: TcpFlags) -> bool {
        self.0 & other.0 != 0
    }

    pub fn fin(self) -> bool {
        self.contains(Self::FIN)
    }
    pub fn syn(self) -> bool {
        self.contains(Self::SYN)
    }
    pub fn rst(self) -> bool {
        self.contains(Self::RST)
    }
    pub fn psh(self) -> bool {
        self.contains(Self::PSH)
    }
    pub fn ack(self) -> bool {
        self.contains(Self::ACK)
    }
    pub fn urg(self) -> bool {
        self.contains(Self::URG)
    }

    /// Parses a `|`-separated list of flag names, e.g. `ACK|PSH`.
    pub fn parse_names(s: &str) -> Result<Self, String> {
        let mut flags = TcpFlags::empty();
        for name in s.split('|').map(str::trim) {
            flags = flags
                | match name.to_ascii_uppercase().as_str() {
                    "FIN" => Self::FIN,
                    "SYN" => Self::SYN,
                    "RST" => Self::RST,
                    "PSH" | "PUSH" => Self::PSH,
                    "ACK" => Self::ACK,
                    "URG" => Self::URG,
                    "ECE" => Self::ECE,
                    "CWR" => Self::CWR,
                    _ => return Err(format!("unknown TCP flag '{name}'")),
                };
        }
        Ok(flags)
    }
}

impl std::ops::BitOr for TcpFlags {
    type Output = TcpFlags;

    fn bitor(self, rhs: TcpFlags) -> TcpFlags {
        TcpFlags(self.0 | rhs.0)
    }
}

impl fmt::Debug for TcpFlags {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

impl fmt::Display for TcpFlags {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const NAMES: [&str; 8] = ["FIN", "SYN", "RST", "PSH", "ACK", "URG", "ECE", "CWR"];
        if self.0 == 0 {
            return f.write_str("-");
        }
        let mut first = true;
        for (bit, name) in NAMES.iter().enumerate() {
            if self.0 & (1 << bit) != 0 {
                if !first {
                    f.write_str("|")?;
                }
                f.write_str(name)?;
                first = false;
            }
        }
        Ok(())
    }
}

/// Directional flow identifier.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Debug, serde::Serialize, serde::Deserialize)]
pub struct FiveTuple {
    pub protocol: u8,
    pub src_ip: Ipv4Addr,
    pub dst_ip: Ipv4Addr,
    pub src_port: u16,
    pub dst_port: u16,
}

impl FiveTuple {
    pub fn reversed(&self) -> FiveTuple {
        FiveTuple {
            protocol: self.protocol,
            src_ip: self.dst_ip,
            dst_ip: self.src_ip,
            src_port: self.dst_port,
            dst_port: self.src_port,
        }
    }

    /// Direction-independent form: the lower (ip, port) endpoint is the source.
    pub fn canonical(&self) -> FiveTuple {
        if (self.src_ip, self.src_port) <= (self.dst_ip, self.dst_port) {
            *self
        } else {
            self.reversed()
        }
    }
}

impl fmt::Display for FiveTuple {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}:{} -> {}:{} (proto {})",
            self.src_ip, self.src_port, self.dst_ip, self.dst_port, self.protocol
        )
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct EthernetHeader {
    pub dst: MacAddr,
    pub src: MacAddr,
    pub ethertype: u16,
}

#[derive(Clone, PartialEq, Eq, Debug)]
pub struct Ipv4Header {
    pub tos: u8,
    pub total_length: u16,
    pub identification: u16,
    /// Flags (3 bits) and fragment offset (13 bits) as on the wire.
    pub flags_fragment: u16,
    pub ttl: u8,
    pub protocol: u8,
    pub checksum: u16,
    pub src: Ipv4Addr,
    pub dst: Ipv4Addr,
    pub options: Vec<u8>,
}

impl Ipv4Header {
    pub fn header_len(&self) -> usize {
        IPV4_MIN_HEADER_LEN + self.options.len()
    }

    pub fn write_to(&self, out: &mut Vec<u8>) {
        let ihl = (self.header_len() / 4) as u8;
        out.push(0x40 | ihl);
        out.push(self.tos);
        out.extend_from_slice(&self.total_length.to_be_bytes());
        out.extend_from_slice(&self.identification.to_be_bytes());
        out.extend_from_slice(&self.flags_fragment.to_be_bytes());
        out.push(self.ttl);
        out.push(self.protocol);
        out.extend_from_slice(&self.checksum.to_be_bytes());
        out.extend_from_slice(&self.src.octets());
        out.extend_from_slice(&self.dst.octets());
        out.extend_from_slice(&self.options);
    }

    /// Recomputes the header checksum over the serialized header.
    pub fn fill_checksum(&mut self) {
        self.checksum = 0;
        let mut buf = Vec::with_capacity(self.header_len());
        self.write_to(&mut buf);
        self.checksum = internet_checksum(&buf, 0);
    }
}

#[derive(Clone, PartialEq, Eq, Debug)]
pub struct TcpHeader {
    pub src_port: u16,
    pub dst_port: u16,
    pub seq: u32,
    pub ack: u32,
    /// Low nibble of byte 12 (reserved bits and NS).
    pub reserved: u8,
    pub flags: TcpFlags,
    pub window: u16,
    pub checksum: u16,
    pub urgent: u16,
    pub options: Vec<u8>,
}

impl TcpHeader {
    pub fn header_len(&self) -> usize {
        TCP_MIN_HEADER_LEN + self.options.len()
    }

    fn write_to(&self, out: &mut Vec<u8>) {
        let doff = (self.header_len() / 4) as u8;
        out.extend_from_slice(&self.src_port.to_be_bytes());
        out.extend_from_slice(&self.dst_port.to_be_bytes());
        out.extend_from_slice(&self.seq.to_be_bytes());
        out.extend_from_slice(&self.ack.to_be_bytes());
        out.push((doff << 4) | (self.reserved & 0x0f));
        out.push(self.flags.bits());
        out.extend_from_slice(&self.window.to_be_bytes());
        out.extend_from_slice(&self.checksum.to_be_bytes());
        out.extend_from_slice(&self.urgent.to_be_bytes());
        out.extend_from_slice(&self.options);
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct UdpHeader {
    pub src_port: u16,
    pub dst_port: u16,
    pub length: u16,
    pub checksum: u16,
}

impl UdpHeader {
    fn write_to(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.src_port.to_be_bytes());
        out.extend_from_slice(&self.dst_port.to_be_bytes());
        out.extend_from_slice(&self.length.to_be_bytes());
        out.extend_from_slice(&self.checksum.to_be_bytes());
    }
}

/// Layer-4 view of an IPv4 packet.
#[derive(Clone, PartialEq, Eq, Debug)]
pub enum Transport {
    Tcp(TcpHeader),
    Udp(UdpHeader),
    /// Not IPv4, or an IP protocol other than TCP/UDP: everything above the
    /// last parsed header lives in `payload`.
    Unparsed,
}

/// One captured L2 frame.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct CapturedPacket {
    pub timestamp_us: u64,
    /// Length of the frame on the wire; at least the captured length.
    pub wire_length: usize,
    pub eth: EthernetHeader,
    pub ipv4: Option<Ipv4Header>,
    pub transport: Transport,
    /// Bytes following the last parsed header, bounded by the IPv4 total
    /// length when there is one.
    pub payload: Vec<u8>,
    /// Captured bytes beyond the IPv4 total length (Ethernet padding).
    pub trailer: Vec<u8>,
}

impl CapturedPacket {
    pub fn tcp(&self) -> Option<&TcpHeader> {
        match &self.transport {
            Transport::Tcp(h) => Some(h),
            _ => None,
        }
    }

    pub fn udp(&self) -> Option<&UdpHeader> {
        match &self.transport {
            Transport::Udp(h) => Some(h),
            _ => None,
        }
    }

    pub fn is_tcp(&self) -> bool {
        self.tcp().is_some()
    }

    pub fn headers_len(&self) -> usize {
        let l3 = self.ipv4.as_ref().map_or(0, Ipv4Header::header_len);
        let l4 = match &self.transport {
            Transport::Tcp(h) => h.header_len(),
            Transport::Udp(_) => UDP_HEADER_LEN,
            Transport::Unparsed => 0,
        };
        ETHERNET_HEADER_LEN + l3 + l4
    }

    pub fn captured_len(&self) -> usize {
        self.headers_len() + self.payload.len() + self.trailer.len()
    }

    pub fn is_truncated(&self) -> bool {
        self.captured_len() < self.wire_length
    }

    /// TCP payload length declared by the IPv4 header, which may exceed the
    /// captured payload for truncated captures.
    pub fn tcp_segment_len(&self) -> Option<usize> {
        let (ip, tcp) = (self.ipv4.as_ref()?, self.tcp()?);
        Some((ip.total_length as usize).saturating_sub(ip.header_len() + tcp.header_len()))
    }
}

fn be16(b: &[u8], at: usize) -> u16 {
    u16::from_be_bytes([b[at], b[at + 1]])
}

fn be32(b: &[u8], at: usize) -> u32 {
    u32::from_be_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]])
}

/// Parses a captured Ethernet frame.
///
/// Headers must be fully present. When the capture is shorter than
/// `wire_length` (a truncated capture) the IPv4 total length may point past the
/// captured bytes; for a complete capture that is a malformed header.
pub fn parse_packet(bytes: &[u8], timestamp_us: u64, wire_length: usize) -> Result<CapturedPacket, PacketError> {
    if bytes.len() > wire_length {
        return Err(PacketError::WireLength {
            captured: bytes.len(),
            wire: wire_length,
        });
    }
    let truncated = bytes.len() < wire_length;
    if bytes.len() < ETHERNET_HEADER_LEN {
        return Err(malformed("ethernet", format!("{} bytes captured", bytes.len())));
    }
    let eth = EthernetHeader {
        dst: MacAddr(bytes[0..6].try_into().unwrap()),
        src: MacAddr(bytes[6..12].try_into().unwrap()),
        ethertype: be16(bytes, 12),
    };
    let rest = &bytes[ETHERNET_HEADER_LEN..];
    let mut packet = CapturedPacket {
        timestamp_us,
        wire_length,
        eth,
        ipv4: None,
        transport: Transport::Unparsed,
        payload: Vec::new(),
        trailer: Vec::new(),
    };
    if eth.ethertype != ETHERTYPE_IPV4 {
        packet.payload = rest.to_vec();
        return Ok(packet);
    }

    if rest.len() < IPV4_MIN_HEADER_LEN {
        return Err(malformed("ipv4", format!("{} bytes available", rest.len())));
    }
    if rest[0] >> 4 != 4 {
        return Err(malformed("ipv4", format!("version {}", rest[0] >> 4)));
    }
    let ihl = ((rest[0] & 0x0f) as usize) * 4;
    if ihl < IPV4_MIN_HEADER_LEN {
        return Err(malformed("ipv4", format!("header length {ihl}")));
    }
    if rest.len() < ihl {
        return Err(malformed("ipv4", format!("header length {ihl} exceeds {} captured bytes", rest.len())));
    }
    let total_length = be16(rest, 2);
    if (total_length as usize) < ihl {
        return Err(malformed("ipv4", format!("total length {total_length} below header length {ihl}")));
    }
    if total_length as usize > rest.len() && !truncated {
        return Err(malformed(
            "ipv4",
            format!("total length {total_length} exceeds {} bytes of a complete capture", rest.len()),
        ));
    }
    let ip = Ipv4Header {
        tos: rest[1],
        total_length,
        identification: be16(rest, 4),
        flags_fragment: be16(rest, 6),
        ttl: rest[8],
        protocol: rest[9],
        checksum: be16(rest, 10),
        src: Ipv4Addr::from(be32(rest, 12)),
        dst: Ipv4Addr::from(be32(rest, 16)),
        options: rest[IPV4_MIN_HEADER_LEN..ihl].to_vec(),
    };
    let ip_end = (total_length as usize).min(rest.len());
    packet.trailer = rest[ip_end..].to_vec();
    let l4 = &rest[ihl..ip_end];
    let protocol = ip.protocol;
    packet.ipv4 = Some(ip);

    match protocol {
        IPPROTO_TCP => {
            if l4.len() < TCP_MIN_HEADER_LEN {
                return Err(malformed("tcp", format!("{} bytes available", l4.len())));
            }
            let doff = ((l4[12] >> 4) as usize) * 4;
            if doff < TCP_MIN_HEADER_LEN {
                return Err(malformed("tcp", format!("data offset {doff}")));
            }
            if l4.len() < doff {
                return Err(malformed("tcp", format!("data offset {doff} exceeds {} bytes", l4.len())));
            }
            packet.transport = Transport::Tcp(TcpHeader {
                src_port: be16(l4, 0),
                dst_port: be16(l4, 2),
                seq: be32(l4, 4),
                ack: be32(l4, 8),
                reserved: l4[12] & 0x0f,
                flags: TcpFlags::from_bits(l4[13]),
                window: be16(l4, 14),
                checksum: be16(l4, 16),
                urgent: be16(l4, 18),
                options: l4[TCP_MIN_HEADER_LEN..doff].to_vec(),
            });
            packet.payload = l4[doff..].to_vec();
        }
        IPPROTO_UDP => {
            if l4.len() < UDP_HEADER_LEN {
                return Err(malformed("udp", format!("{} bytes available", l4.len())));
            }
            packet.transport = Transport::Udp(UdpHeader {
                src_port: be16(l4, 0),
                dst_port: be16(l4, 2),
                length: be16(l4, 4),
                checksum: be16(l4, 6),
            });
            packet.payload = l4[UDP_HEADER_LEN..].to_vec();
        }
        _ => packet.payload = l4.to_vec(),
    }
    Ok(packet)
}

/// Serializes the captured bytes of `p`. The wire length is carried out of band.
pub fn serialize_packet(p: &CapturedPacket) -> Vec<u8> {
    let mut out = Vec::with_capacity(p.captured_len());
    out.extend_from_slice(&p.eth.dst.0);
    out.extend_from_slice(&p.eth.src.0);
    out.extend_from_slice(&p.eth.ethertype.to_be_bytes());
    if let Some(ip) = &p.ipv4 {
        ip.write_to(&mut out);
    }
    match &p.transport {
        Transport::Tcp(h) => h.write_to(&mut out),
        Transport::Udp(h) => h.write_to(&mut out),
        Transport::Unparsed => {}
    }
    out.extend_from_slice(&p.payload);
    out.extend_from_slice(&p.trailer);
    out
}

/// Directional 5-tuple of a TCP/IPv4 packet.
pub fn flow_key(p: &CapturedPacket) -> Result<FiveTuple, PacketError> {
    match (&p.ipv4, &p.transport) {
        (Some(ip), Transport::Tcp(tcp)) => Ok(FiveTuple {
            protocol: IPPROTO_TCP,
            src_ip: ip.src,
            dst_ip: ip.dst,
            src_port: tcp.src_port,
            dst_port: tcp.dst_port,
        }),
        _ => Err(PacketError::NotTcp),
    }
}

/// 5-tuple of a TCP or UDP packet over IPv4.
pub fn transport_key(p: &CapturedPacket) -> Option<FiveTuple> {
    let ip = p.ipv4.as_ref()?;
    let (src_port, dst_port) = match &p.transport {
        Transport::Tcp(h) => (h.src_port, h.dst_port),
        Transport::Udp(h) => (h.src_port, h.dst_port),
        Transport::Unparsed => return None,
    };
    Some(FiveTuple {
        protocol: ip.protocol,
        src_ip: ip.src,
        dst_ip: ip.dst,
        src_port,
        dst_port,
    })
}

/// RFC 1071 ones' complement sum, seeded with `initial` (used for pseudo-headers).
pub fn internet_checksum(data: &[u8], initial: u32) -> u16 {
    let mut sum = initial;
    let mut chunks = data.chunks_exact(2);
    for c in &mut chunks {
        sum += u16::from_be_bytes([c[0], c[1]]) as u32;
    }
    if let [last] = chunks.remainder() {
        sum += (*last as u32) << 8;
    }
    while sum >> 16 != 0 {
        sum = (sum & 0xffff) + (sum >> 16);
    }
    !(sum as u16)
}

/// TCP checksum over the IPv4 pseudo-header, header and payload.
pub fn tcp_checksum(src: Ipv4Addr, dst: Ipv4Addr, tcp: &TcpHeader, payload: &[u8]) -> u16 {
    let mut hdr = Vec::with_capacity(tcp.header_len());
    let mut zeroed = tcp.clone();
    zeroed.checksum = 0;
    zeroed.write_to(&mut hdr);
    let seg_len = (hdr.len() + payload.len()) as u32;
    let mut pseudo = 0u32;
    for ip in [src, dst] {
        let o = ip.octets();
        pseudo += u16::from_be_bytes([o[0], o[1]]) as u32 + u16::from_be_bytes([o[2], o[3]]) as u32;
    }
    pseudo += IPPROTO_TCP as u32 + (seg_len >> 16) + (seg_len & 0xffff);
    hdr.extend_from_slice(payload);
    internet_checksum(&hdr, pseudo)
}

/// Builds a complete TCP/IPv4 frame with valid checksums.
#[allow(clippy::too_many_arguments)]
pub fn build_tcp_frame(
    timestamp_us: u64,
    src_mac: MacAddr,
    dst_mac: MacAddr,
    flow: &FiveTuple,
    seq: u32,
    ack: u32,
    flags: TcpFlags,
    ip_id: u16,
    payload: &[u8],
) -> CapturedPacket {
    let mut tcp = TcpHeader {
        src_port: flow.src_port,
        dst_port: flow.dst_port,
        seq,
        ack,
        reserved: 0,
        flags,
        window: 65535,
        checksum: 0,
        urgent: 0,
        options: Vec::new(),
    };
    tcp.checksum = tcp_checksum(flow.src_ip, flow.dst_ip, &tcp, payload);
    let mut ip = Ipv4Header {
        tos: 0,
        total_length: (IPV4_MIN_HEADER_LEN + TCP_MIN_HEADER_LEN + payload.len()) as u16,
        identification: ip_id,
        flags_fragment: 0x4000,
        ttl: 64,
        protocol: IPPROTO_TCP,
        checksum: 0,
        src: flow.src_ip,
        dst: flow.dst_ip,
        options: Vec::new(),
    };
    ip.fill_checksum();
    CapturedPacket {
        timestamp_us,
        wire_length: MIN_TCP_FRAME_LEN + payload.len(),
        eth: EthernetHeader {
            dst: dst_mac,
            src: src_mac,
            ethertype: ETHERTYPE_IPV4,
        },
        ipv4: Some(ip),
        transport: Transport::Tcp(tcp),
        payload: payload.to_vec(),
        trailer: Vec::new(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn client_server() -> FiveTuple {
        FiveTuple {
            protocol: IPPROTO_TCP,
            src_ip: Ipv4Addr::new(10, 0, 0, 1),
            dst_ip: Ipv4Addr::new(10, 0, 0, 2),
            src_port: 50000,
            dst_port: 8080,
        }
    }

    fn syn_frame() -> Vec<u8> {
        let p = build_tcp_frame(0, MacAddr([2, 0, 0, 0, 0, 1]), MacAddr([2, 0, 0, 0, 0, 2]), &client_server(), 1, 0, TcpFlags::SYN, 7, &[]);
        serialize_packet(&p)
    }

    #[test]
    fn minimal_syn_frame() {
        let bytes = syn_frame();
        assert_eq!(bytes.len(), 54);
        let p = parse_packet(&bytes, 10, 54).unwrap();
        assert_eq!(p.payload.len(), 0);
        assert!(p.tcp().unwrap().flags.syn());
        assert!(!p.tcp().unwrap().flags.ack());
        assert_eq!(serialize_packet(&p), bytes);
    }

    #[test]
    fn total_length_beyond_complete_capture_is_malformed() {
        let mut bytes = syn_frame();
        bytes[16..18].copy_from_slice(&2000u16.to_be_bytes());
        assert!(matches!(parse_packet(&bytes, 0, 54), Err(PacketError::MalformedHeader { layer: "ipv4", .. })));
        // Same bytes flagged as a truncated capture of a 2014-byte frame parse fine.
        let p = parse_packet(&bytes, 0, 2014).unwrap();
        assert!(p.is_truncated());
        assert_eq!(p.tcp_segment_len(), Some(1960));
        assert_eq!(serialize_packet(&p), bytes);
    }

    #[test]
    fn header_cut_midway_is_malformed() {
        let bytes = syn_frame();
        for cut in [10, 20, 40, 53] {
            assert!(matches!(parse_packet(&bytes[..cut], 0, 54), Err(PacketError::MalformedHeader { .. })), "cut {cut}");
        }
    }

    #[test]
    fn captured_longer_than_wire_is_rejected() {
        let bytes = syn_frame();
        assert!(matches!(parse_packet(&bytes, 0, 40), Err(PacketError::WireLength { .. })));
    }

    #[test]
    fn truncated_data_segment_keeps_headers() {
        let p = build_tcp_frame(5, MacAddr::ZERO, MacAddr::ZERO, &client_server(), 1, 1, TcpFlags::ACK | TcpFlags::PSH, 0, &[b'x'; 1460]);
        let bytes = serialize_packet(&p);
        assert_eq!(bytes.len(), 1514);
        let t = parse_packet(&bytes[..54], 5, 1514).unwrap();
        assert!(t.payload.is_empty());
        assert_eq!(t.tcp().unwrap().flags, TcpFlags::ACK | TcpFlags::PSH);
        assert_eq!(serialize_packet(&t), &bytes[..54]);
    }

    #[test]
    fn ethernet_padding_is_preserved() {
        let mut bytes = syn_frame();
        bytes.extend_from_slice(&[0u8; 6]);
        let p = parse_packet(&bytes, 0, 60).unwrap();
        assert_eq!(p.trailer.len(), 6);
        assert_eq!(serialize_packet(&p), bytes);
    }

    #[test]
    fn flow_key_and_canonical() {
        let bytes = syn_frame();
        let p = parse_packet(&bytes, 0, 54).unwrap();
        let key = flow_key(&p).unwrap();
        assert_eq!(key, client_server());
        assert_ne!(key, key.reversed());
        assert_eq!(key.canonical(), key.reversed().canonical());
    }

    #[test]
    fn udp_frame_is_not_tcp() {
        let mut bytes = syn_frame();
        bytes[23] = IPPROTO_UDP;
        let p = parse_packet(&bytes, 0, 54).unwrap();
        assert!(p.udp().is_some());
        assert_eq!(flow_key(&p), Err(PacketError::NotTcp));
        assert_eq!(serialize_packet(&p), bytes);
    }

    #[test]
    fn non_ipv4_is_opaque() {
        let mut bytes = vec![0xffu8; 12];
        bytes.extend_from_slice(&0x0806u16.to_be_bytes());
        bytes.extend_from_slice(&[1, 2, 3, 4]);
        let p = parse_packet(&bytes, 0, bytes.len()).unwrap();
        assert!(p.ipv4.is_none());
        assert_eq!(p.payload, vec![1, 2, 3, 4]);
        assert_eq!(flow_key(&p), Err(PacketError::NotTcp));
        assert_eq!(serialize_packet(&p), bytes);
    }

    #[test]
    fn built_frames_have_valid_checksums() {
        let p = build_tcp_frame(0, MacAddr::ZERO, MacAddr::ZERO, &client_server(), 100, 200, TcpFlags::ACK, 1, b"hello");
        let bytes = serialize_packet(&p);
        assert_eq!(internet_checksum(&bytes[14..34], 0), 0);
        let tcp = p.tcp().unwrap();
        assert_eq!(tcp_checksum(client_server().src_ip, client_server().dst_ip, tcp, &p.payload), tcp.checksum);
    }

    #[test]
    fn flag_names() {
        assert_eq!(TcpFlags::parse_names("ACK|PSH").unwrap(), TcpFlags::ACK | TcpFlags::PSH);
        assert!(TcpFlags::parse_names("ACK|NOPE").is_err());
        assert_eq!((TcpFlags::ACK | TcpFlags::PSH).to_string(), "PSH|ACK");
    }

    #[test]
    fn tcp_flags_byte_round_trip_all_values() {
        for b in 0..=255u8 {
            let f = TcpFlags::from_bits(b);
            assert_eq!(f.bits(), b);
            let rebuilt = [TcpFlags::FIN, TcpFlags::SYN, TcpFlags::RST, TcpFlags::PSH, TcpFlags::ACK, TcpFlags::URG, TcpFlags::ECE, TcpFlags::CWR]
                .into_iter()
                .filter(|x| f.contains(*x))
                .fold(TcpFlags::empty(), |a, x| a | x);
            assert_eq!(rebuilt, f);
        }
    }

    proptest! {
        #[test]
        fn canonical_is_stable(a: u32, b: u32, sp: u16, dp: u16, proto: u8) {
            let t = FiveTuple { protocol: proto, src_ip: a.into(), dst_ip: b.into(), src_port: sp, dst_port: dp };
            prop_assert_eq!(t.canonical().canonical(), t.canonical());
            prop_assert_eq!(t.canonical(), t.reversed().canonical());
        }

        #[test]
        fn tcp_frames_round_trip(
            seq: u32, ack: u32, flags: u8, id: u16,
            ip_opts in 0usize..=10, tcp_opts in 0usize..=10,
            payload in proptest::collection::vec(any::<u8>(), 0..1500),
            cut in any::<proptest::sample::Index>(),
        ) {
            let mut p = build_tcp_frame(1, MacAddr([1; 6]), MacAddr([2; 6]), &client_server(), seq, ack, TcpFlags::from_bits(flags), id, &payload);
            if let Transport::Tcp(t) = &mut p.transport { t.options = vec![1; tcp_opts * 4]; }
            let ip = p.ipv4.as_mut().unwrap();
            ip.options = vec![1; ip_opts * 4];
            ip.total_length += (ip_opts * 4 + tcp_opts * 4) as u16;
            p.wire_length += ip_opts * 4 + tcp_opts * 4;
            let bytes = serialize_packet(&p);
            prop_assert_eq!(bytes.len(), p.wire_length);
            let parsed = parse_packet(&bytes, 1, bytes.len()).unwrap();
            prop_assert_eq!(&parsed, &p);
            // Any truncation that keeps the headers still parses.
            let hl = p.headers_len();
            let keep = hl + cut.index(bytes.len() - hl + 1);
            let t = parse_packet(&bytes[..keep], 1, bytes.len()).unwrap();
            prop_assert_eq!(serialize_packet(&t), &bytes[..keep]);
        }
    }
}
