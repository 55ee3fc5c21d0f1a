// SPDX-License-Identifier: Apache-2.0

//! GRE and VXLAN encapsulation of whole Ethernet frames.
//!
//! Encapsulated layout:
//!
//! ```text
//! VXLAN: outer Eth(14) | IPv4(20, proto 17) | UDP(8, dst 4789) | VXLAN(8) | inner frame
//! GRE:   outer Eth(14) | IPv4(20, proto 47) | GRE(4, +4 with key)    | inner frame
//! ```

use std::fmt;
use std::net::Ipv4Addr;

use thiserror::Error;

use crate::packet::{
    parse_packet, serialize_packet, transport_key, CapturedPacket, Ipv4Header, MacAddr, PacketError,
    ETHERNET_HEADER_LEN, ETHERTYPE_IPV4, IPPROTO_GRE, IPPROTO_UDP, IPV4_MIN_HEADER_LEN, UDP_HEADER_LEN,
};

pub const VXLAN_PORT: u16 = 4789;
pub const VXLAN_HEADER_LEN: usize = 8;
pub const VXLAN_FLAG_VNI: u8 = 0x08;
pub const GRE_BASE_HEADER_LEN: usize = 4;
pub const GRE_PROTO_TEB: u16 = 0x6558;
const GRE_FLAG_CHECKSUM: u16 = 0x8000;
const GRE_FLAG_KEY: u16 = 0x2000;
const GRE_FLAG_SEQ: u16 = 0x1000;
const OUTER_TTL: u8 = 64;
const IP_DONT_FRAGMENT: u16 = 0x4000;
const SOURCE_PORT_BASE: u16 = 49152;

pub const VXLAN_OVERHEAD: usize = ETHERNET_HEADER_LEN + IPV4_MIN_HEADER_LEN + UDP_HEADER_LEN + VXLAN_HEADER_LEN;
pub const GRE_OVERHEAD: usize = ETHERNET_HEADER_LEN + IPV4_MIN_HEADER_LEN + GRE_BASE_HEADER_LEN;
pub const GRE_KEYED_OVERHEAD: usize = GRE_OVERHEAD + 4;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TunnelError {
    #[error("frame is not VXLAN or GRE encapsulated")]
    NotTunneled,
    #[error("malformed tunnel header: {0}")]
    MalformedTunnelHeader(String),
    #[error("invalid VNI {0}: must be below 2^24")]
    InvalidVni(u32),
    #[error(transparent)]
    Packet(#[from] PacketError),
}

/// 24-bit VXLAN network identifier.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug, Default)]
pub struct Vni(u32);

impl Vni {
    pub const MAX: u32 = (1 << 24) - 1;

    pub fn new(v: u32) -> Result<Self, TunnelError> {
        if v > Self::MAX {
            return Err(TunnelError::InvalidVni(v));
        }
        Ok(Vni(v))
    }

    pub fn get(self) -> u32 {
        self.0
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum TunnelKind {
    Vxlan { vni: Vni },
    Gre { key: Option<u32> },
}

impl TunnelKind {
    /// Bytes added in front of the inner frame.
    pub fn overhead(&self) -> usize {
        match self {
            TunnelKind::Vxlan { .. } => VXLAN_OVERHEAD,
            TunnelKind::Gre { key: None } => GRE_OVERHEAD,
            TunnelKind::Gre { key: Some(_) } => GRE_KEYED_OVERHEAD,
        }
    }
}

impl fmt::Display for TunnelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TunnelKind::Vxlan { vni } => write!(f, "vxlan vni={}", vni.get()),
            TunnelKind::Gre { key: Some(k) } => write!(f, "gre key={k}"),
            TunnelKind::Gre { key: None } => f.write_str("gre"),
        }
    }
}

/// Outer addressing of a tunnel: the sending switch and the tunnel endpoint.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct OuterHeaders {
    pub src_mac: MacAddr,
    pub dst_mac: MacAddr,
    pub src_ip: Ipv4Addr,
    pub dst_ip: Ipv4Addr,
}

#[derive(Clone, PartialEq, Eq, Debug)]
pub struct TunnelSpec {
    pub id: String,
    pub kind: TunnelKind,
    pub outer: OuterHeaders,
}

/// Result of decapsulating one frame.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct Decapsulated {
    pub kind: TunnelKind,
    pub outer: OuterHeaders,
    pub inner: CapturedPacket,
}

/// FNV-1a over the canonical inner 5-tuple, folded into the dynamic port range.
fn vxlan_source_port(inner: &CapturedPacket) -> u16 {
    let Some(key) = transport_key(inner) else {
        return SOURCE_PORT_BASE;
    };
    let c = key.canonical();
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut feed = |bytes: &[u8]| {
        for b in bytes {
            h ^= *b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    };
    feed(&[c.protocol]);
    feed(&c.src_ip.octets());
    feed(&c.dst_ip.octets());
    feed(&c.src_port.to_be_bytes());
    feed(&c.dst_port.to_be_bytes());
    SOURCE_PORT_BASE + (h % (u16::MAX - SOURCE_PORT_BASE + 1) as u64) as u16
}

/// Wraps the captured bytes of `inner` in the outer headers of `spec`.
pub fn encapsulate(spec: &TunnelSpec, inner: &CapturedPacket) -> Vec<u8> {
    let inner_bytes = serialize_packet(inner);
    let overhead = spec.kind.overhead();
    let mut out = Vec::with_capacity(overhead + inner_bytes.len());
    out.extend_from_slice(&spec.outer.dst_mac.0);
    out.extend_from_slice(&spec.outer.src_mac.0);
    out.extend_from_slice(&ETHERTYPE_IPV4.to_be_bytes());

    let l3_len = overhead - ETHERNET_HEADER_LEN + inner_bytes.len();
    let mut ip = Ipv4Header {
        tos: 0,
        total_length: l3_len as u16,
        identification: 0,
        flags_fragment: IP_DONT_FRAGMENT,
        ttl: OUTER_TTL,
        protocol: match spec.kind {
            TunnelKind::Vxlan { .. } => IPPROTO_UDP,
            TunnelKind::Gre { .. } => IPPROTO_GRE,
        },
        checksum: 0,
        src: spec.outer.src_ip,
        dst: spec.outer.dst_ip,
        options: Vec::new(),
    };
    ip.fill_checksum();
    ip.write_to(&mut out);

    match spec.kind {
        TunnelKind::Vxlan { vni } => {
            let udp_len = (UDP_HEADER_LEN + VXLAN_HEADER_LEN + inner_bytes.len()) as u16;
            out.extend_from_slice(&vxlan_source_port(inner).to_be_bytes());
            out.extend_from_slice(&VXLAN_PORT.to_be_bytes());
            out.extend_from_slice(&udp_len.to_be_bytes());
            out.extend_from_slice(&0u16.to_be_bytes());
            out.extend_from_slice(&[VXLAN_FLAG_VNI, 0, 0, 0]);
            out.extend_from_slice(&(vni.get() << 8).to_be_bytes());
        }
        TunnelKind::Gre { key } => {
            let flags = if key.is_some() { GRE_FLAG_KEY } else { 0 };
            out.extend_from_slice(&flags.to_be_bytes());
            out.extend_from_slice(&GRE_PROTO_TEB.to_be_bytes());
            if let Some(k) = key {
                out.extend_from_slice(&k.to_be_bytes());
            }
        }
    }
    out.extend_from_slice(&inner_bytes);
    out
}

/// Strips VXLAN or GRE outer headers. The inner packet is stamped with
/// `arrival_us`, the time the frame reached the decapsulating endpoint.
pub fn decapsulate(bytes: &[u8], arrival_us: u64) -> Result<Decapsulated, TunnelError> {
    let outer_pkt = parse_packet(bytes, arrival_us, bytes.len())?;
    let Some(ip) = &outer_pkt.ipv4 else {
        return Err(TunnelError::NotTunneled);
    };
    let outer = OuterHeaders {
        src_mac: outer_pkt.eth.src,
        dst_mac: outer_pkt.eth.dst,
        src_ip: ip.src,
        dst_ip: ip.dst,
    };
    let body = &outer_pkt.payload;
    let (kind, inner_bytes) = match (ip.protocol, outer_pkt.udp()) {
        (IPPROTO_UDP, Some(udp)) if udp.dst_port == VXLAN_PORT => {
            if body.len() < VXLAN_HEADER_LEN {
                return Err(TunnelError::MalformedTunnelHeader(format!("VXLAN header needs 8 bytes, {} present", body.len())));
            }
            if body[0] & VXLAN_FLAG_VNI == 0 {
                return Err(TunnelError::MalformedTunnelHeader(format!("VXLAN flags {:#04x} lack the VNI flag", body[0])));
            }
            let vni = u32::from_be_bytes([0, body[4], body[5], body[6]]);
            (TunnelKind::Vxlan { vni: Vni(vni) }, &body[VXLAN_HEADER_LEN..])
        }
        (IPPROTO_GRE, _) => {
            if body.len() < GRE_BASE_HEADER_LEN {
                return Err(TunnelError::MalformedTunnelHeader(format!("GRE header needs 4 bytes, {} present", body.len())));
            }
            let flags = u16::from_be_bytes([body[0], body[1]]);
            if flags & 0x0007 != 0 {
                return Err(TunnelError::MalformedTunnelHeader(format!("GRE version {}", flags & 0x0007)));
            }
            let proto = u16::from_be_bytes([body[2], body[3]]);
            if proto != GRE_PROTO_TEB {
                return Err(TunnelError::MalformedTunnelHeader(format!("GRE protocol type {proto:#06x} is not Ethernet bridging")));
            }
            let mut at = GRE_BASE_HEADER_LEN;
            if flags & GRE_FLAG_CHECKSUM != 0 {
                at += 4;
            }
            let mut key = None;
            if flags & GRE_FLAG_KEY != 0 {
                if body.len() < at + 4 {
                    return Err(TunnelError::MalformedTunnelHeader("GRE key missing".into()));
                }
                key = Some(u32::from_be_bytes(body[at..at + 4].try_into().unwrap()));
                at += 4;
            }
            if flags & GRE_FLAG_SEQ != 0 {
                at += 4;
            }
            if body.len() < at {
                return Err(TunnelError::MalformedTunnelHeader("GRE optional fields truncated".into()));
            }
            (TunnelKind::Gre { key }, &body[at..])
        }
        _ => return Err(TunnelError::NotTunneled),
    };
    let inner = parse_packet(inner_bytes, arrival_us, inner_bytes.len())?;
    Ok(Decapsulated { kind, outer, inner })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::packet::{build_tcp_frame, FiveTuple, TcpFlags, IPPROTO_TCP};

    fn inner(payload: &[u8]) -> CapturedPacket {
        let flow = FiveTuple {
            protocol: IPPROTO_TCP,
            src_ip: Ipv4Addr::new(10, 0, 0, 1),
            dst_ip: Ipv4Addr::new(10, 0, 0, 2),
            src_port: 50000,
            dst_port: 8080,
        };
        build_tcp_frame(42, MacAddr([2; 6]), MacAddr([4; 6]), &flow, 1, 1, TcpFlags::ACK | TcpFlags::PSH, 3, payload)
    }

    fn spec(kind: TunnelKind) -> TunnelSpec {
        TunnelSpec {
            id: "t0".into(),
            kind,
            outer: OuterHeaders {
                src_mac: MacAddr([0xa; 6]),
                dst_mac: MacAddr([0xb; 6]),
                src_ip: Ipv4Addr::new(192, 168, 0, 1),
                dst_ip: Ipv4Addr::new(192, 168, 0, 9),
            },
        }
    }

    #[test]
    fn layout_lengths() {
        // Sum of the header layout, independent of the constants above.
        let p = inner(&[]);
        assert_eq!(encapsulate(&spec(TunnelKind::Vxlan { vni: Vni::new(7).unwrap() }), &p).len(), 54 + 14 + 20 + 8 + 8);
        assert_eq!(encapsulate(&spec(TunnelKind::Gre { key: None }), &p).len(), 54 + 14 + 20 + 4);
        assert_eq!(encapsulate(&spec(TunnelKind::Gre { key: Some(1) }), &p).len(), 54 + 14 + 20 + 4 + 4);
    }

    #[test]
    fn vxlan_outer_fields() {
        let p = inner(b"GET / HTTP/1.1\r\n\r\n");
        let bytes = encapsulate(&spec(TunnelKind::Vxlan { vni: Vni::new(0xabcdef).unwrap() }), &p);
        let outer = parse_packet(&bytes, 0, bytes.len()).unwrap();
        let ip = outer.ipv4.as_ref().unwrap();
        assert_eq!(ip.ttl, 64);
        assert_eq!(ip.flags_fragment, 0x4000);
        assert_eq!(ip.total_length as usize, bytes.len() - 14);
        assert_eq!(crate::packet::internet_checksum(&bytes[14..34], 0), 0);
        let udp = outer.udp().unwrap();
        assert_eq!(udp.dst_port, 4789);
        assert!(udp.src_port >= 49152);
        assert_eq!(udp.checksum, 0);
        assert_eq!(udp.length as usize, bytes.len() - 34);
        assert_eq!(&outer.payload[..8], &[0x08, 0, 0, 0, 0xab, 0xcd, 0xef, 0]);
    }

    #[test]
    fn source_port_is_direction_independent() {
        let p = inner(&[]);
        let mut q = p.clone();
        if let crate::packet::Transport::Tcp(t) = &mut q.transport {
            std::mem::swap(&mut t.src_port, &mut t.dst_port);
        }
        let ip = q.ipv4.as_mut().unwrap();
        std::mem::swap(&mut ip.src, &mut ip.dst);
        assert_eq!(vxlan_source_port(&p), vxlan_source_port(&q));
    }

    #[test]
    fn zero_vni_zero_macs_round_trip() {
        let mut s = spec(TunnelKind::Vxlan { vni: Vni::new(0).unwrap() });
        s.outer.src_mac = MacAddr::ZERO;
        s.outer.dst_mac = MacAddr::ZERO;
        let p = inner(b"payload");
        let d = decapsulate(&encapsulate(&s, &p), 99).unwrap();
        assert_eq!(serialize_packet(&d.inner), serialize_packet(&p));
        assert_eq!(d.inner.timestamp_us, 99);
        assert_eq!(d.kind, s.kind);
        assert_eq!(d.outer, s.outer);
    }

    #[test]
    fn gre_key_round_trip() {
        let s = spec(TunnelKind::Gre { key: Some(0xdead_beef) });
        let d = decapsulate(&encapsulate(&s, &inner(b"x")), 0).unwrap();
        assert_eq!(d.kind, TunnelKind::Gre { key: Some(0xdead_beef) });
    }

    #[test]
    fn vxlan_without_i_flag_is_malformed() {
        let mut bytes = encapsulate(&spec(TunnelKind::Vxlan { vni: Vni::new(1).unwrap() }), &inner(&[]));
        bytes[42] = 0x00;
        assert!(matches!(decapsulate(&bytes, 0), Err(TunnelError::MalformedTunnelHeader(_))));
    }

    #[test]
    fn short_gre_is_malformed() {
        let bytes = encapsulate(&spec(TunnelKind::Gre { key: None }), &inner(&[]));
        // Keep only 2 GRE bytes and fix up the IPv4 total length.
        let mut cut = bytes[..36].to_vec();
        cut[16..18].copy_from_slice(&22u16.to_be_bytes());
        assert!(matches!(decapsulate(&cut, 0), Err(TunnelError::MalformedTunnelHeader(_))));
    }

    #[test]
    fn plain_tcp_is_not_tunneled() {
        let bytes = serialize_packet(&inner(b"hi"));
        assert_eq!(decapsulate(&bytes, 0), Err(TunnelError::NotTunneled));
    }

    #[test]
    fn vni_bounds() {
        assert!(Vni::new(Vni::MAX).is_ok());
        assert_eq!(Vni::new(1 << 24), Err(TunnelError::InvalidVni(1 << 24)));
    }
    proptest::proptest! {
        #[test]
        fn round_trip_any_payload(
            payload in proptest::collection::vec(proptest::prelude::any::<u8>(), 0..1500),
            vni in 0u32..=Vni::MAX,
            key in proptest::option::of(proptest::prelude::any::<u32>()),
            vxlan in proptest::prelude::any::<bool>(),
        ) {
            let p = inner(&payload);
            let kind = if vxlan { TunnelKind::Vxlan { vni: Vni::new(vni).unwrap() } } else { TunnelKind::Gre { key } };
            let frame = encapsulate(&spec(kind), &p);
            proptest::prop_assert_eq!(frame.len(), serialize_packet(&p).len() + kind.overhead());
            let d = decapsulate(&frame, p.timestamp_us).unwrap();
            proptest::prop_assert_eq!(d.inner, p);
            proptest::prop_assert_eq!(d.kind, kind);
        }
    }
}
