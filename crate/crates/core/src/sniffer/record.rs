// SPDX-License-Identifier: Apache-2.0

//! Compact per-message record forwarded from the sniffer to a collector.
//!
//! Wire format, big-endian, one record per UDP datagram:
//!
//! ```text
//! 0      2   3    4     5            13     14       18       22       24       26          28
//! | 'AP' | v | kind | flags | ts_us (u64) | proto | src_ip | dst_ip | src_port | dst_port | status |
//! | method_len u8 | method bytes | url_len u8 | url bytes |
//! ```
//!
//! `kind` is 1 for requests and 2 for responses. Flag bit 0 marks a malformed
//! first line, bit 1 a URL cut to 255 bytes. A status of 0 means absent.

use std::net::Ipv4Addr;

use thiserror::Error;

use crate::analysis::{AnalysisEvent, MessageKind};
use crate::packet::FiveTuple;

pub const RECORD_MAGIC: u16 = 0x4150;
pub const RECORD_VERSION: u8 = 0x01;
pub const RECORD_FIXED_LEN: usize = 28;
pub const MAX_FIELD_LEN: usize = 255;

const FLAG_MALFORMED: u8 = 0x01;
const FLAG_URL_TRUNCATED: u8 = 0x02;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("malformed record: {0}")]
pub struct MalformedRecord(pub String);

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ExtractedRecord {
    pub flow: FiveTuple,
    pub kind: MessageKind,
    pub timestamp_us: u64,
    pub method: Option<String>,
    pub url: Option<String>,
    pub status_code: Option<u16>,
    /// The first line could not be parsed.
    pub malformed: bool,
    pub url_truncated: bool,
}

impl ExtractedRecord {
    pub fn to_event(&self) -> AnalysisEvent {
        AnalysisEvent {
            flow: self.flow,
            kind: self.kind,
            timestamp_us: self.timestamp_us,
            url: self.url.clone(),
            status_code: self.status_code,
        }
    }
}

fn clip(s: &str, max: usize) -> (&str, bool) {
    if s.len() <= max {
        return (s, false);
    }
    let mut end = max;
    while !s.is_char_boundary(end) {
        end -= 1;
    }
    (&s[..end], true)
}

pub fn encode_record(r: &ExtractedRecord) -> Vec<u8> {
    let (method, _) = clip(r.method.as_deref().unwrap_or(""), MAX_FIELD_LEN);
    let (url, cut) = clip(r.url.as_deref().unwrap_or(""), MAX_FIELD_LEN);
    let mut flags = 0;
    if r.malformed {
        flags |= FLAG_MALFORMED;
    }
    if r.url_truncated || cut {
        flags |= FLAG_URL_TRUNCATED;
    }
    let mut out = Vec::with_capacity(RECORD_FIXED_LEN + 2 + method.len() + url.len());
    out.extend_from_slice(&RECORD_MAGIC.to_be_bytes());
    out.push(RECORD_VERSION);
    out.push(match r.kind {
        MessageKind::Request => 1,
        MessageKind::Response => 2,
    });
    out.push(flags);
    out.extend_from_slice(&r.timestamp_us.to_be_bytes());
    out.push(r.flow.protocol);
    out.extend_from_slice(&r.flow.src_ip.octets());
    out.extend_from_slice(&r.flow.dst_ip.octets());
    out.extend_from_slice(&r.flow.src_port.to_be_bytes());
    out.extend_from_slice(&r.flow.dst_port.to_be_bytes());
    out.extend_from_slice(&r.status_code.unwrap_or(0).to_be_bytes());
    out.push(method.len() as u8);
    out.extend_from_slice(method.as_bytes());
    out.push(url.len() as u8);
    out.extend_from_slice(url.as_bytes());
    out
}

pub fn decode_record(b: &[u8]) -> Result<ExtractedRecord, MalformedRecord> {
    let bad = |m: &str| MalformedRecord(m.to_string());
    if b.len() < RECORD_FIXED_LEN + 2 {
        return Err(MalformedRecord(format!("{} bytes is shorter than the fixed header", b.len())));
    }
    if u16::from_be_bytes([b[0], b[1]]) != RECORD_MAGIC {
        return Err(bad("bad magic"));
    }
    if b[2] != RECORD_VERSION {
        return Err(MalformedRecord(format!("unsupported version {}", b[2])));
    }
    let kind = match b[3] {
        1 => MessageKind::Request,
        2 => MessageKind::Response,
        k => return Err(MalformedRecord(format!("unknown kind {k}"))),
    };
    let flags = b[4];
    if flags & !(FLAG_MALFORMED | FLAG_URL_TRUNCATED) != 0 {
        return Err(MalformedRecord(format!("unknown flag bits {flags:#04x}")));
    }
    let u32_at = |at: usize| u32::from_be_bytes(b[at..at + 4].try_into().unwrap());
    let u16_at = |at: usize| u16::from_be_bytes([b[at], b[at + 1]]);
    let flow = FiveTuple {
        protocol: b[13],
        src_ip: Ipv4Addr::from(u32_at(14)),
        dst_ip: Ipv4Addr::from(u32_at(18)),
        src_port: u16_at(22),
        dst_port: u16_at(24),
    };
    let status = u16_at(26);
    let mlen = b[28] as usize;
    let url_len_at = 29 + mlen;
    if b.len() < url_len_at + 1 {
        return Err(bad("method length exceeds datagram"));
    }
    let ulen = b[url_len_at] as usize;
    if b.len() != url_len_at + 1 + ulen {
        return Err(MalformedRecord(format!("length mismatch: {} bytes, fields need {}", b.len(), url_len_at + 1 + ulen)));
    }
    let text = |bytes: &[u8]| -> Result<Option<String>, MalformedRecord> {
        if bytes.is_empty() {
            return Ok(None);
        }
        String::from_utf8(bytes.to_vec()).map(Some).map_err(|_| bad("field is not UTF-8"))
    };
    let method = text(&b[29..url_len_at])?;
    let url = text(&b[url_len_at + 1..])?;
    match kind {
        MessageKind::Request if status != 0 => return Err(bad("request carries a status code")),
        MessageKind::Response if method.is_some() || url.is_some() => return Err(bad("response carries method or URL")),
        _ => {}
    }
    Ok(ExtractedRecord {
        flow,
        kind,
        timestamp_us: u64::from_be_bytes(b[5..13].try_into().unwrap()),
        method,
        url,
        status_code: (status != 0).then_some(status),
        malformed: flags & FLAG_MALFORMED != 0,
        url_truncated: flags & FLAG_URL_TRUNCATED != 0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::packet::IPPROTO_TCP;
    use proptest::prelude::*;

    fn get_record() -> ExtractedRecord {
        ExtractedRecord {
            flow: FiveTuple {
                protocol: IPPROTO_TCP,
                src_ip: Ipv4Addr::new(10, 0, 0, 1),
                dst_ip: Ipv4Addr::new(10, 0, 0, 2),
                src_port: 50000,
                dst_port: 8080,
            },
            kind: MessageKind::Request,
            timestamp_us: 100,
            method: Some("GET".into()),
            url: Some("/db?k=1".into()),
            status_code: None,
            malformed: false,
            url_truncated: false,
        }
    }

    #[test]
    fn get_round_trip() {
        let r = get_record();
        let bytes = encode_record(&r);
        assert_eq!(&bytes[..5], &[0x41, 0x50, 0x01, 0x01, 0x00]);
        assert_eq!(bytes.len(), RECORD_FIXED_LEN + 1 + 3 + 1 + 7);
        assert_eq!(decode_record(&bytes).unwrap(), r);
    }

    #[test]
    fn long_url_is_truncated() {
        let mut r = get_record();
        r.url = Some(format!("/{}", "u".repeat(1023)));
        let d = decode_record(&encode_record(&r)).unwrap();
        assert_eq!(d.url.as_ref().unwrap().len(), 255);
        assert!(d.url_truncated);
        assert!(r.url.unwrap().starts_with(d.url.as_deref().unwrap()));
    }

    #[test]
    fn multibyte_url_cut_on_char_boundary() {
        let mut r = get_record();
        r.url = Some("é".repeat(200));
        let d = decode_record(&encode_record(&r)).unwrap();
        assert_eq!(d.url.unwrap().len(), 254);
    }

    #[test]
    fn rejects_bad_input() {
        let good = encode_record(&get_record());
        let mut b = good.clone();
        b[0] = 0;
        assert!(decode_record(&b).is_err());
        let mut b = good.clone();
        b[2] = 2;
        assert!(decode_record(&b).is_err());
        let mut b = good.clone();
        b[3] = 9;
        assert!(decode_record(&b).is_err());
        assert!(decode_record(&good[..good.len() - 1]).is_err());
        let mut b = good.clone();
        b.push(0);
        assert!(decode_record(&b).is_err());
        let mut b = good.clone();
        b[27] = 200; // request with a status
        assert!(decode_record(&b).is_err());
        assert!(decode_record(&[]).is_err());
    }

    fn arb_record() -> impl Strategy<Value = ExtractedRecord> {
        (
            any::<(u8, u32, u32, u16, u16, u64)>(),
            any::<bool>(),
            any::<bool>(),
            "[A-Z]{1,10}",
            "/[ -~]{0,254}",
            100u16..1000,
        )
            .prop_map(|((proto, s, d, sp, dp, ts), is_req, malformed, method, url, status)| ExtractedRecord {
                flow: FiveTuple {
                    protocol: proto,
                    src_ip: s.into(),
                    dst_ip: d.into(),
                    src_port: sp,
                    dst_port: dp,
                },
                kind: if is_req { MessageKind::Request } else { MessageKind::Response },
                timestamp_us: ts,
                method: (is_req && !malformed).then_some(method),
                url: (is_req && !malformed).then_some(url),
                status_code: (!is_req && !malformed).then_some(status),
                malformed,
                url_truncated: false,
            })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(2000))]
        #[test]
        fn valid_records_round_trip(r in arb_record()) {
            prop_assert_eq!(decode_record(&encode_record(&r)).unwrap(), r);
        }

        #[test]
        fn decoder_never_panics(bytes in proptest::collection::vec(any::<u8>(), 0..300)) {
            let _ = decode_record(&bytes);
        }
    }
}
