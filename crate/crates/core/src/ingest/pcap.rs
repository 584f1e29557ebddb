//! Classic libpcap container (not pcapng), Ethernet link type only.

use std::collections::HashSet;
use std::io::{self, Read};

use super::{Capture, IngestError, PacketRecord, MIN_TCP_IPV4_LEN};
use crate::mac::MacAddress;

const MAGIC_MICROS: u32 = 0xa1b2_c3d4;
const MAGIC_NANOS: u32 = 0xa1b2_3c4d;
const LINKTYPE_ETHERNET: u32 = 1;

const ETHERTYPE_IPV4: u16 = 0x0800;
const ETHERTYPE_VLAN: u16 = 0x8100;
const ETHERTYPE_QINQ: u16 = 0x88a8;
const IPPROTO_TCP: u8 = 6;

/// Frames larger than this are treated as corrupt record headers.
const MAX_FRAME_LEN: u32 = 256 * 1024;

#[derive(Debug, Clone, Copy)]
struct Format {
    big_endian: bool,
    nanos: bool,
}

impl Format {
    fn u32(&self, b: &[u8]) -> u32 {
        let arr = [b[0], b[1], b[2], b[3]];
        if self.big_endian {
            u32::from_be_bytes(arr)
        } else {
            u32::from_le_bytes(arr)
        }
    }
}

/// Outcome of dissecting one link-layer frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FrameVerdict {
    Tcp {
        src_mac: MacAddress,
        ip_total_length: u16,
        tcp_window: u16,
    },
    NotTcpIpv4,
    Malformed,
}

fn be16(b: &[u8], at: usize) -> u16 {
    u16::from_be_bytes([b[at], b[at + 1]])
}

/// Dissects an Ethernet II frame down to the TCP window field.
///
/// One 802.1Q tag is unwrapped; stacked tags, non-IPv4 ethertypes, non-TCP
/// protocols and non-first IP fragments are `NotTcpIpv4`. Any header that
/// is shorter than it claims to be is `Malformed`.
pub fn dissect_frame(frame: &[u8]) -> FrameVerdict {
    if frame.len() < 14 {
        return FrameVerdict::Malformed;
    }
    let mut src = [0u8; 6];
    src.copy_from_slice(&frame[6..12]);
    let mut ethertype = be16(frame, 12);
    let mut offset = 14;
    if ethertype == ETHERTYPE_VLAN {
        if frame.len() < 18 {
            return FrameVerdict::Malformed;
        }
        ethertype = be16(frame, 16);
        offset = 18;
        if ethertype == ETHERTYPE_VLAN || ethertype == ETHERTYPE_QINQ {
            return FrameVerdict::NotTcpIpv4;
        }
    }
    if ethertype != ETHERTYPE_IPV4 {
        return FrameVerdict::NotTcpIpv4;
    }
    let ip = &frame[offset..];
    if ip.len() < 20 {
        return FrameVerdict::Malformed;
    }
    if ip[0] >> 4 != 4 {
        return FrameVerdict::Malformed;
    }
    let ihl = usize::from(ip[0] & 0x0f) * 4;
    if ihl < 20 {
        return FrameVerdict::Malformed;
    }
    if ip[9] != IPPROTO_TCP {
        return FrameVerdict::NotTcpIpv4;
    }
    if be16(ip, 6) & 0x1fff != 0 {
        return FrameVerdict::NotTcpIpv4;
    }
    let total_length = be16(ip, 2);
    if total_length < MIN_TCP_IPV4_LEN || usize::from(total_length) < ihl + 20 {
        return FrameVerdict::Malformed;
    }
    if ip.len() < ihl + 20 {
        return FrameVerdict::Malformed;
    }
    let tcp = &ip[ihl..];
    FrameVerdict::Tcp {
        src_mac: MacAddress(src),
        ip_total_length: total_length,
        tcp_window: be16(tcp, 14),
    }
}

/// Fills `buf` as far as the reader allows; returns the byte count read.
fn read_full<R: Read>(reader: &mut R, buf: &mut [u8]) -> io::Result<usize> {
    let mut filled = 0;
    while filled < buf.len() {
        match reader.read(&mut buf[filled..]) {
            Ok(0) => break,
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    Ok(filled)
}

fn read_global_header<R: Read>(reader: &mut R) -> Result<Format, IngestError> {
    let mut header = [0u8; 24];
    let n = read_full(reader, &mut header)?;
    if n < 4 {
        let mut magic = [0u8; 4];
        magic[..n].copy_from_slice(&header[..n]);
        return Err(IngestError::BadMagic(u32::from_le_bytes(magic)));
    }
    let magic = u32::from_le_bytes([header[0], header[1], header[2], header[3]]);
    let format = match magic {
        MAGIC_MICROS => Format {
            big_endian: false,
            nanos: false,
        },
        MAGIC_NANOS => Format {
            big_endian: false,
            nanos: true,
        },
        m if m == MAGIC_MICROS.swap_bytes() => Format {
            big_endian: true,
            nanos: false,
        },
        m if m == MAGIC_NANOS.swap_bytes() => Format {
            big_endian: true,
            nanos: true,
        },
        other => return Err(IngestError::BadMagic(other)),
    };
    if n < header.len() {
        return Err(IngestError::TruncatedGlobalHeader);
    }
    // upper bits of the link-type word carry FCS flags
    let linktype = format.u32(&header[20..24]) & 0xffff;
    if linktype != LINKTYPE_ETHERNET {
        return Err(IngestError::UnsupportedLinkType(linktype));
    }
    Ok(format)
}

/// Streams a classic pcap, emitting TCP/IPv4 records in file order.
///
/// A record whose header or body is cut short by end of file is counted as
/// malformed and ends the stream; oversized record headers are skipped.
pub fn read_pcap<R: Read>(
    mut reader: R,
    keep_macs: Option<&HashSet<MacAddress>>,
) -> Result<Capture, IngestError> {
    let format = read_global_header(&mut reader)?;
    let mut capture = Capture::default();
    let stats = &mut capture.stats;
    let mut frame = Vec::with_capacity(2048);
    let mut header = [0u8; 16];
    loop {
        let n = read_full(&mut reader, &mut header)?;
        if n == 0 {
            break;
        }
        stats.packets_seen += 1;
        if n < header.len() {
            stats.packets_skipped_malformed += 1;
            break;
        }
        let ts_sec = format.u32(&header[0..4]);
        let ts_frac = format.u32(&header[4..8]);
        let incl_len = format.u32(&header[8..12]);
        if incl_len > MAX_FRAME_LEN {
            stats.packets_skipped_malformed += 1;
            let skipped = io::copy(
                &mut reader.by_ref().take(u64::from(incl_len)),
                &mut io::sink(),
            )?;
            if skipped < u64::from(incl_len) {
                break;
            }
            continue;
        }
        frame.resize(incl_len as usize, 0);
        if read_full(&mut reader, &mut frame)? < frame.len() {
            stats.packets_skipped_malformed += 1;
            break;
        }
        match dissect_frame(&frame) {
            FrameVerdict::Tcp {
                src_mac,
                ip_total_length,
                tcp_window,
            } => {
                stats.packets_kept += 1;
                if keep_macs.is_some_and(|set| !set.contains(&src_mac)) {
                    stats.packets_filtered_out += 1;
                    continue;
                }
                let divisor = if format.nanos { 1e9 } else { 1e6 };
                capture.records.push(PacketRecord {
                    timestamp: f64::from(ts_sec) + f64::from(ts_frac) / divisor,
                    src_mac,
                    ip_total_length,
                    tcp_window,
                });
            }
            FrameVerdict::NotTcpIpv4 => stats.packets_skipped_non_tcp_ipv4 += 1,
            FrameVerdict::Malformed => stats.packets_skipped_malformed += 1,
        }
    }
    Ok(capture)
}
