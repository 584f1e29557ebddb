//! Capture ingestion: classic pcap files and dissector-exported trace CSVs
//! become an ordered stream of device-originated TCP/IPv4 [`PacketRecord`]s.

use std::collections::HashSet;
use std::fs::File;
use std::io::{self, BufReader};
use std::path::Path;

use thiserror::Error;

use crate::mac::MacAddress;

mod pcap;
mod trace_csv;

pub use pcap::{dissect_frame, read_pcap, FrameVerdict};
pub use trace_csv::{read_trace_csv, TRACE_COLUMNS};

/// Smallest legal IPv4 total length for a TCP segment (20 + 20 header bytes).
pub const MIN_TCP_IPV4_LEN: u16 = 40;

/// One dissected TCP-over-IPv4 packet.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PacketRecord {
    /// Seconds since the Unix epoch, fractional part included.
    pub timestamp: f64,
    pub src_mac: MacAddress,
    /// IPv4 Total Length field.
    pub ip_total_length: u16,
    /// Raw 16-bit TCP window field (no window scaling applied).
    pub tcp_window: u16,
}

impl PacketRecord {
    pub fn is_valid(&self) -> bool {
        self.timestamp.is_finite()
            && self.timestamp >= 0.0
            && self.ip_total_length >= MIN_TCP_IPV4_LEN
    }
}

/// Per-input accounting. `packets_seen` always equals kept + skipped + malformed.
///
/// `packets_filtered_out` is a subset of `packets_kept`: valid records whose
/// source MAC was not in the requested set, so they were not emitted.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CaptureStats {
    pub packets_seen: u64,
    pub packets_kept: u64,
    pub packets_skipped_non_tcp_ipv4: u64,
    pub packets_skipped_malformed: u64,
    pub packets_filtered_out: u64,
}

impl CaptureStats {
    pub fn is_consistent(&self) -> bool {
        self.packets_seen
            == self.packets_kept
                + self.packets_skipped_non_tcp_ipv4
                + self.packets_skipped_malformed
            && self.packets_filtered_out <= self.packets_kept
    }

    pub fn merge(&mut self, other: &CaptureStats) {
        self.packets_seen += other.packets_seen;
        self.packets_kept += other.packets_kept;
        self.packets_skipped_non_tcp_ipv4 += other.packets_skipped_non_tcp_ipv4;
        self.packets_skipped_malformed += other.packets_skipped_malformed;
        self.packets_filtered_out += other.packets_filtered_out;
    }
}

/// Records in input order plus the accounting for that input.
#[derive(Debug, Clone, Default)]
pub struct Capture {
    pub records: Vec<PacketRecord>,
    pub stats: CaptureStats,
}

#[derive(Debug, Error)]
pub enum IngestError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("not a pcap file (magic {0:#010x})")]
    BadMagic(u32),
    #[error("pcap global header is truncated")]
    TruncatedGlobalHeader,
    #[error("unsupported pcap link type {0} (only Ethernet, type 1, is supported)")]
    UnsupportedLinkType(u32),
    #[error("trace CSV has no header row")]
    MissingHeader,
    #[error("trace CSV header lacks required column `{0}`")]
    MissingColumn(&'static str),
    #[error("trace CSV: {0}")]
    Csv(#[from] csv::Error),
}

/// Reads a classic pcap file. When `keep_macs` is given, only frames sent
/// from one of those addresses are emitted.
pub fn ingest_pcap(
    path: impl AsRef<Path>,
    keep_macs: Option<&HashSet<MacAddress>>,
) -> Result<Capture, IngestError> {
    let file = File::open(path)?;
    read_pcap(BufReader::new(file), keep_macs)
}

/// Reads a trace CSV with columns `frame.time_epoch, eth.src, ip.len, tcp.window_size`.
pub fn ingest_trace_csv(path: impl AsRef<Path>) -> Result<Capture, IngestError> {
    let file = File::open(path)?;
    read_trace_csv(BufReader::new(file))
}

/// Order-preserving subsequence of `records` sent from `mac`.
pub fn filter_by_mac(records: &[PacketRecord], mac: MacAddress) -> Vec<PacketRecord> {
    records
        .iter()
        .filter(|r| r.src_mac == mac)
        .copied()
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rec(ts: f64, mac: u8) -> PacketRecord {
        PacketRecord {
            timestamp: ts,
            src_mac: MacAddress([0, 0, 0, 0, 0, mac]),
            ip_total_length: 40 + mac as u16,
            tcp_window: 100,
        }
    }

    #[test]
    fn filter_absent_mac_is_empty() {
        let stream: Vec<_> = (0..7).map(|i| rec(i as f64, 1)).collect();
        assert!(filter_by_mac(&stream, MacAddress([9; 6])).is_empty());
        assert!(filter_by_mac(&[], MacAddress([9; 6])).is_empty());
    }

    #[test]
    fn filter_keeps_matches_in_order() {
        let macs = [1u8, 2, 1, 1, 2, 1, 1];
        let stream: Vec<_> = macs
            .iter()
            .enumerate()
            .map(|(i, &m)| rec(i as f64, m))
            .collect();
        let got = filter_by_mac(&stream, MacAddress([0, 0, 0, 0, 0, 1]));
        assert_eq!(got.len(), 5);
        let ts: Vec<f64> = got.iter().map(|r| r.timestamp).collect();
        assert_eq!(ts, vec![0.0, 2.0, 3.0, 5.0, 6.0]);
    }

    #[test]
    fn filter_interleaved_two_devices() {
        // A,B,A,A,B -> A,A,A with timestamps preserved
        let stream = vec![
            rec(1.0, 0xa),
            rec(2.0, 0xb),
            rec(3.0, 0xa),
            rec(4.0, 0xa),
            rec(5.0, 0xb),
        ];
        let oracle: Vec<PacketRecord> = {
            let mut out = Vec::new();
            for r in &stream {
                if r.src_mac.0[5] == 0xa {
                    out.push(*r);
                }
            }
            out
        };
        assert_eq!(
            filter_by_mac(&stream, MacAddress([0, 0, 0, 0, 0, 0xa])),
            oracle
        );
    }

    proptest! {
        #[test]
        fn per_mac_filters_remerge_to_the_stream(macs in proptest::collection::vec(0u8..4, 0..60)) {
            let stream: Vec<_> = macs.iter().enumerate().map(|(i, &m)| rec(i as f64, m)).collect();
            let mut distinct: Vec<u8> = macs.clone();
            distinct.sort_unstable();
            distinct.dedup();
            // timestamp doubles as the original index
            let mut merged: Vec<PacketRecord> = distinct
                .iter()
                .flat_map(|&m| filter_by_mac(&stream, MacAddress([0, 0, 0, 0, 0, m])))
                .collect();
            merged.sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp));
            prop_assert_eq!(merged, stream);
        }
    }
}
