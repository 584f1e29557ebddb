#![no_main]

use libfuzzer_sys::fuzz_target;
use netprint::ingest::read_pcap;

fuzz_target!(|data: &[u8]| {
    if let Ok(capture) = read_pcap(data, None) {
        assert!(capture.stats.is_consistent());
        assert_eq!(capture.records.len() as u64, capture.stats.packets_kept);
        assert!(capture.records.iter().all(|r| r.is_valid()));
    }
});
