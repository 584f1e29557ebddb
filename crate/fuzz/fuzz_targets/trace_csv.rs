#![no_main]

use libfuzzer_sys::fuzz_target;
use netprint::ingest::read_trace_csv;

fuzz_target!(|data: &[u8]| {
    if let Ok(capture) = read_trace_csv(data) {
        assert!(capture.stats.is_consistent());
        assert!(capture.records.iter().all(|r| r.is_valid()));
    }
});
