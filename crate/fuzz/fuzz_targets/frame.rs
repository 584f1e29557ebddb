#![no_main]

use libfuzzer_sys::fuzz_target;
use netprint::ingest::{dissect_frame, FrameVerdict};

fuzz_target!(|data: &[u8]| {
    if let FrameVerdict::Tcp {
        ip_total_length, ..
    } = dissect_frame(data)
    {
        assert!(ip_total_length >= 40);
    }
});
