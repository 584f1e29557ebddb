#![no_main]

use libfuzzer_sys::fuzz_target;
use netprint::forest::{decode_model, encode_model, fnv1a64};

fn check(bytes: &[u8]) {
    if let Ok(forest) = decode_model(bytes) {
        assert_eq!(encode_model(&forest), bytes);
    }
}

fuzz_target!(|data: &[u8]| {
    check(data);
    // Random input almost never carries a valid checksum; append one so the
    // body decoder gets exercised too.
    let mut sealed = data.to_vec();
    sealed.extend_from_slice(&fnv1a64(data).to_le_bytes());
    check(&sealed);
});
