#![no_main]

use libfuzzer_sys::fuzz_target;
use netprint::dataset::{read_instances_from, write_instances_to};

fuzz_target!(|data: &[u8]| {
    let Ok(ds) = read_instances_from(data) else {
        return;
    };
    let mut out = Vec::new();
    write_instances_to(&ds, &mut out).unwrap();
    assert_eq!(read_instances_from(out.as_slice()).unwrap(), ds);
});
