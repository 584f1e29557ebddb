#![no_main]

use libfuzzer_sys::fuzz_target;
use netprint::dataset::CategoryMap;

fuzz_target!(|data: &[u8]| {
    let _ = CategoryMap::from_reader(data);
});
