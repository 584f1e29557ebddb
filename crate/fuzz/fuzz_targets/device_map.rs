#![no_main]

use libfuzzer_sys::fuzz_target;
use netprint::device_map::DeviceMap;

fuzz_target!(|data: &[u8]| {
    if let Ok(map) = DeviceMap::from_reader(data) {
        assert!(map.entries.values().all(|e| !e.label.is_empty()));
        let _ = map.category_map();
    }
});
