#![no_main]

use libfuzzer_sys::fuzz_target;
use tss_koopman::lifting::LiftingMap;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(map) = LiftingMap::from_json(text) {
        let again = LiftingMap::from_json(&map.to_json()).expect("re-encoded weights must decode");
        assert_eq!(again, map);
    }
});
