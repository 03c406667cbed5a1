#![no_main]

use libfuzzer_sys::fuzz_target;
use tss_koopman::io::{decode_policy, encode_policy};

fuzz_target!(|data: &[u8]| {
    if let Ok(file) = decode_policy(data) {
        let again = decode_policy(&encode_policy(&file)).expect("re-encoded policy must decode");
        assert_eq!(again, file);
    }
});
