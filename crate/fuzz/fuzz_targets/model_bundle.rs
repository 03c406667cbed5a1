#![no_main]

use libfuzzer_sys::fuzz_target;
use tss_koopman::io::{decode_model, encode_model};

fuzz_target!(|data: &[u8]| {
    if let Ok((model, seed)) = decode_model(data) {
        let bytes = encode_model(&model, seed);
        let (again, _) = decode_model(&bytes).expect("re-encoded model must decode");
        assert_eq!(again, model);
    }
});
