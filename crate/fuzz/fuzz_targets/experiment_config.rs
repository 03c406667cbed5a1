#![no_main]

use libfuzzer_sys::fuzz_target;
use tss_koopman::experiments::ExperimentConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cfg) = ExperimentConfig::from_toml_str(text) {
        let again = ExperimentConfig::from_toml_str(&cfg.to_toml_string()).expect("re-encoded config must parse");
        assert_eq!(again.hash_hex(), cfg.hash_hex());
    }
});
