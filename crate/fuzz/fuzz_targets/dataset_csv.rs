#![no_main]

use libfuzzer_sys::fuzz_target;
use tss_koopman::io::{dataset_from_csv, dataset_to_csv, DatasetSidecar};

// Input layout: sidecar JSON, a NUL byte, then the CSV text.
fuzz_target!(|data: &[u8]| {
    let Some(split) = data.iter().position(|&b| b == 0) else { return };
    let (Ok(meta), Ok(csv)) = (std::str::from_utf8(&data[..split]), std::str::from_utf8(&data[split + 1..])) else {
        return;
    };
    let Ok(sidecar) = serde_json::from_str::<DatasetSidecar>(meta) else { return };
    if let Ok(dataset) = dataset_from_csv(csv, &sidecar) {
        let text = dataset_to_csv(&dataset).expect("parsed dataset must serialize");
        assert_eq!(dataset_from_csv(&text, &sidecar).expect("re-encoded dataset must parse"), dataset);
    }
});
