#![no_main]
use libfuzzer_sys::fuzz_target;
use sslvit::data::{decode_dataset, encode_dataset};

fuzz_target!(|data: &[u8]| {
    if let Ok(ds) = decode_dataset(data) {
        let again = decode_dataset(&encode_dataset(&ds)).expect("re-encoded dataset decodes");
        assert_eq!(again, ds);
    }
});
