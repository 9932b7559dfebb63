#![no_main]
use libfuzzer_sys::fuzz_target;
use sslvit::tensor::{decode_tensor, encode_tensor};

fuzz_target!(|data: &[u8]| {
    if let Ok((t, used)) = decode_tensor(data) {
        let mut out = Vec::new();
        encode_tensor(&t, &mut out);
        assert_eq!(out.len(), used);
        // NaN payloads survive bit-for-bit, so compare bytes
        assert_eq!(out, &data[..used]);
    }
});
