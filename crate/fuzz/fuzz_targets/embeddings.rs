#![no_main]
use libfuzzer_sys::fuzz_target;
use sslvit::data::{decode_embeddings, encode_embeddings};

fuzz_target!(|data: &[u8]| {
    if let Ok(store) = decode_embeddings(data) {
        // the layout has no slack, so anything accepted re-encodes verbatim
        assert_eq!(encode_embeddings(&store), data);
    }
});
