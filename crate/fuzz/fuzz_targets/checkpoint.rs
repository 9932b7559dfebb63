#![no_main]
use libfuzzer_sys::fuzz_target;
use sslvit::vit::{decode_checkpoint, encode_checkpoint};

fuzz_target!(|data: &[u8]| {
    if let Ok(ckpt) = decode_checkpoint(data) {
        let again = decode_checkpoint(&encode_checkpoint(&ckpt)).expect("re-encoded checkpoint decodes");
        assert_eq!(again.params.config, ckpt.params.config);
    }
});
