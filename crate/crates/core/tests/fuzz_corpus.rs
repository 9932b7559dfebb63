//! Replays the checked-in fuzz corpus through the decoders with round-trip
//! checks, so decoder regressions show up without a fuzzing toolchain.

use std::fs;
use std::path::{Path, PathBuf};

use sslvit::config::RunConfig;
use sslvit::data::{decode_dataset, decode_embeddings, encode_dataset, encode_embeddings};
use sslvit::tensor::{decode_tensor, encode_tensor};
use sslvit::vit::{decode_checkpoint, encode_checkpoint};

fn corpus(target: &str) -> Vec<(PathBuf, Vec<u8>)> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus").join(target);
    let mut files: Vec<_> = fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| e.unwrap().path())
        .collect();
    files.sort();
    assert!(!files.is_empty(), "empty corpus for {target}");
    files.into_iter().map(|p| (p.clone(), fs::read(p).unwrap())).collect()
}

/// Every target sees at least one accepted and one rejected input.
fn check(target: &str, mut accept: impl FnMut(&[u8]) -> bool) {
    let (mut ok, mut rejected) = (0, 0);
    for (_, bytes) in corpus(target) {
        if accept(&bytes) {
            ok += 1;
        } else {
            rejected += 1;
        }
    }
    assert!(ok > 0 && rejected > 0, "{target}: {ok} accepted, {rejected} rejected");
}

#[test]
fn embeddings_corpus() {
    check("embeddings", |data| match decode_embeddings(data) {
        Ok(store) => {
            assert_eq!(encode_embeddings(&store), data);
            true
        }
        Err(_) => false,
    });
}

#[test]
fn dataset_corpus() {
    check("dataset", |data| match decode_dataset(data) {
        Ok(ds) => {
            assert_eq!(decode_dataset(&encode_dataset(&ds)).unwrap(), ds);
            true
        }
        Err(_) => false,
    });
}

#[test]
fn checkpoint_corpus() {
    check("checkpoint", |data| match decode_checkpoint(data) {
        Ok(ckpt) => {
            assert_eq!(encode_checkpoint(&ckpt), data);
            true
        }
        Err(_) => false,
    });
}

#[test]
fn tensor_corpus() {
    check("tensor", |data| match decode_tensor(data) {
        Ok((t, used)) => {
            let mut out = Vec::new();
            encode_tensor(&t, &mut out);
            assert_eq!(out, &data[..used]);
            true
        }
        Err(_) => false,
    });
}

#[test]
fn run_config_corpus() {
    check("run_config", |data| {
        let Ok(text) = std::str::from_utf8(data) else {
            return false;
        };
        match RunConfig::from_json(text) {
            Ok(cfg) => {
                let json = serde_json::to_string(&cfg).unwrap();
                assert_eq!(RunConfig::from_json(&json).unwrap(), cfg);
                true
            }
            Err(_) => false,
        }
    });
}
