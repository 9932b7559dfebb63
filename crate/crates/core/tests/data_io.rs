mod common;

use proptest::prelude::*;
use sslvit::data::{
    decode_dataset, decode_embeddings, encode_dataset, encode_embeddings, read_dataset, read_embeddings,
    split_classes, synth_dataset, synth_templates, write_dataset, write_embeddings, DataError, EmbeddingStore,
    Split, SynthConfig,
};

fn small_synth() -> SynthConfig {
    SynthConfig {
        num_classes: 3,
        per_class: 4,
        image_size: 6,
        channels: 2,
        ..SynthConfig::default()
    }
}

#[test]
fn embedding_files_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("e.ssle");
    let store = EmbeddingStore::from_rows(&[vec![0.25, -1.5, 3.0], vec![1e-3, 2.0, -7.0]], vec![4, 1]).unwrap();
    write_embeddings(&store, &path).unwrap();
    assert_eq!(read_embeddings(&path).unwrap(), store);

    let empty = EmbeddingStore::new(5, vec![], vec![]).unwrap();
    write_embeddings(&empty, &path).unwrap();
    let back = read_embeddings(&path).unwrap();
    assert!(back.is_empty());
    assert_eq!(back.dim(), 5);
}

#[test]
fn embedding_corruption_gives_distinct_errors() {
    let store = EmbeddingStore::from_rows(&[vec![1.0, 2.0]], vec![0]).unwrap();
    let bytes = encode_embeddings(&store);

    let mut bad = bytes.clone();
    bad[..4].copy_from_slice(b"XXXX");
    assert!(matches!(decode_embeddings(&bad), Err(DataError::BadMagic { .. })));

    let mut bad = bytes.clone();
    bad[4] = 2;
    assert!(matches!(decode_embeddings(&bad), Err(DataError::UnsupportedVersion(2))));

    for cut in 0..bytes.len() {
        assert!(
            matches!(decode_embeddings(&bytes[..cut]), Err(DataError::Truncated(_))),
            "prefix {cut}"
        );
    }
    let mut long = bytes.clone();
    long.push(0);
    assert!(matches!(decode_embeddings(&long), Err(DataError::TrailingBytes(1))));

    // a huge row count is rejected before anything is allocated
    let mut huge = bytes.clone();
    huge[8..16].copy_from_slice(&u64::MAX.to_le_bytes());
    assert!(decode_embeddings(&huge).is_err());
}

#[test]
fn dataset_files_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.ssld");
    let ds = synth_dataset(&small_synth(), 1).unwrap();
    write_dataset(&ds, &path).unwrap();
    assert_eq!(read_dataset(&path).unwrap(), ds);
    assert_eq!(std::fs::read(&path).unwrap(), encode_dataset(&ds));
}

#[test]
fn dataset_corruption_gives_typed_errors() {
    let ds = synth_dataset(&small_synth(), 2).unwrap();
    let bytes = encode_dataset(&ds);
    for cut in 0..bytes.len() {
        assert!(decode_dataset(&bytes[..cut]).is_err(), "prefix {cut}");
    }
    let mut bad = bytes.clone();
    bad[0] = b'Q';
    assert!(matches!(decode_dataset(&bad), Err(DataError::BadMagic { .. })));
    let mut long = bytes.clone();
    long.extend_from_slice(&[1, 2]);
    assert!(matches!(decode_dataset(&long), Err(DataError::TrailingBytes(2))));
    // a manifest that references a missing class is a manifest error
    let needle = b"\"class_id\":2";
    let at = bytes.windows(needle.len()).position(|w| w == needle).unwrap();
    let mut bad = bytes.clone();
    bad[at + needle.len() - 1] = b'9';
    assert!(matches!(decode_dataset(&bad), Err(DataError::Manifest(_))));
}

#[test]
fn noiseless_unshifted_samples_equal_their_template() {
    let cfg = SynthConfig {
        per_class: 1,
        noise_std: 0.0,
        max_shift: 0,
        ..small_synth()
    };
    let ds = synth_dataset(&cfg, 3).unwrap();
    let templates = synth_templates(&cfg, 3);
    for (i, t) in templates.iter().enumerate() {
        assert_eq!(ds.pixels(i), t.as_slice());
    }
}

fn sq_dist(a: &[u8], b: &[u8]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum()
}

#[test]
fn nearest_template_classification_is_easy() {
    let cfg = SynthConfig::default();
    assert_eq!((cfg.num_classes, cfg.per_class), (8, 50));
    let ds = synth_dataset(&cfg, 4).unwrap();
    let templates = synth_templates(&cfg, 4);
    let correct = (0..ds.len())
        .filter(|&i| {
            let best = (0..templates.len())
                .min_by(|&a, &b| sq_dist(ds.pixels(i), &templates[a]).total_cmp(&sq_dist(ds.pixels(i), &templates[b])))
                .unwrap();
            best as u32 == ds.samples()[i].class_id
        })
        .count();
    let acc = correct as f64 / ds.len() as f64;
    assert!(acc > 0.95, "accuracy {acc}");

    // same-class pairs are closer than cross-class pairs on average
    let (mut same, mut ns, mut cross, mut nc) = (0.0, 0, 0.0, 0);
    for i in (0..ds.len()).step_by(7) {
        for j in (i + 1..ds.len()).step_by(5) {
            let d = sq_dist(ds.pixels(i), ds.pixels(j));
            if ds.samples()[i].class_id == ds.samples()[j].class_id {
                same += d;
                ns += 1;
            } else {
                cross += d;
                nc += 1;
            }
        }
    }
    assert!(same / (ns as f64) < cross / (nc as f64));
}

#[test]
fn synthesis_is_deterministic() {
    let a = encode_dataset(&synth_dataset(&small_synth(), 9).unwrap());
    let b = encode_dataset(&synth_dataset(&small_synth(), 9).unwrap());
    let c = encode_dataset(&synth_dataset(&small_synth(), 10).unwrap());
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn fractional_split_counts() {
    let cfg = SynthConfig {
        num_classes: 100,
        per_class: 1,
        image_size: 2,
        channels: 1,
        ..SynthConfig::default()
    };
    let ds = synth_dataset(&cfg, 0).unwrap();
    let parts = split_classes(&ds, &Split::Fractions(vec![0.64, 0.16, 0.20])).unwrap();
    let counts: Vec<usize> = parts.iter().map(|p| p.classes().len()).collect();
    assert_eq!(counts, vec![64, 16, 20]);
    assert!(split_classes(&ds, &Split::Fractions(vec![0.5, 0.6])).is_err());
}

#[test]
fn explicit_lists() {
    let cfg = SynthConfig {
        num_classes: 2,
        ..small_synth()
    };
    let ds = synth_dataset(&cfg, 0).unwrap();
    let parts = split_classes(&ds, &Split::Lists(vec![vec![1], vec![0]])).unwrap();
    assert_eq!(parts[0].classes()[0].id, 1);
    assert!(parts[0].samples().iter().all(|s| s.class_id == 1));
    assert_eq!(parts[1].len(), cfg.per_class);
    let overlap = split_classes(&ds, &Split::Lists(vec![vec![0, 1], vec![1]]));
    assert!(matches!(overlap, Err(DataError::Split(_))));
    assert!(split_classes(&ds, &Split::Lists(vec![vec![0]])).is_err());
}

proptest! {
    #[test]
    fn embeddings_roundtrip_bit_exactly(
        dim in 1usize..6,
        rows in prop::collection::vec(prop::collection::vec(-1e6f64..1e6, 6), 0..12),
        label_seed in any::<u32>(),
    ) {
        let rows: Vec<Vec<f64>> = rows.into_iter().map(|r| r[..dim].to_vec()).collect();
        let labels = (0..rows.len() as u32).map(|i| i.wrapping_mul(label_seed)).collect();
        let store = EmbeddingStore::new(dim, rows.concat(), labels).unwrap();
        let bytes = encode_embeddings(&store);
        let back = decode_embeddings(&bytes).unwrap();
        prop_assert_eq!(&back, &store);
        prop_assert_eq!(encode_embeddings(&back), bytes);
    }

    #[test]
    fn decoders_never_panic(bytes in prop::collection::vec(any::<u8>(), 0..256)) {
        let _ = decode_embeddings(&bytes);
        let _ = decode_dataset(&bytes);
        let mut framed = b"SSLE\x01\0\0\0".to_vec();
        framed.extend_from_slice(&bytes);
        let _ = decode_embeddings(&framed);
        let mut framed = b"SSLD\x01\0\0\0".to_vec();
        framed.extend_from_slice(&bytes);
        let _ = decode_dataset(&framed);
    }

    #[test]
    fn splits_partition_the_samples(
        classes in 1usize..12,
        cuts in prop::collection::vec(1u32..10, 1..5),
        seed in any::<u64>(),
    ) {
        let cfg = SynthConfig { num_classes: classes, per_class: 2, image_size: 2, channels: 1, ..SynthConfig::default() };
        let ds = synth_dataset(&cfg, seed).unwrap();
        let total: u32 = cuts.iter().sum();
        let fr: Vec<f64> = cuts.iter().map(|&c| c as f64 / total as f64).collect();
        let parts = split_classes(&ds, &Split::Fractions(fr)).unwrap();
        let mut ids: Vec<u64> = parts.iter().flat_map(|p| p.samples().iter().map(|s| s.id)).collect();
        ids.sort();
        prop_assert_eq!(ids, (0..ds.len() as u64).collect::<Vec<_>>());
        let mut seen = std::collections::HashSet::new();
        for p in &parts {
            for c in p.classes() {
                prop_assert!(seen.insert(c.id));
            }
        }
    }
}
