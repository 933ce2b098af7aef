//! Decoder robustness: the checked-in fuzz corpus must decode, and mutated
//! or random input must fail with an error rather than a panic.

use std::path::PathBuf;

use lesita::checkpoint::{Checkpoint, SavedModel};
use lesita::dataset::{decode_array, decode_pgm, encode_array, Manifest};
use lesita::experiment::{ExperimentConfig, GridConfig};
use proptest::prelude::*;

fn corpus(target: &str) -> Vec<(String, Vec<u8>)> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus").join(target);
    let mut out: Vec<_> = std::fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap())
        })
        .collect();
    out.sort();
    assert!(!out.is_empty(), "empty corpus for {target}");
    out
}

fn all_decoders(bytes: &[u8]) {
    if let Ok(ck) = Checkpoint::decode(bytes) {
        assert_eq!(ck.encode(), bytes);
        let _ = SavedModel::from_checkpoint(&ck);
    }
    if let Ok(a) = decode_array(bytes) {
        assert_eq!(encode_array(&a.view()), bytes);
    }
    if let Ok(img) = decode_pgm(bytes) {
        assert!(img.iter().all(|v| (0.0..=1.0).contains(v)));
    }
    if let Ok(text) = std::str::from_utf8(bytes) {
        let _ = Manifest::parse(text);
        let _ = ExperimentConfig::parse(text);
        let _ = GridConfig::parse(text);
    }
}

#[test]
fn corpus_seeds_decode() {
    for (name, bytes) in corpus("checkpoint") {
        let ck = Checkpoint::decode(&bytes).unwrap_or_else(|e| panic!("{name}: {e}"));
        SavedModel::from_checkpoint(&ck).unwrap_or_else(|e| panic!("{name}: {e}"));
    }
    for (name, bytes) in corpus("array_blob") {
        decode_array(&bytes).unwrap_or_else(|e| panic!("{name}: {e}"));
    }
    for (name, bytes) in corpus("pgm") {
        decode_pgm(&bytes).unwrap_or_else(|e| panic!("{name}: {e}"));
    }
    for (name, bytes) in corpus("manifest") {
        Manifest::parse(std::str::from_utf8(&bytes).unwrap()).unwrap_or_else(|e| panic!("{name}: {e}"));
    }
    for (name, bytes) in corpus("config") {
        let text = std::str::from_utf8(&bytes).unwrap();
        let ok = ExperimentConfig::parse(text).is_ok() || GridConfig::parse(text).is_ok();
        assert!(ok, "{name}");
    }
}

#[test]
fn every_truncation_of_every_seed_is_handled() {
    for target in ["checkpoint", "array_blob", "pgm", "manifest", "config"] {
        for (_, bytes) in corpus(target) {
            for cut in 0..bytes.len() {
                all_decoders(&bytes[..cut]);
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2000))]

    #[test]
    fn random_bytes_never_panic(bytes in proptest::collection::vec(any::<u8>(), 0..256)) {
        all_decoders(&bytes);
    }

    #[test]
    fn mutated_seeds_never_panic(
        target in prop::sample::select(vec!["checkpoint", "array_blob", "pgm", "manifest", "config"]),
        which in any::<prop::sample::Index>(),
        edits in proptest::collection::vec((any::<prop::sample::Index>(), any::<u8>()), 1..8),
    ) {
        let seeds = corpus(target);
        let mut bytes = seeds[which.index(seeds.len())].1.clone();
        for (at, v) in edits {
            if !bytes.is_empty() {
                let i = at.index(bytes.len());
                bytes[i] = v;
            }
        }
        all_decoders(&bytes);
    }
}
