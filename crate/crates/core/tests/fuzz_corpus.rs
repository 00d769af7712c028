//! Replays the checked-in fuzz seeds through the same round-trip checks as
//! the cargo-fuzz targets, then mutates them with proptest. This runs on a
//! stable toolchain; the libFuzzer targets in `fuzz/` need nightly.

use std::path::PathBuf;

use glioma_core::config::KvConfig;
use glioma_core::io::{
    decode_volume, encode_volume, predictions_from_csv, predictions_to_csv, DatasetManifest, PhantomSpec,
};
use glioma_core::models::{Checkpoint, HybridConfig, UNetConfig};
use glioma_core::preprocess::AugmentConfig;
use glioma_core::train::{History, TrainRunConfig};
use proptest::prelude::*;

fn volume(data: &[u8]) {
    if let Ok(v) = decode_volume(data) {
        let bytes = encode_volume(&v);
        let again = decode_volume(&bytes).expect("re-encoded volume decodes");
        assert_eq!(encode_volume(&again), bytes);
    }
}

fn checkpoint_round_trip(data: &[u8]) {
    if let Ok(ckpt) = Checkpoint::decode(data) {
        let bytes = ckpt.encode();
        let again = Checkpoint::decode(&bytes).expect("re-encoded checkpoint decodes");
        assert_eq!(again.encode(), bytes);
    }
}

fn checkpoint(data: &[u8]) {
    checkpoint_round_trip(data);
    // Most mutations only trip the checksum; re-seal the input (minus the
    // old trailer) so the body parser sees them too.
    let mut sealed = data[..data.len().saturating_sub(4)].to_vec();
    sealed.extend_from_slice(&crc32fast::hash(&sealed).to_le_bytes());
    checkpoint_round_trip(&sealed);
}

fn kv_config(text: &str) {
    if let Ok(kv) = KvConfig::parse(text) {
        assert_eq!(KvConfig::parse(&kv.to_text()).expect("printed config parses"), kv);
    }
}

fn config_schemas(text: &str) {
    let Ok(kv) = KvConfig::parse(text) else { return };
    if let Ok(c) = UNetConfig::from_kv(&kv) {
        assert_eq!(UNetConfig::from_kv(&c.to_kv()).ok(), Some(c));
    }
    if let Ok(c) = HybridConfig::from_kv(&kv) {
        assert_eq!(HybridConfig::from_kv(&c.to_kv()).ok(), Some(c));
    }
    let _ = TrainRunConfig::from_kv(&kv);
    let _ = PhantomSpec::from_kv(&kv);
    let _ = AugmentConfig::from_kv(&kv);
}

fn manifest(text: &str) {
    if let Ok(m) = DatasetManifest::from_csv(text) {
        if let Ok(printed) = m.to_csv() {
            assert_eq!(DatasetManifest::from_csv(&printed).expect("printed manifest parses"), m);
        }
    }
}

fn history(text: &str) {
    if let Ok(h) = History::from_csv(text) {
        let printed = h.to_csv();
        assert_eq!(History::from_csv(&printed).expect("printed history parses").to_csv(), printed);
    }
}

fn predictions(text: &str) {
    if let Ok(rows) = predictions_from_csv(text) {
        if let Ok(printed) = predictions_to_csv(&rows) {
            assert_eq!(predictions_from_csv(&printed).expect("printed predictions parse"), rows);
        }
    }
}

type Target = (&'static str, fn(&[u8]));

fn text(f: fn(&str)) -> impl Fn(&[u8]) {
    move |data| {
        if let Ok(s) = std::str::from_utf8(data) {
            f(s)
        }
    }
}

const TARGETS: [Target; 7] = [
    ("volume_decode", volume),
    ("checkpoint_decode", checkpoint),
    ("kv_config", |d| text(kv_config)(d)),
    ("config_schemas", |d| text(config_schemas)(d)),
    ("manifest_csv", |d| text(manifest)(d)),
    ("history_csv", |d| text(history)(d)),
    ("predictions_csv", |d| text(predictions)(d)),
];

fn seeds(target: &str) -> Vec<Vec<u8>> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fuzz/corpus").join(target);
    let mut files: Vec<_> = std::fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| e.unwrap().path())
        .collect();
    files.sort();
    files.into_iter().map(|p| std::fs::read(p).unwrap()).collect()
}

#[test]
fn every_target_has_seeds_that_parse() {
    for (name, _) in TARGETS {
        let s = seeds(name);
        assert!(!s.is_empty(), "{name} has no seeds");
        for seed in &s {
            let ok = match name {
                "volume_decode" => decode_volume(seed).is_ok(),
                "checkpoint_decode" => Checkpoint::decode(seed).is_ok(),
                "manifest_csv" => DatasetManifest::from_csv(std::str::from_utf8(seed).unwrap()).is_ok(),
                "history_csv" => History::from_csv(std::str::from_utf8(seed).unwrap()).is_ok(),
                "predictions_csv" => predictions_from_csv(std::str::from_utf8(seed).unwrap()).is_ok(),
                _ => KvConfig::parse(std::str::from_utf8(seed).unwrap()).is_ok(),
            };
            assert!(ok, "a {name} seed is rejected");
        }
    }
}

#[derive(Clone, Debug)]
enum Edit {
    Flip(usize, u8),
    Truncate(usize),
    Insert(usize, u8),
    Remove(usize),
}

fn apply(seed: &[u8], edits: &[Edit]) -> Vec<u8> {
    let mut out = seed.to_vec();
    for e in edits {
        let len = out.len().max(1);
        match *e {
            Edit::Flip(i, mask) => {
                if !out.is_empty() {
                    out[i % len] ^= mask;
                }
            }
            Edit::Truncate(i) => out.truncate(i % (len + 1)),
            Edit::Insert(i, b) => out.insert(i % (out.len() + 1), b),
            Edit::Remove(i) => {
                if !out.is_empty() {
                    out.remove(i % len);
                }
            }
        }
    }
    out
}

fn edit() -> impl Strategy<Value = Edit> {
    let byte = prop_oneof![any::<u8>(), Just(b','), Just(b'\n'), Just(b'='), Just(b'#'), Just(b'-'), Just(b'9')];
    prop_oneof![
        (any::<usize>(), 1u8..).prop_map(|(i, m)| Edit::Flip(i, m)),
        any::<usize>().prop_map(Edit::Truncate),
        (any::<usize>(), byte).prop_map(|(i, b)| Edit::Insert(i, b)),
        any::<usize>().prop_map(Edit::Remove),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(4096))]

    #[test]
    fn mutated_seeds_never_panic(target in 0..TARGETS.len(), pick in any::<usize>(), edits in prop::collection::vec(edit(), 1..6)) {
        let (name, check) = TARGETS[target];
        let s = seeds(name);
        let input = apply(&s[pick % s.len()], &edits);
        check(&input);
    }
}
