//! Replays the checked-in fuzz seeds through the same entry points.

use std::fs;
use std::path::PathBuf;

use xdomain_core::config::RunConfig;
use xdomain_core::corpus::{parse_jsonl, Verbalizer, Vocabulary};
use xdomain_core::model::{decode_checkpoint, encode_checkpoint, StorageDtype};

fn seeds(target: &str) -> Vec<(String, Vec<u8>)> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus").join(target);
    let mut out: Vec<(String, Vec<u8>)> = fs::read_dir(&dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap())
        })
        .collect();
    out.sort();
    assert!(!out.is_empty(), "no seeds in {}", dir.display());
    out
}

#[test]
fn jsonl_seeds() {
    for (name, bytes) in seeds("jsonl") {
        let parsed = parse_jsonl(std::str::from_utf8(&bytes).unwrap());
        assert_eq!(parsed.is_ok(), !name.starts_with("bad"), "{name}");
    }
}

#[test]
fn checkpoint_seeds_round_trip() {
    for (name, bytes) in seeds("checkpoint") {
        let ckpt = decode_checkpoint(&bytes).unwrap_or_else(|e| panic!("{name}: {e}"));
        assert_eq!(encode_checkpoint(&ckpt, StorageDtype::F64).unwrap(), bytes, "{name}");
        let mut cut = bytes.clone();
        cut.truncate(bytes.len() - 1);
        assert!(decode_checkpoint(&cut).is_err());
    }
}

#[test]
fn vocab_seeds() {
    for (name, bytes) in seeds("vocab_json") {
        let v = Vocabulary::from_json(std::str::from_utf8(&bytes).unwrap(), &Verbalizer::default());
        assert!(v.is_ok(), "{name}");
    }
}

#[test]
fn run_config_seeds() {
    for (name, bytes) in seeds("run_config") {
        let cfg = RunConfig::from_json(std::str::from_utf8(&bytes).unwrap());
        assert_eq!(cfg.is_ok(), !name.starts_with("unknown"), "{name}");
    }
}
