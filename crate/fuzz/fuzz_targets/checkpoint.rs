#![no_main]

use libfuzzer_sys::fuzz_target;
use xdomain_core::model::{decode_checkpoint, encode_checkpoint, StorageDtype};

fuzz_target!(|data: &[u8]| {
    if let Ok(ckpt) = decode_checkpoint(data) {
        if let Ok(bytes) = encode_checkpoint(&ckpt, StorageDtype::F64) {
            assert_eq!(decode_checkpoint(&bytes).expect("re-decode"), ckpt);
        }
    }
});
