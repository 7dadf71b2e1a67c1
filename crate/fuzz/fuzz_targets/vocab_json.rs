#![no_main]

use libfuzzer_sys::fuzz_target;
use xdomain_core::corpus::{Verbalizer, Vocabulary};

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(v) = Vocabulary::from_json(text, &Verbalizer::default()) {
            let _ = v.encode("it is good");
        }
    }
});
