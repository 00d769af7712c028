#![no_main]

use glioma_core::io::{decode_volume, encode_volume};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    // Anything that decodes must survive a re-encode unchanged.
    if let Ok(v) = decode_volume(data) {
        let bytes = encode_volume(&v);
        let again = decode_volume(&bytes).expect("re-encoded volume decodes");
        assert_eq!(encode_volume(&again), bytes);
    }
});
