#![no_main]

use glioma_core::models::Checkpoint;
use libfuzzer_sys::fuzz_target;

fn round_trip(data: &[u8]) {
    if let Ok(ckpt) = Checkpoint::decode(data) {
        let bytes = ckpt.encode();
        let again = Checkpoint::decode(&bytes).expect("re-encoded checkpoint decodes");
        assert_eq!(again.encode(), bytes);
        let _ = ckpt.model_kind();
    }
}

fuzz_target!(|data: &[u8]| {
    round_trip(data);
    // re-seal so mutations reach the body parser instead of the checksum
    let mut sealed = data[..data.len().saturating_sub(4)].to_vec();
    sealed.extend_from_slice(&crc32fast::hash(&sealed).to_le_bytes());
    round_trip(&sealed);
});
