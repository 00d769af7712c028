#![no_main]

use glioma_core::config::KvConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(kv) = KvConfig::parse(text) {
        let printed = kv.to_text();
        let again = KvConfig::parse(&printed).expect("printed config parses");
        assert_eq!(again, kv);
    }
});
