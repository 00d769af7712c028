#![no_main]

use glioma_core::io::DatasetManifest;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(m) = DatasetManifest::from_csv(text) {
        if let Ok(printed) = m.to_csv() {
            let again = DatasetManifest::from_csv(&printed).expect("printed manifest parses");
            assert_eq!(again, m);
        }
    }
});
