#![no_main]

use glioma_core::train::History;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(h) = History::from_csv(text) {
        // compared as text: NaN losses are legal and never equal themselves
        let printed = h.to_csv();
        let again = History::from_csv(&printed).expect("printed history parses");
        assert_eq!(again.to_csv(), printed);
    }
});
