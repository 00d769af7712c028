#![no_main]

use glioma_core::io::{predictions_from_csv, predictions_to_csv};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(rows) = predictions_from_csv(text) {
        if let Ok(printed) = predictions_to_csv(&rows) {
            let again = predictions_from_csv(&printed).expect("printed predictions parse");
            assert_eq!(again, rows);
        }
    }
});
