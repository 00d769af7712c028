#![no_main]

use glioma_core::config::KvConfig;
use glioma_core::io::PhantomSpec;
use glioma_core::models::{HybridConfig, UNetConfig};
use glioma_core::preprocess::AugmentConfig;
use glioma_core::train::TrainRunConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(kv) = KvConfig::parse(text) else { return };
    // Typed readers must reject bad values with an error, never a panic.
    if let Ok(c) = UNetConfig::from_kv(&kv) {
        assert_eq!(UNetConfig::from_kv(&c.to_kv()).ok(), Some(c));
    }
    if let Ok(c) = HybridConfig::from_kv(&kv) {
        assert_eq!(HybridConfig::from_kv(&c.to_kv()).ok(), Some(c));
    }
    let _ = TrainRunConfig::from_kv(&kv);
    let _ = PhantomSpec::from_kv(&kv);
    let _ = AugmentConfig::from_kv(&kv);
});
