#![no_main]

use cohort_core::cohort::Schema;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(schema) = Schema::from_json(text) {
        assert_eq!(Schema::from_json(&schema.to_json()).expect("round trip"), schema);
    }
});
