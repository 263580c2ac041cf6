#![no_main]

use cohort_core::synth::SynthConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(config) = SynthConfig::from_json(text) {
        // validated configs always yield a schema that validates too
        let schema = config.schema();
        assert_eq!(schema.features.len(), config.features.len());
    }
});
