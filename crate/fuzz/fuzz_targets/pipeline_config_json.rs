#![no_main]

use cohort_core::pipeline::PipelineConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(config) = PipelineConfig::from_json(text) {
        let back = serde_json::to_string(&config).expect("config serializes");
        let again = PipelineConfig::from_json(&back).expect("serialized config parses");
        assert_eq!(again, config);
    }
});
