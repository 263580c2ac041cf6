#![no_main]

use cohort_core::cohort::Cohort;
use cohort_core::synth::SynthConfig;
use libfuzzer_sys::fuzz_target;

// Anything that parses must survive a write/read round trip unchanged.
fuzz_target!(|data: &[u8]| {
    let schema = SynthConfig::table1_default(0).schema();
    if let Ok(cohort) = Cohort::from_csv(data, &schema) {
        let mut out = Vec::new();
        cohort.write_csv(&mut out).expect("parsed cohort writes");
        let again = Cohort::from_csv(out.as_slice(), &schema).expect("written cohort parses");
        assert_eq!(again, cohort);
    }
});
