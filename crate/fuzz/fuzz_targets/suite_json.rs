#![no_main]
use libfuzzer_sys::fuzz_target;
use occnav::simharness::Suite;

fuzz_target!(|data: &str| {
    if let Ok(suite) = Suite::from_json(data) {
        let text = suite.to_json();
        let again = Suite::from_json(&text).expect("serialized suite parses");
        assert_eq!(again.to_json(), text);
        for r in 0..suite.rows.len().min(4) {
            for k in 0..suite.repetitions.min(4) {
                let _ = suite.expand(r, k);
            }
        }
    }
});
