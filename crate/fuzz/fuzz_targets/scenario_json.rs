#![no_main]
use libfuzzer_sys::fuzz_target;
use occnav::simharness::ScenarioConfig;

fuzz_target!(|data: &str| {
    if let Ok(sc) = ScenarioConfig::from_json(data) {
        let text = sc.to_json();
        let again = ScenarioConfig::from_json(&text).expect("serialized scenario parses");
        assert_eq!(again.to_json(), text);
        let _ = sc.rates.periods();
    }
});
