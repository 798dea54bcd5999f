#![no_main]
use libfuzzer_sys::fuzz_target;
use occnav::sensorsim::Environment;

fuzz_target!(|data: &str| {
    if let Ok(env) = Environment::from_json(data) {
        let text = env.to_json();
        let again = Environment::from_json(&text).expect("serialized environment parses");
        assert_eq!(again.to_json(), text);
        if let Some(w) = env.walls.first() {
            let _ = env.distance_to_walls(&w.a);
        }
    }
});
