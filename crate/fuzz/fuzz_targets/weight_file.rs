#![no_main]
use libfuzzer_sys::fuzz_target;
use occnav::predictor::{decode_weights, encode_weights};

fuzz_target!(|data: &[u8]| {
    if let Ok(b) = decode_weights(data) {
        let bytes = encode_weights(&b);
        let again = decode_weights(&bytes).expect("encoded weights decode");
        assert_eq!(encode_weights(&again), bytes);
    }
});
