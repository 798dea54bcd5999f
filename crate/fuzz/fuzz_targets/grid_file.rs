#![no_main]
use libfuzzer_sys::fuzz_target;
use occnav::gridmap::{decode_grid, encode_grid};

fuzz_target!(|data: &[u8]| {
    if let Ok(g) = decode_grid(data) {
        let bytes = encode_grid(&g);
        let again = decode_grid(&bytes).expect("encoded grid decodes");
        assert_eq!(encode_grid(&again), bytes);
    }
});
