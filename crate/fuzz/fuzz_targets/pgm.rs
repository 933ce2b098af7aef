#![no_main]

use libfuzzer_sys::fuzz_target;
use lesita::dataset::decode_pgm;

fuzz_target!(|data: &[u8]| {
    if let Ok(img) = decode_pgm(data) {
        assert!(img.iter().all(|v| (0.0..=1.0).contains(v)));
    }
});
