#![no_main]

use libfuzzer_sys::fuzz_target;
use lesita::dataset::{decode_array, encode_array};

fuzz_target!(|data: &[u8]| {
    if let Ok(a) = decode_array(data) {
        assert_eq!(encode_array(&a.view()), data);
    }
});
