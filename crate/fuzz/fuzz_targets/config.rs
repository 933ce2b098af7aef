#![no_main]

use libfuzzer_sys::fuzz_target;
use lesita::experiment::{ExperimentConfig, GridConfig};

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(c) = ExperimentConfig::parse(text) {
            assert_eq!(ExperimentConfig::parse(&c.to_toml().unwrap()).unwrap(), c);
        }
        if let Ok(g) = GridConfig::parse(text) {
            let _ = g.cells();
        }
    }
});
