#![no_main]

use libfuzzer_sys::fuzz_target;
use sbrl_core::experiment::parse_config;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(cfg) = parse_config(text) {
            let _ = cfg.digest();
            let _ = cfg.grid();
        }
    }
});
