#![no_main]

use libfuzzer_sys::fuzz_target;
use sbrl_core::datagen::io::{parse_csv, render_csv};

fuzz_target!(|data: &[u8]| {
    if let Ok(ds) = parse_csv(data, None, "fuzz") {
        // Anything accepted must survive a render/parse round trip.
        let again = parse_csv(render_csv(&ds).as_bytes(), None, "fuzz").expect("rendered csv parses");
        assert_eq!(again.len(), ds.len());
        assert_eq!(again.dim(), ds.dim());
    }
});
