#![no_main]

use floodcast::scenario::{forcing_from_text, forcing_to_text};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        // Never panic; accepted plans must round-trip through the writer.
        if let Ok(plan) = forcing_from_text(text) {
            let plan2 = forcing_from_text(&forcing_to_text(&plan)).expect("round trip");
            assert_eq!(plan, plan2);
        }
    }
});
