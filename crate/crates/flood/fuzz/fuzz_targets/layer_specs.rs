#![no_main]

use floodcast::nn::{layer_specs_to_text, parse_layer_specs};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(specs) = parse_layer_specs(text) {
            let specs2 = parse_layer_specs(&layer_specs_to_text(&specs)).expect("round trip");
            assert_eq!(specs, specs2);
        }
    }
});
