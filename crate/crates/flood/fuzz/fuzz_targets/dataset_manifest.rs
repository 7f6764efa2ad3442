#![no_main]

use floodcast::scenario::DatasetManifest;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(manifest) = DatasetManifest::parse(text) {
            let manifest2 = DatasetManifest::parse(&manifest.to_text()).expect("round trip");
            assert_eq!(manifest, manifest2);
        }
    }
});
