#![no_main]

use floodcast::field::{read_fields_from_bytes, write_fields};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    // The decoder must never panic on arbitrary bytes, and anything it
    // accepts must survive a write/read round trip unchanged.
    if let Ok((grid, fields)) = read_fields_from_bytes(data) {
        let mut buf = Vec::new();
        write_fields(&mut buf, grid, &fields).expect("re-encode accepted input");
        let (grid2, fields2) = read_fields_from_bytes(&buf).expect("decode own output");
        assert_eq!(grid, grid2);
        assert_eq!(fields, fields2);
    }
});
