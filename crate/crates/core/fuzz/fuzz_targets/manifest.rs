#![no_main]

use libfuzzer_sys::fuzz_target;
use wmil::synthdata::{manifest_line, parse_manifest};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(entries) = parse_manifest(text) {
        // accepted entries must survive a write/parse round trip
        for e in &entries {
            let again = parse_manifest(&manifest_line(e)).expect("re-parse");
            assert_eq!(again.len(), 1);
            assert_eq!(again[0].id, e.id);
            assert_eq!(again[0].label, e.label);
            assert_eq!(again[0].boxes.len(), e.boxes.len());
        }
    }
});
