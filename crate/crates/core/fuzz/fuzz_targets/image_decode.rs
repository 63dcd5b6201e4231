#![no_main]

use libfuzzer_sys::fuzz_target;
use wmil::imaging::decode_image;

fuzz_target!(|data: &[u8]| {
    if let Ok(img) = decode_image(data) {
        assert_eq!(img.pixels().len(), img.width() * img.height() * img.channels());
        assert!(img.pixels().iter().all(|v| (0.0..=1.0).contains(v)));
    }
});
