#![no_main]

use libfuzzer_sys::fuzz_target;
use wmil::model::{decode_params, encode_params};

fuzz_target!(|data: &[u8]| {
    if let Ok(params) = decode_params(data) {
        assert_eq!(encode_params(&params), data);
    }
});
