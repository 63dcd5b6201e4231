#![no_main]

use libfuzzer_sys::fuzz_target;
use wmil::trainer::TrainState;

fuzz_target!(|data: &[u8]| {
    if let Ok(state) = TrainState::decode(data) {
        assert_eq!(state.encode(), data);
    }
});
