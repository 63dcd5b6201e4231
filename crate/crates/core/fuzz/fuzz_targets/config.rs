#![no_main]

use libfuzzer_sys::fuzz_target;
use wmil::config::Config;
use wmil::synthdata::CorpusSpec;
use wmil::trainer::TrainConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    let Ok(config) = Config::parse(text) else {
        return;
    };
    let _ = CorpusSpec::from_config(&mut config.clone());
    if let Ok(c) = TrainConfig::from_config(config) {
        c.validate().expect("from_config returns validated configs");
    }
});
