#![no_main]

use libfuzzer_sys::fuzz_target;

use adnet_core::trainer::TrainConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(config) = TrainConfig::parse_str(text) {
        let printed = config.to_toml_string();
        let again = TrainConfig::parse_str(&printed).expect("re-parse of accepted config");
        assert_eq!(config, again, "unstable train config roundtrip");
    }
});
