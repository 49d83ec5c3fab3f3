#![no_main]

use libfuzzer_sys::fuzz_target;

use adnet_core::synth::DatasetManifest;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(manifest) = DatasetManifest::parse_str(text) {
        // accepted manifests reprint and re-parse to the same structure
        let printed = manifest.to_toml_string();
        let again = DatasetManifest::parse_str(&printed).expect("re-parse of accepted manifest");
        assert_eq!(manifest, again, "unstable manifest roundtrip");
    }
});
