#![no_main]

use libfuzzer_sys::fuzz_target;

use adnet_core::checkpoint::Checkpoint;

// The checkpoint parser must never panic or over-allocate on arbitrary
// bytes, and anything it accepts must re-serialize to the identical file.
fuzz_target!(|data: &[u8]| {
    if let Ok(ckpt) = Checkpoint::from_bytes(data) {
        let bytes = ckpt.to_bytes();
        let again = Checkpoint::from_bytes(&bytes).expect("re-parse of accepted checkpoint");
        assert_eq!(bytes, again.to_bytes(), "unstable checkpoint roundtrip");
    }
});
