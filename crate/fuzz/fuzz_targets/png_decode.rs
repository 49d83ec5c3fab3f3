#![no_main]

use libfuzzer_sys::fuzz_target;

use adnet_core::image::ImageBuffer;

// Image bytes come from users (decode/route/restore take arbitrary files).
fuzz_target!(|data: &[u8]| {
    if let Ok(img) = ImageBuffer::decode_png(data) {
        assert!(img.height() > 0 && img.width() > 0);
        assert_eq!(
            img.data().len(),
            img.height() * img.width() * img.channels()
        );
        assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
});
