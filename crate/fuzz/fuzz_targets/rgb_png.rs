#![no_main]

use libfuzzer_sys::fuzz_target;
use planeseg_io::png::decode_rgb;

fuzz_target!(|data: &[u8]| {
    if let Ok(image) = decode_rgb(data) {
        assert!(image.pixels().iter().flatten().all(|c| (0.0..=1.0).contains(c)));
    }
});
