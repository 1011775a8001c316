#![no_main]

use std::path::Path;

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(img) = zed::corpus_io::decode_image(data, Path::new("fuzz")) {
        assert_eq!(img.data().len(), img.width() * img.height() * 3);
    }
});
