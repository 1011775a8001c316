#![no_main]

use std::path::Path;

use libfuzzer_sys::fuzz_target;
use zed::ModelWeights;

fuzz_target!(|data: &[u8]| {
    if let Ok(w) = ModelWeights::<f32>::from_bytes(data, Path::new("fuzz.zedw")) {
        assert_eq!(w.to_bytes(), data);
    }
});
