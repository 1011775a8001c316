#![no_main]

use std::path::Path;

use libfuzzer_sys::fuzz_target;
use zed_cli::config::{parse_config, Settings};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(file) = parse_config(text, Path::new("fuzz.conf")) {
        let _ = Settings::default().apply_file(&file);
    }
});
