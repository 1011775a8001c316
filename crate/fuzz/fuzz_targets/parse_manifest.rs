#![no_main]

use std::path::Path;

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let _ = zed::corpus_io::parse_manifest(data, Path::new("/corpus"), Path::new("fuzz.csv"));
});
