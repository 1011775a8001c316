#![no_main]

use std::path::Path;

use libfuzzer_sys::fuzz_target;
use zed::corpus_io::{parse_feature_table, write_feature_table};

fuzz_target!(|data: &[u8]| {
    if let Ok(rows) = parse_feature_table(data, Path::new("fuzz.csv")) {
        let mut out = Vec::new();
        write_feature_table(&mut out, &rows).unwrap();
        let again = parse_feature_table(&out, Path::new("fuzz.csv")).unwrap();
        assert_eq!(again.len(), rows.len());
    }
});
