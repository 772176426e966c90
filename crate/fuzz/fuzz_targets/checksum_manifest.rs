#![no_main]

use eec_cli::fetch::parse_manifest;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(entries) = parse_manifest(text) {
            for e in entries {
                assert_eq!(e.sha256.len(), 64);
                assert!(!e.name.contains('/'));
            }
        }
    }
});
