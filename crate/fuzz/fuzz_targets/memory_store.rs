#![no_main]

use eec_core::memory::MemoryStore;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(store) = MemoryStore::<f32>::from_bytes(data) {
        // anything accepted must re-encode to the same bytes
        let again = store.to_bytes().expect("accepted store re-encodes");
        assert_eq!(again, data);
    }
});
