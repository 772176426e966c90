#![no_main]

use eec_core::nn::Autoencoder;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(ae) = Autoencoder::from_bytes(data) {
        assert_eq!(ae.to_bytes(), data);
    }
});
