#![no_main]

use libfuzzer_sys::fuzz_target;
use taskgap::formats::{decode_pfm, encode_pfm};

fuzz_target!(|data: &[u8]| {
    if let Ok(t) = decode_pfm(data) {
        // Anything accepted must survive a write and re-read unchanged.
        let again = decode_pfm(&encode_pfm(&t).expect("decoded maps re-encode")).expect("re-encoded maps decode");
        assert_eq!(again.shape(), t.shape());
        assert!(again.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
});
