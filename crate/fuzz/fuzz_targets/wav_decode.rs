//! Arbitrary bytes through the WAV decoder. Decoding must never panic, and
//! anything it accepts is already quantized, so an encode/decode pass must
//! reproduce the samples exactly.

#![no_main]

use libfuzzer_sys::fuzz_target;
use sedcl_core::audio::wav::{decode_wav, encode_wav};

fuzz_target!(|data: &[u8]| {
    if let Ok((rate, samples)) = decode_wav(data) {
        let bytes = encode_wav(&samples, rate);
        let (rate2, samples2) = decode_wav(&bytes).expect("re-encoded wav must decode");
        assert_eq!(rate, rate2);
        assert_eq!(samples, samples2);
    }
});
