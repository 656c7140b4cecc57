//! Arbitrary bytes through the checkpoint loader. The header caps must keep
//! rejected inputs cheap; anything accepted must survive a save/load
//! roundtrip byte for byte.

#![no_main]

use libfuzzer_sys::fuzz_target;
use sedcl_core::model::checkpoint::{checkpoint_from_bytes, checkpoint_to_bytes};

fuzz_target!(|data: &[u8]| {
    if let Ok(model) = checkpoint_from_bytes(data) {
        let bytes = checkpoint_to_bytes(&model);
        let again = checkpoint_from_bytes(&bytes).expect("re-encoded checkpoint must decode");
        assert_eq!(bytes, checkpoint_to_bytes(&again));
    }
});
