#![no_main]
use libfuzzer_sys::fuzz_target;
use wg_core::formats::{decode_audio, encode_audio};

fuzz_target!(|data: &[u8]| {
    if let Ok(a) = decode_audio(data) {
        let again = encode_audio(&a).expect("decoded audio re-encodes");
        assert_eq!(again, data);
    }
});
