#![no_main]
use libfuzzer_sys::fuzz_target;
use wg_core::formats::{decode_video, encode_video};

fuzz_target!(|data: &[u8]| {
    if let Ok(v) = decode_video(data) {
        let again = encode_video(&v).expect("decoded video re-encodes");
        assert_eq!(again, data);
    }
});
