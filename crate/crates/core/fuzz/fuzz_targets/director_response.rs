#![no_main]
use libfuzzer_sys::fuzz_target;
use wg_core::director::{parse_response, parse_storyline};

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        let _ = parse_response(text);
        let _ = parse_storyline(text);
    }
});
