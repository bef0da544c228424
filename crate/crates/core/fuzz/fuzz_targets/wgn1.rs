#![no_main]
use libfuzzer_sys::fuzz_target;
use wg_core::formats::Checkpoint;

fuzz_target!(|data: &[u8]| {
    if let Ok(ck) = Checkpoint::decode(data) {
        let again = ck.encode().expect("decoded checkpoint re-encodes");
        assert_eq!(again, data);
    }
});
