#![no_main]
use libfuzzer_sys::fuzz_target;
use wg_core::config::RunConfig;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(cfg) = RunConfig::load(text, &[]) {
            let echoed = cfg.to_toml().expect("valid config serializes");
            assert_eq!(RunConfig::load(&echoed, &[]).expect("echo reloads"), cfg);
        }
    }
});
