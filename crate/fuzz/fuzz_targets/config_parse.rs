#![no_main]

use libfuzzer_sys::fuzz_target;
use stmixer::config::RunConfig;
use stmixer::geometry::Mode;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cfg) = RunConfig::parse(text, Mode::Keyframe) {
        let back = RunConfig::parse(&cfg.to_text(), Mode::Keyframe).expect("snapshot parses");
        assert_eq!(back.to_text(), cfg.to_text());
    }
});
