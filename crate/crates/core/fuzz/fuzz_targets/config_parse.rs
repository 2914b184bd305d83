#![no_main]

use agd::config::ExperimentConfig;
use libfuzzer_sys::fuzz_target;

// Input is a TOML document, optionally followed by a NUL byte and one
// `key=value` override per line.
fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    let (doc, overrides) = text.split_once('\0').unwrap_or((text, ""));
    let overrides: Vec<String> = overrides.lines().map(str::to_string).collect();
    if let Ok(cfg) = ExperimentConfig::from_toml(doc, &overrides) {
        let back = ExperimentConfig::from_toml(&cfg.canonical(), &[]).expect("canonical form parses");
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
    }
});
