#![no_main]

use libfuzzer_sys::fuzz_target;
use planeseg::pipeline::PipelineConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(config) = PipelineConfig::from_toml_str(text) {
        let again = PipelineConfig::from_toml_str(&config.to_toml_string()).expect("serialized config parses");
        assert_eq!(config, again);
    }
});
