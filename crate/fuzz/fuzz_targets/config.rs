#![no_main]

use controlsr::store::RunConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(cfg) = RunConfig::from_json_str(text) {
            let again = RunConfig::from_json_str(&cfg.to_json().to_string()).expect("serialized configs parse");
            assert_eq!(again, cfg);
        }
    }
});
