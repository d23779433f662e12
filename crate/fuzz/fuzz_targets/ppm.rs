#![no_main]

use controlsr::store::{encode_ppm, parse_ppm};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(img) = parse_ppm(data) {
        let bytes = encode_ppm(&img);
        assert_eq!(parse_ppm(&bytes).expect("encoded images parse"), img);
    }
});
