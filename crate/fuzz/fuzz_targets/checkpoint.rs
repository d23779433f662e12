#![no_main]

use controlsr::store::{encode_checkpoint, parse_checkpoint};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(ck) = parse_checkpoint(data) {
        let bytes = encode_checkpoint(&ck).expect("parsed checkpoints re-encode");
        let again = parse_checkpoint(&bytes).expect("re-encoded checkpoints parse");
        assert!(again.bit_eq(&ck));
    }
});
