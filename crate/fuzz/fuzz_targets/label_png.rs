#![no_main]

use libfuzzer_sys::fuzz_target;
use planeseg_io::png::{decode_labels, encode_labels};

fuzz_target!(|data: &[u8]| {
    let Ok(labels) = decode_labels(data) else { return };
    assert_eq!(labels.labels.len(), labels.width * labels.height);
    let bytes = encode_labels(&labels).expect("decoded labels fit in 16 bits");
    assert_eq!(decode_labels(&bytes).expect("round trip"), labels);
});
