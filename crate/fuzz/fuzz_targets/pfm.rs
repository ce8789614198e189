#![no_main]

use libfuzzer_sys::fuzz_target;
use planeseg_io::pfm::{decode_pfm, encode_pfm, pfm_to_depth, pfm_to_normals};

fuzz_target!(|data: &[u8]| {
    let Ok(pfm) = decode_pfm(data) else { return };
    let again = decode_pfm(&encode_pfm(&pfm)).expect("re-encoded PFM decodes");
    assert_eq!(pfm.width, again.width);
    assert_eq!(pfm.height, again.height);
    assert!(pfm.data.iter().zip(&again.data).all(|(a, b)| a.to_bits() == b.to_bits()));
    let _ = pfm_to_depth(&pfm);
    let _ = pfm_to_normals(&pfm);
});
