#![no_main]

use libfuzzer_sys::fuzz_target;
use planeseg_io::ply::{decode_ply, encode_ply};

fuzz_target!(|data: &[u8]| {
    let Ok(mesh) = decode_ply(data) else { return };
    let bytes = encode_ply(&mesh).expect("decoded mesh encodes");
    let again = decode_ply(&bytes).expect("round trip");
    assert_eq!(mesh.faces, again.faces);
    assert_eq!(mesh.vertices.len(), again.vertices.len());
});
