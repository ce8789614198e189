#![no_main]

use libfuzzer_sys::fuzz_target;
use planeseg_io::json::{from_json, GlobalPlanesDoc, IntrinsicsDoc, PlanesDoc, PosesDoc, TracksDoc};

fuzz_target!(|data: &[u8]| {
    if let Ok(doc) = from_json::<IntrinsicsDoc>(data) {
        let _ = doc.intrinsics.validate();
    }
    if let Ok(doc) = from_json::<PlanesDoc>(data) {
        let _ = doc.plane_models();
    }
    let _ = from_json::<GlobalPlanesDoc>(data);
    if let Ok(doc) = from_json::<PosesDoc>(data) {
        let _ = doc.pose(0).map(|p| (p.rotation(), p.translation()));
    }
    if let Ok(doc) = from_json::<TracksDoc>(data) {
        let _ = doc.keypoints(0);
    }
});
