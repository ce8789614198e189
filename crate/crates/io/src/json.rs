//! Versioned JSON records: intrinsics, poses, planes and keypoint tracks.

use nalgebra::{Matrix3, Vector3};
use planeseg::crf::PlaneSegmentation;
use planeseg::geom::{CameraIntrinsics, PlaneModel};
use planeseg::sparseview::{GlobalPlane, Keypoint};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::IoError;

pub const SCHEMA_VERSION: u32 = 1;

pub trait Versioned {
    fn schema_version(&self) -> u32;
}

macro_rules! versioned {
    ($($t:ty),*) => {
        $(impl Versioned for $t {
            fn schema_version(&self) -> u32 {
                self.schema_version
            }
        })*
    };
}

/// Parses a document and rejects unknown schema versions.
pub fn from_json<T: DeserializeOwned + Versioned>(bytes: &[u8]) -> Result<T, IoError> {
    let doc: T = serde_json::from_slice(bytes)?;
    if doc.schema_version() != SCHEMA_VERSION {
        return Err(IoError::Schema(doc.schema_version()));
    }
    Ok(doc)
}

/// Pretty-printed with a trailing newline.
pub fn to_json<T: Serialize>(doc: &T) -> Vec<u8> {
    let mut out = serde_json::to_vec_pretty(doc).expect("records serialize infallibly");
    out.push(b'\n');
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntrinsicsDoc {
    pub schema_version: u32,
    pub intrinsics: CameraIntrinsics,
}

impl IntrinsicsDoc {
    pub fn new(intrinsics: CameraIntrinsics) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            intrinsics,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlaneRecord {
    pub normal: [f64; 3],
    pub offset: f64,
    pub pixel_count: usize,
    /// Fraction of raster pixels carrying this plane's label.
    pub score: f64,
}

/// Camera-frame planes; record `i` belongs to label `i + 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanesDoc {
    pub schema_version: u32,
    pub planes: Vec<PlaneRecord>,
}

impl PlanesDoc {
    pub fn from_segmentation(seg: &PlaneSegmentation) -> Self {
        let counts = seg.pixel_counts();
        let total = seg.labels.len().max(1) as f64;
        let planes = seg
            .planes
            .iter()
            .zip(&counts[1..])
            .map(|(p, &count)| PlaneRecord {
                normal: p.normal.into(),
                offset: p.offset,
                pixel_count: count,
                score: count as f64 / total,
            })
            .collect();
        Self {
            schema_version: SCHEMA_VERSION,
            planes,
        }
    }

    pub fn plane_models(&self) -> Vec<PlaneModel> {
        self.planes
            .iter()
            .map(|r| {
                let n = Vector3::from(r.normal);
                PlaneModel::new(n, r.offset, n)
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GlobalPlaneRecord {
    pub normal: [f64; 3],
    pub offset: f64,
    pub pixel_count: usize,
    pub score: f64,
    /// `[view_id, instance_id]` pairs fused into this plane.
    pub sources: Vec<[u32; 2]>,
}

/// World-frame planes of a two-view reconstruction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GlobalPlanesDoc {
    pub schema_version: u32,
    pub planes: Vec<GlobalPlaneRecord>,
}

impl GlobalPlanesDoc {
    /// `pixel_counts[i]` is the summed mask size of plane `i` over both views.
    pub fn new(planes: &[GlobalPlane], pixel_counts: &[usize], total_pixels: usize) -> Self {
        let total = total_pixels.max(1) as f64;
        let planes = planes
            .iter()
            .zip(pixel_counts)
            .map(|(p, &count)| GlobalPlaneRecord {
                normal: p.normal.into(),
                offset: p.offset,
                pixel_count: count,
                score: count as f64 / total,
                sources: p.source.iter().map(|&(v, i)| [v, i]).collect(),
            })
            .collect();
        Self {
            schema_version: SCHEMA_VERSION,
            planes,
        }
    }
}

/// World-to-camera transform `x_cam = R x_world + t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseRecord {
    pub view_id: u32,
    /// Row-major.
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
}

impl PoseRecord {
    pub fn new(view_id: u32, rotation: &Matrix3<f64>, translation: &Vector3<f64>) -> Self {
        let mut rows = [[0.0; 3]; 3];
        for (r, row) in rows.iter_mut().enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = rotation[(r, c)];
            }
        }
        Self {
            view_id,
            rotation: rows,
            translation: (*translation).into(),
        }
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        Matrix3::from_fn(|r, c| self.rotation[r][c])
    }

    pub fn translation(&self) -> Vector3<f64> {
        Vector3::from(self.translation)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PosesDoc {
    pub schema_version: u32,
    pub views: Vec<PoseRecord>,
}

impl PosesDoc {
    pub fn new(views: Vec<PoseRecord>) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            views,
        }
    }

    pub fn pose(&self, view_id: u32) -> Option<&PoseRecord> {
        self.views.iter().find(|v| v.view_id == view_id)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KeypointRecord {
    pub x: f64,
    pub y: f64,
    pub track_id: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViewTracks {
    pub view_id: u32,
    pub keypoints: Vec<KeypointRecord>,
}

impl ViewTracks {
    pub fn new(view_id: u32, keypoints: &[Keypoint]) -> Self {
        Self {
            view_id,
            keypoints: keypoints
                .iter()
                .map(|k| KeypointRecord {
                    x: k.x,
                    y: k.y,
                    track_id: k.track_id,
                })
                .collect(),
        }
    }

    pub fn keypoints(&self) -> Vec<Keypoint> {
        self.keypoints
            .iter()
            .map(|k| Keypoint {
                x: k.x,
                y: k.y,
                track_id: k.track_id,
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TracksDoc {
    pub schema_version: u32,
    pub views: Vec<ViewTracks>,
}

impl TracksDoc {
    pub fn new(views: Vec<ViewTracks>) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            views,
        }
    }

    pub fn keypoints(&self, view_id: u32) -> Vec<Keypoint> {
        self.views
            .iter()
            .find(|v| v.view_id == view_id)
            .map(ViewTracks::keypoints)
            .unwrap_or_default()
    }
}

versioned!(
    IntrinsicsDoc,
    PlanesDoc,
    GlobalPlanesDoc,
    PosesDoc,
    TracksDoc
);

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wrong_version_and_unknown_keys_are_rejected() {
        let doc = br#"{"schema_version": 2, "planes": []}"#;
        assert!(matches!(
            from_json::<PlanesDoc>(doc),
            Err(IoError::Schema(2))
        ));
        let doc = br#"{"schema_version": 1, "planes": [], "extra": 0}"#;
        assert!(from_json::<PlanesDoc>(doc).is_err());
    }

    #[test]
    fn planes_doc_counts_pixels_per_label() {
        let p = PlaneModel::new(Vector3::z(), 2.0, Vector3::z());
        let seg = PlaneSegmentation::new(2, 2, vec![0, 1, 1, 2], vec![p, p]).unwrap();
        let doc = PlanesDoc::from_segmentation(&seg);
        assert_eq!(doc.planes[0].pixel_count, 2);
        assert_eq!(doc.planes[1].pixel_count, 1);
        assert_eq!(doc.planes[0].score, 0.5);
        let back: PlanesDoc = from_json(&to_json(&doc)).unwrap();
        assert_eq!(back, doc);
    }

    #[test]
    fn pose_matrix_is_row_major() {
        let r = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        let rec = PoseRecord::new(3, &r, &Vector3::new(1.0, 2.0, 3.0));
        assert_eq!(rec.rotation[0], [0.0, -1.0, 0.0]);
        assert_eq!(rec.rotation(), r);
    }
}
