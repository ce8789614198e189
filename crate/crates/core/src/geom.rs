//! Camera model, depth unprojection, cloud normalization and plane fitting.

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::raster::{ColorImage, DepthMap, NormalMap};

pub type Vec3 = Vector3<f64>;

/// Triangle area below which a 3-point sample is treated as collinear.
pub const COLLINEAR_AREA_TOLERANCE: f64 = 1e-12;

/// |offset| at or below this is treated as a plane through the origin when
/// choosing the normal's sign.
const ZERO_OFFSET_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum GeomError {
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("raster dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("no pixel is valid in both depth and normals")]
    NoValidPixels,
    #[error("point cloud is empty")]
    EmptyCloud,
    #[error("all points coincide; cannot normalize")]
    DegenerateCloud,
    #[error("minimal sample is collinear (area {0:e})")]
    DegenerateSample(f64),
    #[error("point subset is rank deficient ({0} points)")]
    RankDeficient(usize),
}

/// Pinhole intrinsics; pixel `(u, v)` = (column, row).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
    ) -> Result<Self, GeomError> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<(), GeomError> {
        let finite = [self.fx, self.fy, self.cx, self.cy]
            .iter()
            .all(|v| v.is_finite());
        if !finite || self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(GeomError::InvalidIntrinsics(format!(
                "focal lengths must be finite and positive (fx={}, fy={})",
                self.fx, self.fy
            )));
        }
        if !(self.cx > 0.0 && self.cx < self.width as f64) {
            return Err(GeomError::InvalidIntrinsics(format!(
                "cx={} outside (0, {})",
                self.cx, self.width
            )));
        }
        if !(self.cy > 0.0 && self.cy < self.height as f64) {
            return Err(GeomError::InvalidIntrinsics(format!(
                "cy={} outside (0, {})",
                self.cy, self.height
            )));
        }
        Ok(())
    }

    /// Ray `K^-1 (u, v, 1)` through a pixel; its z component is 1.
    #[inline]
    pub fn ray(&self, u: f64, v: f64) -> Vec3 {
        Vec3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0)
    }

    /// Projects a camera-frame point to continuous pixel coordinates.
    #[inline]
    pub fn project(&self, p: &Vec3) -> Option<(f64, f64)> {
        if p.z <= 0.0 {
            return None;
        }
        Some((self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy))
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }
}

/// Translation + isotropic scale applied during normalization:
/// `normalized = (camera - centroid) / scale`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormTransform {
    pub centroid: [f64; 3],
    pub scale: f64,
}

impl NormTransform {
    pub fn identity() -> Self {
        Self {
            centroid: [0.0; 3],
            scale: 1.0,
        }
    }

    pub fn centroid(&self) -> Vec3 {
        Vec3::from(self.centroid)
    }

    pub fn forward(&self, p: &Vec3) -> Vec3 {
        (p - self.centroid()) / self.scale
    }

    pub fn inverse(&self, p: &Vec3) -> Vec3 {
        p * self.scale + self.centroid()
    }

    /// Maps a plane fitted in normalized coordinates back to the source frame.
    pub fn plane_to_source(&self, plane: &PlaneModel) -> PlaneModel {
        let offset = self.scale * plane.offset + plane.normal.dot(&self.centroid());
        PlaneModel::new(plane.normal, offset, plane.model_normal)
    }

    /// Maps a source-frame plane into normalized coordinates.
    pub fn plane_to_normalized(&self, plane: &PlaneModel) -> PlaneModel {
        let offset = (plane.offset - plane.normal.dot(&self.centroid())) / self.scale;
        PlaneModel::new(plane.normal, offset, plane.model_normal)
    }
}

/// 3D points with color, monocular normal and source pixel per point.
#[derive(Debug, Clone, PartialEq)]
pub struct OrientedPointCloud {
    pub points: Vec<Vec3>,
    pub colors: Vec<Vec3>,
    pub normals: Vec<Vec3>,
    /// Source pixel as (row, col).
    pub pixels: Vec<(u32, u32)>,
    pub norm_transform: NormTransform,
    pub width: usize,
    pub height: usize,
    /// Pixel sampling stride used during unprojection.
    pub stride: usize,
}

impl OrientedPointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Raster index of point `i`'s source pixel.
    #[inline]
    pub fn pixel_index(&self, i: usize) -> usize {
        let (r, c) = self.pixels[i];
        r as usize * self.width + c as usize
    }
}

/// Plane `normal · x = offset` plus the representative monocular normal of
/// the sample that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlaneModel {
    pub normal: Vec3,
    pub offset: f64,
    pub model_normal: Vec3,
}

impl PlaneModel {
    /// Builds a sign-normalized plane. `normal` and `model_normal` are
    /// renormalized; a zero `model_normal` falls back to the plane normal.
    pub fn new(normal: Vec3, offset: f64, model_normal: Vec3) -> Self {
        let norm = normal.norm();
        let (mut n, mut d) = (normal / norm, offset / norm);
        if d < -ZERO_OFFSET_TOLERANCE
            || (d.abs() <= ZERO_OFFSET_TOLERANCE && !first_nonzero_positive(&n))
        {
            n = -n;
            d = -d;
        }
        if d.abs() <= ZERO_OFFSET_TOLERANCE {
            d = d.abs();
        }
        let mn = model_normal.norm();
        let model_normal = if mn > 0.0 && mn.is_finite() {
            model_normal / mn
        } else {
            n
        };
        Self {
            normal: n,
            offset: d,
            model_normal,
        }
    }

    pub fn with_model_normal(mut self, model_normal: Vec3) -> Self {
        let mn = model_normal.norm();
        if mn > 0.0 && mn.is_finite() {
            self.model_normal = model_normal / mn;
        }
        self
    }

    /// Depth at which the pixel ray `ray` (z = 1) meets this plane.
    #[inline]
    pub fn depth_along(&self, ray: &Vec3) -> Option<f64> {
        let denom = self.normal.dot(ray);
        if denom.abs() < 1e-12 {
            return None;
        }
        let z = self.offset / denom;
        (z.is_finite() && z > 0.0).then_some(z)
    }
}

fn first_nonzero_positive(n: &Vec3) -> bool {
    for &c in n.iter() {
        if c != 0.0 {
            return c > 0.0;
        }
    }
    true
}

/// One point per pixel valid in both depth and normal maps:
/// `point = depth * K^-1 (u, v, 1)`. The cloud is left unnormalized.
pub fn unproject(
    depth: &DepthMap,
    intrinsics: &CameraIntrinsics,
    rgb: &ColorImage,
    normals: &NormalMap,
) -> Result<OrientedPointCloud, GeomError> {
    unproject_strided(depth, intrinsics, rgb, normals, 1)
}

/// [`unproject`] keeping every `stride`-th pixel along both image axes.
pub fn unproject_strided(
    depth: &DepthMap,
    intrinsics: &CameraIntrinsics,
    rgb: &ColorImage,
    normals: &NormalMap,
    stride: usize,
) -> Result<OrientedPointCloud, GeomError> {
    let (w, h) = (intrinsics.width, intrinsics.height);
    if !depth.same_shape(w, h) || !rgb.same_shape(w, h) || !normals.same_shape(w, h) {
        return Err(GeomError::DimensionMismatch(format!(
            "intrinsics {}x{}, depth {}x{}, rgb {}x{}, normals {}x{}",
            w,
            h,
            depth.width(),
            depth.height(),
            rgb.width(),
            rgb.height(),
            normals.width(),
            normals.height()
        )));
    }
    let stride = stride.max(1);
    let mut cloud = OrientedPointCloud {
        points: Vec::new(),
        colors: Vec::new(),
        normals: Vec::new(),
        pixels: Vec::new(),
        norm_transform: NormTransform::identity(),
        width: w,
        height: h,
        stride,
    };
    for row in (0..h).step_by(stride) {
        for col in (0..w).step_by(stride) {
            let idx = row * w + col;
            let (Some(z), Some(n)) = (depth.valid(idx), normals.get(idx)) else {
                continue;
            };
            let p = intrinsics.ray(col as f64, row as f64) * z;
            let c = rgb.get(idx);
            cloud.points.push(p);
            cloud.colors.push(Vec3::new(c[0], c[1], c[2]));
            cloud.normals.push(n);
            cloud.pixels.push((row as u32, col as u32));
        }
    }
    if cloud.is_empty() {
        return Err(GeomError::NoValidPixels);
    }
    Ok(cloud)
}

/// Translates the cloud to zero centroid and scales it so the farthest
/// point lies on the unit sphere. Any previous transform is composed.
pub fn normalize_cloud(mut cloud: OrientedPointCloud) -> Result<OrientedPointCloud, GeomError> {
    if cloud.is_empty() {
        return Err(GeomError::EmptyCloud);
    }
    let n = cloud.len() as f64;
    let centroid = cloud.points.iter().fold(Vec3::zeros(), |acc, p| acc + p) / n;
    let max_dist = cloud
        .points
        .iter()
        .map(|p| (p - centroid).norm())
        .fold(0.0_f64, f64::max);
    if !(max_dist > 0.0) {
        return Err(GeomError::DegenerateCloud);
    }
    for p in cloud.points.iter_mut() {
        *p = (*p - centroid) / max_dist;
    }
    let prev = cloud.norm_transform;
    cloud.norm_transform = NormTransform {
        centroid: (prev.centroid() + centroid * prev.scale).into(),
        scale: prev.scale * max_dist,
    };
    Ok(cloud)
}

/// Plane through three points. `model_normal` is set to the plane normal;
/// callers that track monocular normals override it.
pub fn plane_from_minimal(sample: [Vec3; 3]) -> Result<PlaneModel, GeomError> {
    let [a, b, c] = sample;
    let cross = (b - a).cross(&(c - a));
    let area = 0.5 * cross.norm();
    if !(area >= COLLINEAR_AREA_TOLERANCE) {
        return Err(GeomError::DegenerateSample(area));
    }
    let n = cross / cross.norm();
    let plane = PlaneModel::new(n, n.dot(&a), n);
    Ok(PlaneModel {
        model_normal: plane.normal,
        ..plane
    })
}

/// Total-least-squares plane: the normal is the eigenvector of the centered
/// covariance with the smallest eigenvalue.
pub fn plane_from_inliers<'a, I>(points: I) -> Result<PlaneModel, GeomError>
where
    I: IntoIterator<Item = &'a Vec3>,
    I::IntoIter: Clone,
{
    let iter = points.into_iter();
    let (count, sum) = iter
        .clone()
        .fold((0usize, Vec3::zeros()), |(k, s), p| (k + 1, s + p));
    if count < 3 {
        return Err(GeomError::RankDeficient(count));
    }
    let centroid = sum / count as f64;
    let mut cov = Matrix3::zeros();
    for p in iter {
        let d = p - centroid;
        cov += d * d.transpose();
    }
    let eig = SymmetricEigen::new(cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
    let (small, mid, large) = (
        eig.eigenvalues[order[0]],
        eig.eigenvalues[order[1]],
        eig.eigenvalues[order[2]],
    );
    if !(large > 0.0) || mid <= 1e-14 * large || !small.is_finite() {
        return Err(GeomError::RankDeficient(count));
    }
    let n: Vec3 = eig.eigenvectors.column(order[0]).into_owned();
    let plane = PlaneModel::new(n, n.dot(&centroid), n);
    Ok(PlaneModel {
        model_normal: plane.normal,
        ..plane
    })
}

#[inline]
pub fn point_plane_distance(point: &Vec3, plane: &PlaneModel) -> f64 {
    (plane.normal.dot(point) - plane.offset).abs()
}

/// Angle in degrees between a point's normal and the plane's model normal.
#[inline]
pub fn normal_angle_error(point_normal: &Vec3, plane: &PlaneModel) -> f64 {
    angle_between_deg(point_normal, &plane.model_normal)
}

/// Angle in degrees between two unit vectors.
#[inline]
pub fn angle_between_deg(a: &Vec3, b: &Vec3) -> f64 {
    a.dot(b).clamp(-1.0, 1.0).acos().to_degrees()
}

/// Mean of unit vectors, renormalized; `None` when they cancel out.
pub fn mean_direction<'a, I: IntoIterator<Item = &'a Vec3>>(vectors: I) -> Option<Vec3> {
    let sum = vectors.into_iter().fold(Vec3::zeros(), |acc, v| acc + v);
    let norm = sum.norm();
    (norm > 1e-12).then(|| sum / norm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Rotation3;
    use proptest::prelude::*;

    fn intrinsics() -> CameraIntrinsics {
        CameraIntrinsics::new(100.0, 110.0, 2.0, 1.5, 4, 4).unwrap()
    }

    fn flat_inputs(w: usize, h: usize, depth: Vec<f64>) -> (DepthMap, ColorImage, NormalMap) {
        (
            DepthMap::new(w, h, depth).unwrap(),
            ColorImage::filled(w, h, [0.5, 0.25, 1.0]),
            NormalMap::from_vectors(w, h, vec![Vec3::z(); w * h]).unwrap(),
        )
    }

    #[test]
    fn principal_point_lies_on_optical_axis() {
        let k = CameraIntrinsics::new(50.0, 50.0, 2.0, 1.0, 5, 3).unwrap();
        let mut depth = vec![0.0; 15];
        depth[5 + 2] = 2.0;
        let (d, rgb, n) = flat_inputs(5, 3, depth);
        let cloud = unproject(&d, &k, &rgb, &n).unwrap();
        assert_eq!(cloud.len(), 1);
        assert_eq!(cloud.points[0], Vec3::new(0.0, 0.0, 2.0));
        assert_eq!(cloud.norm_transform, NormTransform::identity());
    }

    #[test]
    fn identity_like_intrinsics() {
        // cx, cy must be strictly inside the image, so emulate cx = cy = 0 by
        // shifting: pixel (2,2) with cx = cy = 1 behaves like pixel (1,1).
        let k = CameraIntrinsics::new(1.0, 1.0, 1.0, 1.0, 3, 3).unwrap();
        let mut depth = vec![0.0; 9];
        depth[2 * 3 + 2] = 1.0;
        let (d, rgb, n) = flat_inputs(3, 3, depth);
        let cloud = unproject(&d, &k, &rgb, &n).unwrap();
        assert_eq!(cloud.points[0], Vec3::new(1.0, 1.0, 1.0));
    }

    #[test]
    fn unproject_matches_matrix_oracle() {
        let k = intrinsics();
        let depth: Vec<f64> = (0..16)
            .map(|i| 0.5 + (i as f64 * 0.37).sin().abs() * 3.0)
            .collect();
        let (d, rgb, n) = flat_inputs(4, 4, depth.clone());
        let cloud = unproject(&d, &k, &rgb, &n).unwrap();
        let kmat = Matrix3::new(k.fx, 0.0, k.cx, 0.0, k.fy, k.cy, 0.0, 0.0, 1.0);
        let kinv = kmat.try_inverse().unwrap();
        assert_eq!(cloud.len(), 16);
        for (i, p) in cloud.points.iter().enumerate() {
            let (r, c) = (i / 4, i % 4);
            let expect = kinv * Vec3::new(c as f64, r as f64, 1.0) * depth[i];
            assert!((p - expect).norm() < 1e-12);
        }
    }

    #[test]
    fn unproject_errors() {
        let k = intrinsics();
        let (d, rgb, n) = flat_inputs(4, 4, vec![0.0; 16]);
        assert_eq!(unproject(&d, &k, &rgb, &n), Err(GeomError::NoValidPixels));
        let small = DepthMap::filled(3, 4, 1.0);
        assert!(matches!(
            unproject(&small, &k, &rgb, &n),
            Err(GeomError::DimensionMismatch(_))
        ));
    }

    #[test]
    fn invalid_intrinsics_rejected() {
        assert!(CameraIntrinsics::new(0.0, 1.0, 1.0, 1.0, 2, 2).is_err());
        assert!(CameraIntrinsics::new(1.0, 1.0, 0.0, 1.0, 2, 2).is_err());
        assert!(CameraIntrinsics::new(1.0, 1.0, 1.0, 2.0, 2, 2).is_err());
    }

    fn cloud_of(points: Vec<Vec3>) -> OrientedPointCloud {
        let n = points.len();
        OrientedPointCloud {
            colors: vec![Vec3::zeros(); n],
            normals: vec![Vec3::z(); n],
            pixels: (0..n as u32).map(|i| (0, i)).collect(),
            points,
            norm_transform: NormTransform::identity(),
            width: n,
            height: 1,
            stride: 1,
        }
    }

    #[test]
    fn normalize_symmetric_pair() {
        let c = normalize_cloud(cloud_of(vec![Vec3::zeros(), Vec3::new(0.0, 0.0, 2.0)])).unwrap();
        assert_eq!(c.points[0], Vec3::new(0.0, 0.0, -1.0));
        assert_eq!(c.points[1], Vec3::new(0.0, 0.0, 1.0));
        assert_eq!(c.norm_transform.scale, 1.0);
        assert_eq!(c.norm_transform.centroid, [0.0, 0.0, 1.0]);
    }

    #[test]
    fn normalize_is_idempotent_on_normalized_input() {
        let pts = vec![
            Vec3::new(1.0, 0.0, 0.0),
            Vec3::new(-1.0, 0.0, 0.0),
            Vec3::new(0.0, 0.5, 0.0),
            Vec3::new(0.0, -0.5, 0.0),
        ];
        let c = normalize_cloud(cloud_of(pts.clone())).unwrap();
        for (a, b) in c.points.iter().zip(&pts) {
            assert!((a - b).norm() < 1e-12);
        }
    }

    #[test]
    fn normalize_degenerate_and_empty() {
        let same = cloud_of(vec![Vec3::new(1.0, 2.0, 3.0); 3]);
        assert_eq!(normalize_cloud(same), Err(GeomError::DegenerateCloud));
        assert_eq!(
            normalize_cloud(cloud_of(vec![])),
            Err(GeomError::EmptyCloud)
        );
    }

    #[test]
    fn minimal_plane_examples() {
        let p = plane_from_minimal([
            Vec3::new(0.0, 0.0, 1.0),
            Vec3::new(1.0, 0.0, 1.0),
            Vec3::new(0.0, 1.0, 1.0),
        ])
        .unwrap();
        assert!((p.normal - Vec3::z()).norm() < 1e-15);
        assert!((p.offset - 1.0).abs() < 1e-15);

        let p = plane_from_minimal([Vec3::zeros(), Vec3::x(), Vec3::y()]).unwrap();
        assert_eq!(p.offset, 0.0);
        assert!((p.normal.z.abs() - 1.0).abs() < 1e-15);
        // sign rule: first nonzero component positive when offset is zero
        assert!(p.normal.z > 0.0);

        assert!(matches!(
            plane_from_minimal([Vec3::zeros(), Vec3::x(), Vec3::x() * 2.0]),
            Err(GeomError::DegenerateSample(_))
        ));
    }

    #[test]
    fn inlier_plane_examples() {
        let pts = [
            Vec3::new(0.0, 0.0, 2.0),
            Vec3::new(1.0, 0.0, 2.0),
            Vec3::new(0.0, 1.0, 2.0),
            Vec3::new(1.0, 1.0, 2.0),
        ];
        let p = plane_from_inliers(pts.iter()).unwrap();
        assert!((p.normal - Vec3::z()).norm() < 1e-12);
        assert!((p.offset - 2.0).abs() < 1e-12);

        let tri = [
            Vec3::new(0.3, -0.2, 1.0),
            Vec3::new(1.1, 0.4, 0.7),
            Vec3::new(-0.5, 0.9, 1.6),
        ];
        let a = plane_from_inliers(tri.iter()).unwrap();
        let b = plane_from_minimal(tri).unwrap();
        assert!((a.normal - b.normal).norm() < 1e-9);
        assert!((a.offset - b.offset).abs() < 1e-9);

        assert!(matches!(
            plane_from_inliers([Vec3::zeros(), Vec3::x()].iter()),
            Err(GeomError::RankDeficient(2))
        ));
        let line: Vec<Vec3> = (0..5).map(|i| Vec3::x() * i as f64).collect();
        assert!(matches!(
            plane_from_inliers(line.iter()),
            Err(GeomError::RankDeficient(5))
        ));
    }

    #[test]
    fn symmetric_noise_cancels() {
        // 50 points at z = 1 + delta and their mirror at z = 1 - delta.
        let delta = 0.01;
        let mut pts = Vec::new();
        for i in 0..50 {
            let x = (i % 10) as f64 * 0.1;
            let y = (i / 10) as f64 * 0.2;
            pts.push(Vec3::new(x, y, 1.0 + delta));
            pts.push(Vec3::new(x, y, 1.0 - delta));
        }
        let p = plane_from_inliers(pts.iter()).unwrap();
        // Oracle: SVD of the centered data matrix.
        let c = pts.iter().fold(Vec3::zeros(), |a, p| a + p) / pts.len() as f64;
        let m = nalgebra::DMatrix::from_fn(pts.len(), 3, |r, k| pts[r][k] - c[k]);
        let svd = m.svd(false, true);
        let vt = svd.v_t.unwrap();
        let smallest = (0..3)
            .min_by(|&a, &b| svd.singular_values[a].total_cmp(&svd.singular_values[b]))
            .unwrap();
        let n_svd = Vec3::new(vt[(smallest, 0)], vt[(smallest, 1)], vt[(smallest, 2)]);
        assert!(p.normal.dot(&n_svd).abs() > 1.0 - 1e-12);
        assert!((p.offset - 1.0).abs() < 1e-6);
    }

    #[test]
    fn distance_and_angle_examples() {
        let z1 = PlaneModel::new(Vec3::z(), 1.0, Vec3::z());
        assert_eq!(point_plane_distance(&Vec3::new(3.0, -2.0, 1.0), &z1), 0.0);
        assert_eq!(point_plane_distance(&Vec3::new(0.0, 0.0, 3.0), &z1), 2.0);
        assert_eq!(normal_angle_error(&Vec3::z(), &z1), 0.0);
        assert!((normal_angle_error(&Vec3::x(), &z1) - 90.0).abs() < 1e-12);
        let ten = 10f64.to_radians();
        let n = Vec3::new(ten.sin(), 0.0, ten.cos());
        assert!((normal_angle_error(&n, &z1) - 10.0).abs() < 1e-9);
    }

    #[test]
    fn norm_transform_round_trips_planes() {
        let t = NormTransform {
            centroid: [0.3, -1.0, 2.5],
            scale: 3.7,
        };
        let p = PlaneModel::new(Vec3::new(0.2, 0.3, 0.9), 1.4, Vec3::z());
        let q = t.plane_to_source(&t.plane_to_normalized(&p));
        assert!((p.normal - q.normal).norm() < 1e-12);
        assert!((p.offset - q.offset).abs() < 1e-12);
    }

    fn vec3() -> impl Strategy<Value = Vec3> {
        (-5.0..5.0f64, -5.0..5.0f64, -5.0..5.0f64).prop_map(|(x, y, z)| Vec3::new(x, y, z))
    }

    fn unit() -> impl Strategy<Value = Vec3> {
        vec3()
            .prop_filter("nonzero", |v| v.norm() > 1e-3)
            .prop_map(|v| v.normalize())
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn unproject_project_round_trip(
            col in 0usize..16, row in 0usize..12, z in 0.1..20.0f64,
            fx in 50.0..500.0f64, fy in 50.0..500.0f64,
        ) {
            let k = CameraIntrinsics::new(fx, fy, 7.5, 5.5, 16, 12).unwrap();
            let p = k.ray(col as f64, row as f64) * z;
            let (u, v) = k.project(&p).unwrap();
            prop_assert!((u - col as f64).abs() < 1e-9);
            prop_assert!((v - row as f64).abs() < 1e-9);
        }

        #[test]
        fn normalized_cloud_in_unit_ball(pts in proptest::collection::vec(vec3(), 2..40)) {
            prop_assume!(pts.iter().any(|p| (p - pts[0]).norm() > 1e-6));
            let c = normalize_cloud(cloud_of(pts)).unwrap();
            let centroid = c.points.iter().fold(Vec3::zeros(), |a, p| a + p) / c.len() as f64;
            let max = c.points.iter().map(|p| p.norm()).fold(0.0, f64::max);
            prop_assert!(centroid.norm() < 1e-10);
            prop_assert!((max - 1.0).abs() < 1e-10);
        }

        #[test]
        fn normalization_scales_plane_distances(
            pts in proptest::collection::vec(vec3(), 3..30),
            n in unit(), d in -3.0..3.0f64, q in vec3(),
        ) {
            prop_assume!(pts.iter().any(|p| (p - pts[0]).norm() > 1e-3));
            let plane = PlaneModel::new(n, d, n);
            let c = normalize_cloud(cloud_of(pts.clone())).unwrap();
            let t = c.norm_transform;
            let pn = t.plane_to_normalized(&plane);
            let before = point_plane_distance(&q, &plane);
            let after = point_plane_distance(&t.forward(&q), &pn);
            prop_assert!((after - before / t.scale).abs() < 1e-9);
        }

        #[test]
        fn inlier_fit_is_rotation_equivariant(
            pts in proptest::collection::vec(vec3(), 4..30),
            axis in unit(), angle in -3.0..3.0f64,
        ) {
            let Ok(p) = plane_from_inliers(pts.iter()) else { return Ok(()); };
            // Require a well-separated smallest eigenvalue so the normal is
            // determined; otherwise any rotation of a near-tie is valid.
            let c = pts.iter().fold(Vec3::zeros(), |a, x| a + x) / pts.len() as f64;
            let mut cov = Matrix3::zeros();
            for x in &pts { let dx = x - c; cov += dx * dx.transpose(); }
            let mut ev: Vec<f64> = SymmetricEigen::new(cov).eigenvalues.iter().copied().collect();
            ev.sort_by(f64::total_cmp);
            prop_assume!(ev[1] - ev[0] > 1e-3 * ev[2]);
            let rot = Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(axis), angle);
            let rotated: Vec<Vec3> = pts.iter().map(|x| rot * x).collect();
            let q = plane_from_inliers(rotated.iter()).unwrap();
            let expect = rot * p.normal;
            prop_assert!(q.normal.dot(&expect).abs() > 1.0 - 1e-9);
        }

        #[test]
        fn distance_matches_formula_and_sign_flip(n in unit(), d in -3.0..3.0f64, x in vec3()) {
            let a = PlaneModel::new(n, d, n);
            let b = PlaneModel::new(-n, -d, n);
            let expect = (n.dot(&x) - d).abs();
            prop_assert!((point_plane_distance(&x, &a) - expect).abs() < 1e-12);
            prop_assert!((point_plane_distance(&x, &b) - expect).abs() < 1e-12);
            prop_assert!(a.offset >= 0.0);
        }

        #[test]
        fn minimal_plane_contains_sample(a in vec3(), b in vec3(), c in vec3()) {
            if let Ok(p) = plane_from_minimal([a, b, c]) {
                for x in [a, b, c] {
                    prop_assert!(point_plane_distance(&x, &p) < 1e-9);
                }
                prop_assert!(p.offset >= 0.0);
                prop_assert!((p.normal.norm() - 1.0).abs() < 1e-9);
            }
        }
    }
}
