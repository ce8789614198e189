//! Sparse-view extension: per-view depth scale alignment against SfM depth,
//! cross-view plane matching and pairwise plane fusion.

use std::collections::{BTreeSet, HashMap};

use nalgebra::{Matrix3, SymmetricEigen};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crf::PlaneSegmentation;
use crate::geom::{CameraIntrinsics, NormTransform, PlaneModel, Vec3};
use crate::raster::DepthMap;

#[derive(Debug, Error, PartialEq)]
pub enum SparseError {
    #[error("no pixel is valid in both depth maps")]
    NoJointPixels,
    #[error("monocular depth is zero on every joint pixel")]
    DegenerateMonocular,
    #[error("depth maps differ in shape")]
    DimensionMismatch,
    #[error("rotation is not a proper orthonormal matrix (error {0:.3e})")]
    BadRotation(f64),
    #[error("sparse depth has negative or non-finite entries")]
    BadSparseDepth,
    #[error("normals are orthogonal; the fused direction is ambiguous")]
    AmbiguousFusion,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    /// Column.
    pub x: f64,
    /// Row.
    pub y: f64,
    pub track_id: u64,
}

impl Keypoint {
    fn pixel(&self, width: usize, height: usize) -> Option<usize> {
        let (c, r) = (self.x.round(), self.y.round());
        (c >= 0.0 && r >= 0.0 && (c as usize) < width && (r as usize) < height)
            .then(|| r as usize * width + c as usize)
    }
}

/// A calibrated view. `rotation` and `translation` map world points into
/// the camera: `x_cam = R x_world + t`.
#[derive(Debug, Clone, PartialEq)]
pub struct PosedView {
    pub view_id: u32,
    pub intrinsics: CameraIntrinsics,
    pub rotation: Matrix3<f64>,
    pub translation: Vec3,
    pub sparse_depth: DepthMap,
    pub keypoints: Vec<Keypoint>,
}

const ROTATION_TOLERANCE: f64 = 1e-6;

impl PosedView {
    pub fn new(
        view_id: u32,
        intrinsics: CameraIntrinsics,
        rotation: Matrix3<f64>,
        translation: Vec3,
        sparse_depth: DepthMap,
        keypoints: Vec<Keypoint>,
    ) -> Result<Self, SparseError> {
        let view = Self {
            view_id,
            intrinsics,
            rotation,
            translation,
            sparse_depth,
            keypoints,
        };
        view.validate()?;
        Ok(view)
    }

    pub fn validate(&self) -> Result<(), SparseError> {
        let r = &self.rotation;
        let err = (r.transpose() * r - Matrix3::identity())
            .abs()
            .max()
            .max((r.determinant() - 1.0).abs());
        if !(err <= ROTATION_TOLERANCE) {
            return Err(SparseError::BadRotation(err));
        }
        if !self
            .sparse_depth
            .same_shape(self.intrinsics.width, self.intrinsics.height)
        {
            return Err(SparseError::DimensionMismatch);
        }
        if self
            .sparse_depth
            .values()
            .iter()
            .any(|&v| !(v >= 0.0) || !v.is_finite())
        {
            return Err(SparseError::BadSparseDepth);
        }
        Ok(())
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vec3 {
        -(self.rotation.transpose() * self.translation)
    }

    pub fn to_world(&self, p_cam: &Vec3) -> Vec3 {
        self.rotation.transpose() * (p_cam - self.translation)
    }

    pub fn to_camera(&self, p_world: &Vec3) -> Vec3 {
        self.rotation * p_world + self.translation
    }
}

/// A world-frame plane `normal · x = offset` with the instances it came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalPlane {
    pub normal: Vec3,
    pub offset: f64,
    /// `(view_id, instance_id)` of each contributing instance.
    pub source: Vec<(u32, u32)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MatchParams {
    /// Shared tracks must exceed this count.
    pub min_keypoint_matches: usize,
    /// Share of matched keypoints that must land in the partner mask.
    pub mutual_fraction: f64,
    pub reprojection_iou_threshold: f64,
}

impl Default for MatchParams {
    fn default() -> Self {
        Self {
            min_keypoint_matches: 10,
            mutual_fraction: 0.6,
            reprojection_iou_threshold: 0.5,
        }
    }
}

impl MatchParams {
    pub fn validate(&self) -> Result<(), String> {
        if self.min_keypoint_matches < 1 {
            return Err("min_keypoint_matches must be at least 1".into());
        }
        if !(self.mutual_fraction > 0.0 && self.mutual_fraction <= 1.0) {
            return Err("mutual_fraction must lie in (0, 1]".into());
        }
        if !(self.reprojection_iou_threshold > 0.0 && self.reprojection_iou_threshold <= 1.0) {
            return Err("reprojection_iou_threshold must lie in (0, 1]".into());
        }
        Ok(())
    }
}

/// Least-squares scale `s` minimizing `sum (D_s - s D_m)^2` over pixels valid
/// in both maps, and the rescaled monocular depth.
pub fn align_depth_scale(
    mono_depth: &DepthMap,
    sparse_depth: &DepthMap,
) -> Result<(f64, DepthMap), SparseError> {
    if !mono_depth.same_shape(sparse_depth.width(), sparse_depth.height()) {
        return Err(SparseError::DimensionMismatch);
    }
    let mut num = 0.0;
    let mut den = 0.0;
    let mut count = 0usize;
    for i in 0..mono_depth.len() {
        if let (Some(m), Some(s)) = (mono_depth.valid(i), sparse_depth.valid(i)) {
            num += s * m;
            den += m * m;
            count += 1;
        }
    }
    if count == 0 {
        return Err(SparseError::NoJointPixels);
    }
    if !(den > 0.0) {
        return Err(SparseError::DegenerateMonocular);
    }
    let s = num / den;
    Ok((s, mono_depth.scaled(s)))
}

/// Moves a plane from a view's normalized camera frame to the world frame.
pub fn plane_to_world(
    plane: &PlaneModel,
    view: &PosedView,
    norm_transform: &NormTransform,
    instance_id: u32,
) -> GlobalPlane {
    let cam = norm_transform.plane_to_source(plane);
    let r_t = view.rotation.transpose();
    let n_w = r_t * cam.normal;
    let d_w = cam.offset - cam.normal.dot(&view.translation);
    let p = PlaneModel::new(n_w, d_w, n_w);
    GlobalPlane {
        normal: p.normal,
        offset: p.offset,
        source: vec![(view.view_id, instance_id)],
    }
}

/// A world plane expressed in a view's metric camera frame.
pub fn plane_to_camera(plane: &GlobalPlane, view: &PosedView) -> PlaneModel {
    let n_c = view.rotation * plane.normal;
    let d_c = plane.offset + n_c.dot(&view.translation);
    PlaneModel::new(n_c, d_c, n_c)
}

/// Track ids of the view's keypoints grouped by the instance they fall in.
fn tracks_by_instance(seg: &PlaneSegmentation, view: &PosedView) -> HashMap<u32, BTreeSet<u64>> {
    let mut out: HashMap<u32, BTreeSet<u64>> = HashMap::new();
    for kp in &view.keypoints {
        if let Some(i) = kp.pixel(seg.width, seg.height) {
            let l = seg.labels[i];
            if l != 0 {
                out.entry(l).or_default().insert(kp.track_id);
            }
        }
    }
    out
}

/// For every pixel of view `b`, the instance of `seg_a` whose plane is seen
/// there first and whose mask in `a` contains the point (0 if none).
fn reproject_into(
    seg_a: &PlaneSegmentation,
    view_a: &PosedView,
    view_b: &PosedView,
    width_b: usize,
    height_b: usize,
) -> Vec<u32> {
    let ka = &view_a.intrinsics;
    let kb = &view_b.intrinsics;
    // Plane of each `a` instance in b's camera frame.
    let planes_b: Vec<PlaneModel> = seg_a
        .planes
        .iter()
        .map(|p| {
            let world = GlobalPlane {
                normal: view_a.rotation.transpose() * p.normal,
                offset: p.offset - p.normal.dot(&view_a.translation),
                source: Vec::new(),
            };
            plane_to_camera(&world, view_b)
        })
        .collect();
    let mut out = vec![0u32; width_b * height_b];
    for (i, slot) in out.iter_mut().enumerate() {
        let ray = kb.ray((i % width_b) as f64, (i / width_b) as f64);
        let mut best = f64::INFINITY;
        for (k, plane) in planes_b.iter().enumerate() {
            let Some(z) = plane.depth_along(&ray) else {
                continue;
            };
            if z >= best {
                continue;
            }
            let p_a = view_a.to_camera(&view_b.to_world(&(ray * z)));
            let Some((u, v)) = ka.project(&p_a) else {
                continue;
            };
            let (c, r) = (u.round(), v.round());
            if c < 0.0 || r < 0.0 || c as usize >= seg_a.width || r as usize >= seg_a.height {
                continue;
            }
            if seg_a.labels[r as usize * seg_a.width + c as usize] == k as u32 + 1 {
                best = z;
                *slot = k as u32 + 1;
            }
        }
    }
    out
}

/// Instance pairs `(a, b)` showing the same plane. Planes of both
/// segmentations must be metric and in their own camera frames.
pub fn match_planes(
    seg_a: &PlaneSegmentation,
    seg_b: &PlaneSegmentation,
    views: (&PosedView, &PosedView),
    params: &MatchParams,
) -> Vec<(u32, u32)> {
    let (view_a, view_b) = views;
    let tracks_a = tracks_by_instance(seg_a, view_a);
    let tracks_b = tracks_by_instance(seg_b, view_b);
    let all_a: BTreeSet<u64> = tracks_a.values().flatten().copied().collect();
    let all_b: BTreeSet<u64> = tracks_b.values().flatten().copied().collect();

    let warped = reproject_into(seg_a, view_a, view_b, seg_b.width, seg_b.height);
    let mut inter: HashMap<(u32, u32), usize> = HashMap::new();
    let mut size_a: HashMap<u32, usize> = HashMap::new();
    let mut size_b: HashMap<u32, usize> = HashMap::new();
    for (i, &a) in warped.iter().enumerate() {
        if a == 0 {
            continue;
        }
        let b = seg_b.labels[i];
        *size_a.entry(a).or_default() += 1;
        if b != 0 {
            *size_b.entry(b).or_default() += 1;
            *inter.entry((a, b)).or_default() += 1;
        }
    }
    let iou = |a: u32, b: u32| -> f64 {
        let i = inter.get(&(a, b)).copied().unwrap_or(0);
        if i == 0 {
            return 0.0;
        }
        i as f64 / (size_a[&a] + size_b[&b] - i) as f64
    };

    let mut candidates: Vec<(u32, u32, f64, usize)> = Vec::new();
    for a in 1..=seg_a.planes.len() as u32 {
        for b in 1..=seg_b.planes.len() as u32 {
            let ta = tracks_a.get(&a);
            let tb = tracks_b.get(&b);
            let shared = match (ta, tb) {
                (Some(ta), Some(tb)) => ta.intersection(tb).count(),
                _ => 0,
            };
            let keypoint_ok = shared > params.min_keypoint_matches && {
                let ta = ta.unwrap();
                let tb = tb.unwrap();
                let seen_a = ta.intersection(&all_b).count();
                let seen_b = tb.intersection(&all_a).count();
                shared as f64 > params.mutual_fraction * seen_a as f64
                    && shared as f64 > params.mutual_fraction * seen_b as f64
            };
            let overlap = iou(a, b);
            if keypoint_ok || overlap > params.reprojection_iou_threshold {
                candidates.push((a, b, overlap, shared));
            }
        }
    }
    candidates.sort_by(|x, y| {
        y.2.total_cmp(&x.2)
            .then(y.3.cmp(&x.3))
            .then(x.0.cmp(&y.0))
            .then(x.1.cmp(&y.1))
    });
    let mut used_a = BTreeSet::new();
    let mut used_b = BTreeSet::new();
    let mut out = Vec::new();
    for (a, b, _, _) in candidates {
        if used_a.contains(&a) || used_b.contains(&b) {
            continue;
        }
        used_a.insert(a);
        used_b.insert(b);
        out.push((a, b));
    }
    out.sort_unstable();
    out
}

/// Eigen-gap below which two normals count as orthogonal.
const FUSION_GAP_TOLERANCE: f64 = 1e-9;

/// The normal maximizing `(n·n_a)^2 + (n·n_b)^2` and the mean offset.
pub fn fuse_planes(a: &GlobalPlane, b: &GlobalPlane) -> Result<GlobalPlane, SparseError> {
    let m: Matrix3<f64> = a.normal * a.normal.transpose() + b.normal * b.normal.transpose();
    let eig = SymmetricEigen::new(m);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    if eig.eigenvalues[order[0]] - eig.eigenvalues[order[1]] < FUSION_GAP_TOLERANCE {
        return Err(SparseError::AmbiguousFusion);
    }
    let mut n: Vec3 = eig.eigenvectors.column(order[0]).into_owned().normalize();
    if n.dot(&(a.normal + b.normal)) < 0.0 {
        n = -n;
    }
    let mut source = a.source.clone();
    source.extend_from_slice(&b.source);
    Ok(GlobalPlane {
        normal: n,
        offset: 0.5 * (a.offset + b.offset),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Rotation3;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn intrinsics() -> CameraIntrinsics {
        CameraIntrinsics::new(30.0, 30.0, 16.0, 12.0, 32, 24).unwrap()
    }

    fn view(id: u32, rotation: Matrix3<f64>, translation: Vec3) -> PosedView {
        PosedView::new(
            id,
            intrinsics(),
            rotation,
            translation,
            DepthMap::filled(32, 24, 0.0),
            Vec::new(),
        )
        .unwrap()
    }

    fn random_rotation(rng: &mut ChaCha8Rng) -> Matrix3<f64> {
        let axis = Vec3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        Rotation3::new(axis.normalize() * rng.random_range(0.0..3.0)).into_inner()
    }

    #[test]
    fn scale_examples() {
        let m = DepthMap::new(3, 1, vec![1.0, 2.0, 0.0]).unwrap();
        let s = DepthMap::new(3, 1, vec![2.0, 4.0, 5.0]).unwrap();
        let (k, out) = align_depth_scale(&m, &s).unwrap();
        assert_eq!(k, 2.0);
        assert_eq!(out.values(), &[2.0, 4.0, 0.0]);
        let m = DepthMap::new(2, 1, vec![1.5, 1.0]).unwrap();
        let s = DepthMap::new(2, 1, vec![3.0, 0.0]).unwrap();
        assert_eq!(align_depth_scale(&m, &s).unwrap().0, 2.0);
        let none = DepthMap::filled(2, 1, 0.0);
        assert_eq!(
            align_depth_scale(&m, &none).unwrap_err(),
            SparseError::NoJointPixels
        );
    }

    fn residual(m: &[f64], s: &[f64], k: f64) -> f64 {
        m.iter()
            .zip(s)
            .filter(|(a, b)| **a > 0.0 && **b > 0.0)
            .map(|(a, b)| (b - k * a).powi(2))
            .sum()
    }

    #[test]
    fn scale_matches_golden_section_search() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let n = 60;
            let m: Vec<f64> = (0..n)
                .map(|_| {
                    if rng.random_bool(0.8) {
                        rng.random_range(0.2..5.0)
                    } else {
                        0.0
                    }
                })
                .collect();
            let s: Vec<f64> = (0..n)
                .map(|_| {
                    if rng.random_bool(0.3) {
                        rng.random_range(0.5..9.0)
                    } else {
                        0.0
                    }
                })
                .collect();
            let Ok((k, _)) = align_depth_scale(
                &DepthMap::new(n, 1, m.clone()).unwrap(),
                &DepthMap::new(n, 1, s.clone()).unwrap(),
            ) else {
                continue;
            };
            let (mut lo, mut hi) = (0.0f64, 50.0f64);
            let g = (5f64.sqrt() - 1.0) / 2.0;
            for _ in 0..200 {
                let x1 = hi - g * (hi - lo);
                let x2 = lo + g * (hi - lo);
                if residual(&m, &s, x1) < residual(&m, &s, x2) {
                    hi = x2;
                } else {
                    lo = x1;
                }
            }
            assert!(
                (k - 0.5 * (lo + hi)).abs() < 1e-6,
                "{k} vs {}",
                0.5 * (lo + hi)
            );
        }
    }

    #[test]
    fn planted_scales_are_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let truth: Vec<f64> = (0..400).map(|_| rng.random_range(0.5..8.0)).collect();
        let sparse: Vec<f64> = truth
            .iter()
            .map(|&t| if rng.random_bool(0.05) { t } else { 0.0 })
            .collect();
        for planted in [0.1, 1.0, 7.3] {
            let mono = DepthMap::new(400, 1, truth.iter().map(|t| t / planted).collect()).unwrap();
            let (s, _) =
                align_depth_scale(&mono, &DepthMap::new(400, 1, sparse.clone()).unwrap()).unwrap();
            assert!((s - planted).abs() < 1e-9);
        }
    }

    #[test]
    fn world_transport_examples() {
        let plane = PlaneModel::new(Vec3::new(0.0, 0.0, 1.0), 2.0, Vec3::z());
        let id = view(0, Matrix3::identity(), Vec3::zeros());
        let g = plane_to_world(&plane, &id, &NormTransform::identity(), 3);
        assert_eq!(
            (g.normal, g.offset, g.source.clone()),
            (Vec3::z(), 2.0, vec![(0, 3)])
        );
        // Camera shifted 0.5 toward the plane: x_cam = x_world - (0,0,0.5).
        let shifted = view(1, Matrix3::identity(), Vec3::new(0.0, 0.0, -0.5));
        let g = plane_to_world(&plane, &shifted, &NormTransform::identity(), 1);
        assert!((g.offset - 2.5).abs() < 1e-15);
    }

    #[test]
    fn world_plane_contains_transported_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..20 {
            let v = view(
                0,
                random_rotation(&mut rng),
                Vec3::new(
                    rng.random_range(-2.0..2.0),
                    rng.random_range(-2.0..2.0),
                    rng.random_range(-2.0..2.0),
                ),
            );
            let tr = NormTransform {
                centroid: [0.3, -0.2, 2.0],
                scale: 1.7,
            };
            let n = Vec3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                1.0,
            )
            .normalize();
            let plane = PlaneModel::new(n, rng.random_range(0.0..1.0), n);
            let g = plane_to_world(&plane, &v, &tr, 1);
            let (t1, t2) = (
                n.cross(&Vec3::x()).normalize(),
                n.cross(&n.cross(&Vec3::x())).normalize(),
            );
            for _ in 0..100 {
                let p_norm = plane.normal * plane.offset
                    + t1 * rng.random_range(-2.0..2.0)
                    + t2 * rng.random_range(-2.0..2.0);
                let p_world = v.to_world(&tr.inverse(&p_norm));
                assert!((g.normal.dot(&p_world) - g.offset).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn fusion_examples() {
        let a = GlobalPlane {
            normal: Vec3::z(),
            offset: 1.0,
            source: vec![(0, 1)],
        };
        let b = GlobalPlane {
            normal: Vec3::z(),
            offset: 3.0,
            source: vec![(1, 2)],
        };
        let f = fuse_planes(&a, &b).unwrap();
        assert!((f.normal - Vec3::z()).norm() < 1e-12);
        assert_eq!(f.offset, 2.0);
        assert_eq!(f.source, vec![(0, 1), (1, 2)]);

        let t = 10f64.to_radians();
        let b = GlobalPlane {
            normal: Vec3::new(t.sin(), 0.0, t.cos()),
            ..b
        };
        let f = fuse_planes(&a, &b).unwrap();
        let h = 5f64.to_radians();
        assert!((f.normal - Vec3::new(h.sin(), 0.0, h.cos())).norm() < 1e-9);

        let b = GlobalPlane {
            normal: Vec3::x(),
            ..b
        };
        assert_eq!(
            fuse_planes(&a, &b).unwrap_err(),
            SparseError::AmbiguousFusion
        );
    }

    /// Two planes split left/right in a 32x24 view, seen by both cameras.
    fn two_plane_setup(
        rng: &mut ChaCha8Rng,
        shift: f64,
    ) -> (PlaneSegmentation, PlaneSegmentation, PosedView, PosedView) {
        let k = intrinsics();
        let planes = [
            PlaneModel::new(Vec3::new(0.3, 0.0, 1.0), 3.0, Vec3::z()),
            PlaneModel::new(Vec3::new(-0.6, 0.0, 1.0), 3.0, Vec3::z()),
        ];
        let label_of = |c: f64| if c < 16.0 { 1u32 } else { 2 };
        let seg_for = |v: &PosedView| -> PlaneSegmentation {
            let mut labels = vec![0u32; 32 * 24];
            for (i, l) in labels.iter_mut().enumerate() {
                let ray = k.ray((i % 32) as f64, (i / 32) as f64);
                // Which world plane does the view see first, and which side is it on in view a?
                let mut best = (f64::INFINITY, 0);
                for (j, p) in planes.iter().enumerate() {
                    let world = GlobalPlane {
                        normal: p.normal,
                        offset: p.offset,
                        source: vec![],
                    };
                    let pc = plane_to_camera(&world, v);
                    if let Some(z) = pc.depth_along(&ray) {
                        let pw = v.to_world(&(ray * z));
                        let (u, _) = k.project(&pw).unwrap();
                        if label_of(u) == j as u32 + 1 && z < best.0 {
                            best = (z, j as u32 + 1);
                        }
                    }
                }
                *l = best.1;
            }
            let cams = planes
                .iter()
                .map(|p| {
                    plane_to_camera(
                        &GlobalPlane {
                            normal: p.normal,
                            offset: p.offset,
                            source: vec![],
                        },
                        v,
                    )
                })
                .collect();
            PlaneSegmentation::new(32, 24, labels, cams).unwrap()
        };
        let a = view(0, Matrix3::identity(), Vec3::zeros());
        let b = view(
            1,
            Rotation3::from_euler_angles(0.0, rng.random_range(-0.1..0.1), 0.0).into_inner(),
            Vec3::new(shift, 0.0, 0.0),
        );
        (seg_for(&a), seg_for(&b), a, b)
    }

    #[test]
    fn identical_views_match_identically() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (seg, _, a, _) = two_plane_setup(&mut rng, 0.0);
        assert_eq!(
            match_planes(&seg, &seg, (&a, &a), &MatchParams::default()),
            vec![(1, 1), (2, 2)]
        );
    }

    #[test]
    fn keypoints_alone_can_match() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (seg, _, mut a, _) = two_plane_setup(&mut rng, 0.0);
        let mut kps = Vec::new();
        for t in 0..40u64 {
            let (x, y) = (
                if t < 20 {
                    3.0 + (t % 10) as f64
                } else {
                    20.0 + (t % 10) as f64
                },
                5.0 + (t / 10) as f64,
            );
            kps.push(Keypoint { x, y, track_id: t });
        }
        a.keypoints = kps;
        // Unreachable IoU threshold leaves only the keypoint rule.
        let params = MatchParams {
            reprojection_iou_threshold: 1.0,
            ..Default::default()
        };
        assert_eq!(
            match_planes(&seg, &seg, (&a, &a), &params),
            vec![(1, 1), (2, 2)]
        );
        let few = MatchParams {
            min_keypoint_matches: 20,
            ..params
        };
        assert!(match_planes(&seg, &seg, (&a, &a), &few).is_empty());
    }

    #[test]
    fn disjoint_views_do_not_match() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (seg_a, seg_b, a, _) = two_plane_setup(&mut rng, 0.0);
        // Second camera looks the opposite way.
        let away = view(
            1,
            Rotation3::from_euler_angles(0.0, std::f64::consts::PI, 0.0).into_inner(),
            Vec3::zeros(),
        );
        assert!(match_planes(&seg_a, &seg_b, (&a, &away), &MatchParams::default()).is_empty());
    }

    #[test]
    fn shifted_view_recovers_correspondence() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (seg_a, seg_b, a, b) = two_plane_setup(&mut rng, 0.2);
        assert_eq!(
            match_planes(&seg_a, &seg_b, (&a, &b), &MatchParams::default()),
            vec![(1, 1), (2, 2)]
        );
    }

    #[test]
    fn rejects_improper_rotation() {
        let reflect = Matrix3::from_diagonal(&Vec3::new(1.0, 1.0, -1.0));
        let err = PosedView::new(
            0,
            intrinsics(),
            reflect,
            Vec3::zeros(),
            DepthMap::filled(32, 24, 0.0),
            vec![],
        )
        .unwrap_err();
        assert!(matches!(err, SparseError::BadRotation(_)));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn scale_is_a_global_minimum(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 30;
            let m: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..6.0)).collect();
            let s: Vec<f64> = (0..n).map(|_| if rng.random_bool(0.5) { rng.random_range(0.1..6.0) } else { 0.0 }).collect();
            prop_assume!(s.iter().any(|&v| v > 0.0));
            let (k, _) = align_depth_scale(&DepthMap::new(n, 1, m.clone()).unwrap(), &DepthMap::new(n, 1, s.clone()).unwrap()).unwrap();
            let r = residual(&m, &s, k);
            prop_assert!(residual(&m, &s, k * 1.01) >= r);
            prop_assert!(residual(&m, &s, k * 0.99) >= r);
        }

        #[test]
        fn world_round_trip(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let v = view(0, random_rotation(&mut rng), Vec3::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)));
            let n = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            prop_assume!(n.norm() > 0.1);
            let p = PlaneModel::new(n, rng.random_range(0.5..5.0), n);
            let g = GlobalPlane { normal: p.normal, offset: p.offset, source: vec![] };
            let cam = plane_to_camera(&g, &v);
            let back = plane_to_world(&cam, &v, &NormTransform::identity(), 0);
            prop_assert!((back.normal - g.normal).norm() < 1e-9);
            prop_assert!((back.offset - g.offset).abs() < 1e-9);
        }

        #[test]
        fn fusion_is_symmetric_and_idempotent(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut draw = || {
                let n = Vec3::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), 1.0).normalize();
                GlobalPlane { normal: n, offset: rng.random_range(0.0..4.0), source: vec![] }
            };
            let (a, b) = (draw(), draw());
            let ab = fuse_planes(&a, &b).unwrap();
            let ba = fuse_planes(&b, &a).unwrap();
            prop_assert!((ab.normal - ba.normal).norm() < 1e-9);
            prop_assert!((ab.offset - ba.offset).abs() < 1e-12);
            let aa = fuse_planes(&a, &a).unwrap();
            prop_assert!((aa.normal - a.normal).norm() < 1e-9);
            prop_assert!((aa.offset - a.offset).abs() < 1e-12);
        }

        #[test]
        fn matching_is_one_to_one(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let k = CameraIntrinsics::new(8.0, 8.0, 4.0, 3.0, 8, 6).unwrap();
            let seg = |rng: &mut ChaCha8Rng| {
                let planes: Vec<PlaneModel> = (0..4).map(|_| PlaneModel::new(Vec3::new(rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3), 1.0), rng.random_range(1.0..3.0), Vec3::z())).collect();
                let labels = (0..48).map(|_| rng.random_range(0..5)).collect();
                PlaneSegmentation::new(8, 6, labels, planes).unwrap()
            };
            let (sa, sb) = (seg(&mut rng), seg(&mut rng));
            let kps = |rng: &mut ChaCha8Rng| (0..60).map(|_| Keypoint { x: rng.random_range(0.0..8.0), y: rng.random_range(0.0..6.0), track_id: rng.random_range(0..30) }).collect::<Vec<_>>();
            let mk = |rng: &mut ChaCha8Rng| PosedView::new(0, k, Matrix3::identity(), Vec3::zeros(), DepthMap::filled(8, 6, 0.0), kps(rng)).unwrap();
            let (va, vb) = (mk(&mut rng), mk(&mut rng));
            let params = MatchParams { min_keypoint_matches: 1, mutual_fraction: 0.1, reprojection_iou_threshold: 0.05 };
            let m = match_planes(&sa, &sb, (&va, &vb), &params);
            let a: BTreeSet<u32> = m.iter().map(|p| p.0).collect();
            let b: BTreeSet<u32> = m.iter().map(|p| p.1).collect();
            prop_assert_eq!(a.len(), m.len());
            prop_assert_eq!(b.len(), m.len());
        }
    }
}
