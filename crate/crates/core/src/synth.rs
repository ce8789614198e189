//! Synthetic piecewise-planar indoor scenes with exact ground truth.
//!
//! A scene is a convex room (box, corridor or a box cut by oblique planes)
//! holding rectangular panels and optional clutter spheres. Views are
//! ray-cast analytically; the "monocular" depth and normal predictions are
//! the clean renders passed through [`NoiseModel`].
//!
//! The world frame is the first camera's frame (x right, y down, z forward).

use nalgebra::{Matrix3, Rotation3};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{angle_between_deg, CameraIntrinsics, PlaneModel, Vec3};
use crate::metrics::SceneGroundTruth;
use crate::raster::{ColorImage, DepthMap, NormalMap};
use crate::sparseview::{plane_to_camera, GlobalPlane, Keypoint, PosedView};

#[derive(Debug, Error, PartialEq)]
pub enum SynthError {
    #[error("invalid scene spec: {0}")]
    InvalidSpec(String),
    #[error("second camera lies outside the room or on a panel in every sampled layout")]
    CameraInsideGeometry,
    #[error("no layout with {0} visible planes found in {1} attempts")]
    EmptyVisibleSet(usize, usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RoomType {
    Box,
    Corridor,
    #[serde(alias = "random_polytope", alias = "polytope")]
    RandomPolytope,
}

impl std::str::FromStr for RoomType {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "box" => Ok(Self::Box),
            "corridor" => Ok(Self::Corridor),
            "random-polytope" | "random_polytope" | "polytope" => Ok(Self::RandomPolytope),
            other => Err(format!("unknown room type `{other}`")),
        }
    }
}

/// Corruption applied to the clean renders.
///
/// Depth noise acts on inverse depth: `1/z' = 1/z - S (sigma g + b(u, v)) / z_med^2`
/// where `S` is the normalization scale of the clean cloud, `z_med` the
/// median clean depth, `g` standard Gaussian and `b` a smooth field made of
/// three random cosine modes with peak `bias_amplitude`. `sigma` and
/// `bias_amplitude` are therefore in normalized units near the median depth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseModel {
    pub sigma: f64,
    pub bias_amplitude: f64,
    /// Depth step in metres; 0 disables.
    pub quantization: f64,
    /// Probability that a valid depth pixel is dropped.
    pub dropout: f64,
}

impl Default for NoiseModel {
    fn default() -> Self {
        Self {
            sigma: 0.0,
            bias_amplitude: 0.0,
            quantization: 0.0,
            dropout: 0.0,
        }
    }
}

impl NoiseModel {
    /// Depth noise of the noisy evaluation suite.
    pub fn monocular() -> Self {
        Self {
            sigma: 0.01,
            bias_amplitude: 0.02,
            ..Self::default()
        }
    }
}

/// Pose of the second camera relative to the first.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SecondViewPose {
    /// Rotation about the vertical axis, degrees.
    pub yaw_deg: f64,
    /// Second camera center in the first camera's frame, metres.
    pub center: [f64; 3],
    /// Monocular depth of view `i` is the noisy render divided by
    /// `mono_scales[i]`.
    #[serde(default = "unit_scales")]
    pub mono_scales: [f64; 2],
}

fn unit_scales() -> [f64; 2] {
    [1.0, 1.0]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub plane_count: usize,
    pub room_type: RoomType,
    #[serde(default)]
    pub noise: NoiseModel,
    #[serde(default)]
    pub normal_noise_deg: f64,
    #[serde(default = "default_camera")]
    pub camera: CameraIntrinsics,
    #[serde(default)]
    pub second_view: Option<SecondViewPose>,
    #[serde(default)]
    pub clutter_spheres: usize,
    #[serde(default)]
    pub seed: u64,
}

/// 256x192 pinhole camera with a 60 degree horizontal field of view.
pub fn default_camera() -> CameraIntrinsics {
    CameraIntrinsics::new(220.0, 220.0, 128.0, 96.0, 256, 192).expect("valid constants")
}

impl SceneSpec {
    /// Noiseless single view with the default camera.
    pub fn new(room_type: RoomType, plane_count: usize, seed: u64) -> Self {
        Self {
            plane_count,
            room_type,
            noise: NoiseModel::default(),
            normal_noise_deg: 0.0,
            camera: default_camera(),
            second_view: None,
            clutter_spheres: 0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::InvalidSpec(m.into()));
        if self.plane_count < 1 {
            return bad("plane_count must be at least 1");
        }
        if self.plane_count > MAX_SURFACES {
            return bad("plane_count above 12 is not supported");
        }
        let n = &self.noise;
        if !(n.sigma >= 0.0) || !(n.bias_amplitude >= 0.0) || !(n.quantization >= 0.0) {
            return bad("noise magnitudes must be non-negative");
        }
        if !(0.0..1.0).contains(&n.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        if !(self.normal_noise_deg >= 0.0) {
            return bad("normal_noise_deg must be non-negative");
        }
        self.camera
            .validate()
            .map_err(|e| SynthError::InvalidSpec(e.to_string()))?;
        if let Some(p) = &self.second_view {
            if !p.yaw_deg.is_finite() || p.center.iter().any(|c| !c.is_finite()) {
                return bad("second view pose must be finite");
            }
            if p.mono_scales.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
                return bad("mono_scales must be positive");
            }
        }
        Ok(())
    }
}

const MAX_SURFACES: usize = 12;
const MAX_ATTEMPTS: usize = 4000;
/// Smallest share of the image a visible surface may cover.
pub const MIN_SURFACE_FRACTION: f64 = 0.02;
/// Share of valid pixels carrying sparse SfM depth.
pub const SPARSE_FRACTION: f64 = 0.01;
const TRACK_SAMPLES: usize = 3000;

/// One rendered view and its corrupted counterparts.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedView {
    pub rgb: ColorImage,
    pub depth_clean: DepthMap,
    pub depth_noisy: DepthMap,
    pub normals_clean: NormalMap,
    pub normals_noisy: NormalMap,
    /// Camera-frame ground truth with dense labels.
    pub gt: SceneGroundTruth,
    /// Index into [`SyntheticScene::surfaces`] of each dense label (`k - 1`).
    pub surface_of_label: Vec<usize>,
    /// World-to-camera pose.
    pub rotation: Matrix3<f64>,
    pub translation: Vec3,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TwoViewData {
    pub second: RenderedView,
    /// Calibration, sparse depth and keypoints of both views.
    pub posed: [PosedView; 2],
    pub mono_scales: [f64; 2],
}

impl TwoViewData {
    /// Monocular depth of view `i` with its planted scale.
    pub fn mono_depth(&self, first: &RenderedView, i: usize) -> DepthMap {
        let view = if i == 0 { first } else { &self.second };
        view.depth_noisy.scaled(1.0 / self.mono_scales[i])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub first: RenderedView,
    pub two_view: Option<TwoViewData>,
    /// Every planar surface of the layout, world frame.
    pub surfaces: Vec<PlaneModel>,
}

#[derive(Debug, Clone, Copy)]
enum Shape {
    /// Bounded by the other room faces.
    RoomFace,
    Panel {
        center: Vec3,
        u: Vec3,
        v: Vec3,
        half_u: f64,
        half_v: f64,
    },
}

#[derive(Debug, Clone, Copy)]
struct Surface {
    plane: PlaneModel,
    shape: Shape,
    color: [f64; 3],
}

#[derive(Debug, Clone, Copy)]
struct Sphere {
    center: Vec3,
    radius: f64,
    color: [f64; 3],
}

#[derive(Debug, Clone)]
struct Layout {
    surfaces: Vec<Surface>,
    spheres: Vec<Sphere>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Hit {
    Surface(usize),
    Sphere(usize),
}

impl Layout {
    fn room_faces(&self) -> impl Iterator<Item = &Surface> {
        self.surfaces
            .iter()
            .filter(|s| matches!(s.shape, Shape::RoomFace))
    }

    fn inside_room(&self, p: &Vec3, margin: f64) -> bool {
        self.room_faces()
            .all(|f| f.plane.normal.dot(p) <= f.plane.offset - margin)
    }

    /// First intersection along `origin + t dir` with `t > 0`.
    fn cast(&self, origin: &Vec3, dir: &Vec3) -> Option<(f64, Hit)> {
        let mut best: Option<(f64, Hit)> = None;
        let closer = |t: f64, best: &Option<(f64, Hit)>| t > 1e-9 && best.is_none_or(|b| t < b.0);
        for (k, s) in self.surfaces.iter().enumerate() {
            let denom = s.plane.normal.dot(dir);
            match s.shape {
                Shape::RoomFace => {
                    if denom <= 1e-12 {
                        continue;
                    }
                    let t = (s.plane.offset - s.plane.normal.dot(origin)) / denom;
                    if closer(t, &best) {
                        best = Some((t, Hit::Surface(k)));
                    }
                }
                Shape::Panel {
                    center,
                    u,
                    v,
                    half_u,
                    half_v,
                } => {
                    if denom.abs() <= 1e-12 {
                        continue;
                    }
                    let t = (s.plane.offset - s.plane.normal.dot(origin)) / denom;
                    if !closer(t, &best) {
                        continue;
                    }
                    let p = origin + dir * t - center;
                    if p.dot(&u).abs() <= half_u && p.dot(&v).abs() <= half_v {
                        best = Some((t, Hit::Surface(k)));
                    }
                }
            }
        }
        for (k, s) in self.spheres.iter().enumerate() {
            let oc = origin - s.center;
            let a = dir.norm_squared();
            let b = oc.dot(dir);
            let c = oc.norm_squared() - s.radius * s.radius;
            let disc = b * b - a * c;
            if disc < 0.0 {
                continue;
            }
            let t = (-b - disc.sqrt()) / a;
            if closer(t, &best) {
                best = Some((t, Hit::Sphere(k)));
            }
        }
        best
    }
}

/// Surfaces, depth and normals seen by one camera before any corruption.
struct CleanRender {
    hits: Vec<Option<Hit>>,
    depth: Vec<f64>,
    normals: Vec<Vec3>,
}

fn render(
    layout: &Layout,
    k: &CameraIntrinsics,
    rotation: &Matrix3<f64>,
    center: &Vec3,
) -> CleanRender {
    let n = k.pixel_count();
    let mut hits = Vec::with_capacity(n);
    let mut depth = Vec::with_capacity(n);
    let mut normals = Vec::with_capacity(n);
    let r_t = rotation.transpose();
    for i in 0..n {
        let ray = k.ray((i % k.width) as f64, (i / k.width) as f64);
        let dir = r_t * ray;
        match layout.cast(center, &dir) {
            Some((t, hit)) => {
                let n_world = match hit {
                    Hit::Surface(s) => layout.surfaces[s].plane.normal,
                    Hit::Sphere(s) => (center + dir * t - layout.spheres[s].center).normalize(),
                };
                hits.push(Some(hit));
                // The camera ray has unit z, so the ray parameter is the depth.
                depth.push(t);
                normals.push(rotation * n_world);
            }
            None => {
                hits.push(None);
                depth.push(0.0);
                normals.push(Vec3::zeros());
            }
        }
    }
    CleanRender {
        hits,
        depth,
        normals,
    }
}

fn surface_pixel_counts(render: &CleanRender, surfaces: usize) -> Vec<usize> {
    let mut counts = vec![0usize; surfaces];
    for h in render.hits.iter().flatten() {
        if let Hit::Surface(s) = h {
            counts[*s] += 1;
        }
    }
    counts
}

/// Number of visible surfaces, or `None` if one is visible but too small.
fn visible_surfaces(counts: &[usize], pixels: usize) -> Option<usize> {
    let min = (MIN_SURFACE_FRACTION * pixels as f64).ceil() as usize;
    let mut visible = 0;
    for &c in counts {
        if c > 0 {
            if c < min {
                return None;
            }
            visible += 1;
        }
    }
    Some(visible)
}

/// True when every visible surface forms a single 4-connected region.
fn surfaces_connected(render: &CleanRender, width: usize, surfaces: usize) -> bool {
    let surface = |i: usize| match render.hits[i] {
        Some(Hit::Surface(s)) => Some(s),
        _ => None,
    };
    let n = render.hits.len();
    let mut seen_surface = vec![false; surfaces];
    let mut visited = vec![false; n];
    let mut stack = Vec::new();
    for start in 0..n {
        let Some(s) = surface(start) else { continue };
        if visited[start] {
            continue;
        }
        if seen_surface[s] {
            return false;
        }
        seen_surface[s] = true;
        visited[start] = true;
        stack.push(start);
        while let Some(p) = stack.pop() {
            let (x, y) = (p % width, p / width);
            let mut next = Vec::with_capacity(4);
            if x > 0 {
                next.push(p - 1);
            }
            if x + 1 < width {
                next.push(p + 1);
            }
            if y > 0 {
                next.push(p - width);
            }
            if p + width < n {
                next.push(p + width);
            }
            for q in next {
                if !visited[q] && surface(q) == Some(s) {
                    visited[q] = true;
                    stack.push(q);
                }
            }
        }
    }
    true
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    rng.random_range(lo..hi)
}

fn random_color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [
        uniform(rng, 0.1, 0.9),
        uniform(rng, 0.1, 0.9),
        uniform(rng, 0.1, 0.9),
    ]
}

fn room_face(rng: &mut ChaCha8Rng, rotation: &Matrix3<f64>, n: Vec3, d: f64) -> Surface {
    let n = rotation * n;
    Surface {
        plane: PlaneModel::new(n, d, n),
        shape: Shape::RoomFace,
        color: random_color(rng),
    }
}

fn random_room(rng: &mut ChaCha8Rng, room: RoomType) -> Vec<Surface> {
    let rotation =
        Rotation3::from_euler_angles(
            uniform(rng, -4.0, 4.0).to_radians(),
            uniform(rng, -30.0, 30.0).to_radians(),
            0.0,
        ) * Rotation3::from_euler_angles(uniform(rng, -12.0, 12.0).to_radians(), 0.0, 0.0);
    let rotation = rotation.into_inner();
    let (half_w, depth) = match room {
        RoomType::Corridor => ((0.5, 1.2), (8.0, 20.0)),
        _ => ((0.8, 4.0), (2.5, 7.0)),
    };
    let floor = uniform(rng, 1.0, 1.8);
    let ceiling = uniform(rng, 0.8, 2.0);
    let left = uniform(rng, half_w.0, half_w.1);
    let right = uniform(rng, half_w.0, half_w.1);
    let back = uniform(rng, depth.0, depth.1);
    let front = uniform(rng, 0.5, 2.0);
    let box_faces = [
        (Vec3::y(), floor),
        (-Vec3::y(), ceiling),
        (-Vec3::x(), left),
        (Vec3::x(), right),
        (Vec3::z(), back),
        (-Vec3::z(), front),
    ];
    let mut faces: Vec<Surface> = box_faces
        .iter()
        .map(|&(n, d)| room_face(rng, &rotation, n, d))
        .collect();
    if room == RoomType::RandomPolytope {
        let corners: Vec<Vec3> = (0..8)
            .map(|b| {
                Vec3::new(
                    if b & 1 == 0 { -left } else { right },
                    if b & 2 == 0 { -ceiling } else { floor },
                    if b & 4 == 0 { -front } else { back },
                )
            })
            .collect();
        for _ in 0..rng.random_range(1..=3) {
            let n = loop {
                let v = Vec3::new(
                    rng.sample(StandardNormal),
                    rng.sample(StandardNormal),
                    rng.sample(StandardNormal),
                );
                let v = v / v.norm();
                // Keep cuts away from the box orientations.
                if v.iter().all(|c| c.abs() < 0.9) {
                    break v;
                }
            };
            let support = corners.iter().map(|c| n.dot(c)).fold(f64::MIN, f64::max);
            let d = support * uniform(rng, 0.55, 0.9);
            faces.push(room_face(rng, &rotation, n, d));
        }
    }
    faces
}

fn distinct_from(plane: &PlaneModel, others: &[Surface]) -> bool {
    others.iter().all(|s| {
        angle_between_deg(&plane.normal, &s.plane.normal) > 8.0
            || (plane.offset - s.plane.offset).abs() > 0.15
    })
}

fn random_panel(rng: &mut ChaCha8Rng, layout: &Layout, k: &CameraIntrinsics) -> Option<Surface> {
    let u = uniform(rng, 0.15, 0.85) * k.width as f64;
    let v = uniform(rng, 0.15, 0.85) * k.height as f64;
    let ray = k.ray(u, v);
    let (t_wall, _) = layout.cast(&Vec3::zeros(), &ray)?;
    let t = t_wall * uniform(rng, 0.35, 0.75);
    if t < 0.8 {
        return None;
    }
    let center = ray * t;
    let facing = -ray.normalize();
    let normal = if rng.random_bool(0.5) {
        // Parallel to a room face, turned toward the camera.
        let faces: Vec<&Surface> = layout.room_faces().collect();
        let f = faces[rng.random_range(0..faces.len())];
        let n = if f.plane.normal.dot(&facing) < 0.0 {
            -f.plane.normal
        } else {
            f.plane.normal
        };
        if angle_between_deg(&n, &facing) > 75.0 {
            return None;
        }
        n
    } else {
        let axis = facing.cross(&Vec3::new(
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
        ));
        if axis.norm() < 1e-6 {
            return None;
        }
        Rotation3::new(axis.normalize() * uniform(rng, 0.0, 50.0).to_radians()) * facing
    };
    let up = if normal.cross(&Vec3::y()).norm() > 0.2 {
        Vec3::y()
    } else {
        Vec3::x()
    };
    let axis_u = normal.cross(&up).normalize();
    let axis_v = normal.cross(&axis_u).normalize();
    let half_u = t * uniform(rng, 0.15, 0.35);
    let half_v = t * uniform(rng, 0.15, 0.35);
    for (su, sv) in [(-1.0, -1.0), (-1.0, 1.0), (1.0, -1.0), (1.0, 1.0)] {
        let corner = center + axis_u * (su * half_u) + axis_v * (sv * half_v);
        if !layout.inside_room(&corner, 0.02) {
            return None;
        }
    }
    let plane = PlaneModel::new(normal, normal.dot(&center), normal);
    if plane.offset < 0.3 || !distinct_from(&plane, &layout.surfaces) {
        return None;
    }
    Some(Surface {
        plane,
        shape: Shape::Panel {
            center,
            u: axis_u,
            v: axis_v,
            half_u,
            half_v,
        },
        color: random_color(rng),
    })
}

fn random_sphere(rng: &mut ChaCha8Rng, layout: &Layout, k: &CameraIntrinsics) -> Option<Sphere> {
    let ray = k.ray(
        uniform(rng, 0.1, 0.9) * k.width as f64,
        uniform(rng, 0.1, 0.9) * k.height as f64,
    );
    let (t_wall, _) = layout.cast(&Vec3::zeros(), &ray)?;
    let center = ray * (t_wall * uniform(rng, 0.4, 0.8));
    let radius = uniform(rng, 0.15, 0.35);
    (center.norm() > radius + 0.3 && layout.inside_room(&center, radius)).then(|| Sphere {
        center,
        radius,
        color: random_color(rng),
    })
}

fn second_pose(p: &SecondViewPose) -> (Matrix3<f64>, Vec3, Vec3) {
    let cam_to_world = Rotation3::from_euler_angles(0.0, p.yaw_deg.to_radians(), 0.0).into_inner();
    let rotation = cam_to_world.transpose();
    let center = Vec3::from(p.center);
    (rotation, -(rotation * center), center)
}

fn camera_clear_of_panels(layout: &Layout, c: &Vec3) -> bool {
    layout.surfaces.iter().all(|s| match s.shape {
        Shape::RoomFace => true,
        Shape::Panel { .. } => (s.plane.normal.dot(c) - s.plane.offset).abs() > 0.1,
    })
}

/// Samples layouts until the first view shows exactly `plane_count`
/// surfaces, each a single connected region covering at least
/// [`MIN_SURFACE_FRACTION`] of the image (and the second view, if any,
/// meets the same size rule).
fn sample_layout(
    spec: &SceneSpec,
    rng: &mut ChaCha8Rng,
) -> Result<(Layout, CleanRender, Option<CleanRender>), SynthError> {
    let k = &spec.camera;
    let pixels = k.pixel_count();
    let second = spec.second_view.as_ref().map(second_pose);
    let mut camera_checked = 0usize;
    let mut camera_blocked = 0usize;
    for _ in 0..MAX_ATTEMPTS {
        let mut layout = Layout {
            surfaces: random_room(rng, spec.room_type),
            spheres: Vec::new(),
        };
        let room = render(&layout, k, &Matrix3::identity(), &Vec3::zeros());
        let Some(visible) =
            visible_surfaces(&surface_pixel_counts(&room, layout.surfaces.len()), pixels)
        else {
            continue;
        };
        if visible > spec.plane_count {
            continue;
        }
        let mut missing = spec.plane_count - visible;
        let mut tries = 0;
        while missing > 0 && tries < 60 {
            tries += 1;
            if let Some(panel) = random_panel(rng, &layout, k) {
                layout.surfaces.push(panel);
                missing -= 1;
            }
        }
        if missing > 0 {
            continue;
        }
        let mut tries = 0;
        while layout.spheres.len() < spec.clutter_spheres && tries < 60 {
            tries += 1;
            if let Some(s) = random_sphere(rng, &layout, k) {
                layout.spheres.push(s);
            }
        }
        if layout.spheres.len() < spec.clutter_spheres {
            continue;
        }
        let first = render(&layout, k, &Matrix3::identity(), &Vec3::zeros());
        let counts = surface_pixel_counts(&first, layout.surfaces.len());
        if visible_surfaces(&counts, pixels) != Some(spec.plane_count)
            || !surfaces_connected(&first, k.width, layout.surfaces.len())
        {
            continue;
        }
        let second_render = match &second {
            None => None,
            Some((rotation, _, center)) => {
                camera_checked += 1;
                if !layout.inside_room(center, 0.1)
                    || !camera_clear_of_panels(&layout, center)
                    || layout
                        .spheres
                        .iter()
                        .any(|s| (center - s.center).norm() < s.radius + 0.1)
                {
                    camera_blocked += 1;
                    if camera_blocked == camera_checked && camera_blocked >= 100 {
                        return Err(SynthError::CameraInsideGeometry);
                    }
                    continue;
                }
                let r = render(&layout, k, rotation, center);
                if r.hits.iter().any(|h| h.is_none())
                    || visible_surfaces(&surface_pixel_counts(&r, layout.surfaces.len()), pixels)
                        .is_none()
                {
                    continue;
                }
                Some(r)
            }
        };
        return Ok((layout, first, second_render));
    }
    if camera_checked > 0 && camera_blocked == camera_checked {
        return Err(SynthError::CameraInsideGeometry);
    }
    Err(SynthError::EmptyVisibleSet(spec.plane_count, MAX_ATTEMPTS))
}

/// Normalization scale of the cloud lifted from `depth`: the largest
/// distance of a point from the centroid.
fn cloud_scale(depth: &[f64], k: &CameraIntrinsics) -> f64 {
    let points: Vec<Vec3> = depth
        .iter()
        .enumerate()
        .filter(|(_, z)| **z > 0.0)
        .map(|(i, z)| k.ray((i % k.width) as f64, (i / k.width) as f64) * *z)
        .collect();
    let centroid = points.iter().fold(Vec3::zeros(), |a, p| a + p) / points.len() as f64;
    points
        .iter()
        .map(|p| (p - centroid).norm())
        .fold(0.0, f64::max)
}

fn median(values: &[f64]) -> f64 {
    let mut v: Vec<f64> = values.iter().copied().filter(|z| *z > 0.0).collect();
    v.sort_by(f64::total_cmp);
    let m = v.len();
    if m % 2 == 1 {
        v[m / 2]
    } else {
        0.5 * (v[m / 2 - 1] + v[m / 2])
    }
}

fn corrupt_depth(
    clean: &[f64],
    k: &CameraIntrinsics,
    noise: &NoiseModel,
    rng: &mut ChaCha8Rng,
) -> Vec<f64> {
    let mut out = clean.to_vec();
    if noise.sigma > 0.0 || noise.bias_amplitude > 0.0 {
        let scale = cloud_scale(clean, k);
        let z_med = median(clean);
        let mut modes = [(0.0, 0.0, 0.0, 0.0); 3];
        let mut total = 0.0;
        for m in modes.iter_mut() {
            let freq = uniform(rng, 0.5, 1.5);
            let dir = uniform(rng, 0.0, std::f64::consts::TAU);
            let weight = uniform(rng, 0.2, 1.0);
            total += weight;
            *m = (
                freq * dir.cos(),
                freq * dir.sin(),
                uniform(rng, 0.0, std::f64::consts::TAU),
                weight,
            );
        }
        let (w, h) = (k.width as f64, k.height as f64);
        for (i, z) in out.iter_mut().enumerate() {
            if *z <= 0.0 {
                continue;
            }
            let (u, v) = ((i % k.width) as f64 / w, (i / k.width) as f64 / h);
            let bias: f64 = modes
                .iter()
                .map(|(fx, fy, phase, weight)| {
                    weight / total * (std::f64::consts::TAU * (fx * u + fy * v) + phase).cos()
                })
                .sum::<f64>()
                * noise.bias_amplitude;
            let g: f64 = rng.sample(StandardNormal);
            let inv = 1.0 / *z - scale * (noise.sigma * g + bias) / (z_med * z_med);
            *z = if inv > 1e-6 { 1.0 / inv } else { 0.0 };
        }
    }
    if noise.quantization > 0.0 {
        for z in out.iter_mut() {
            *z = (*z / noise.quantization).round() * noise.quantization;
        }
    }
    if noise.dropout > 0.0 {
        for z in out.iter_mut() {
            if *z > 0.0 && rng.random_bool(noise.dropout) {
                *z = 0.0;
            }
        }
    }
    out
}

fn corrupt_normals(clean: &[Vec3], sigma_deg: f64, rng: &mut ChaCha8Rng) -> Vec<Vec3> {
    if sigma_deg <= 0.0 {
        return clean.to_vec();
    }
    let sigma = sigma_deg.to_radians();
    clean
        .iter()
        .map(|n| {
            if n.norm() == 0.0 {
                return *n;
            }
            let helper = if n.x.abs() < 0.9 {
                Vec3::x()
            } else {
                Vec3::y()
            };
            let t1 = n.cross(&helper).normalize();
            let t2 = n.cross(&t1);
            let a: f64 = rng.sample(StandardNormal);
            let b: f64 = rng.sample(StandardNormal);
            (n + (t1 * a + t2 * b) * sigma).normalize()
        })
        .collect()
}

fn finish_view(
    layout: &Layout,
    render: CleanRender,
    spec: &SceneSpec,
    rotation: Matrix3<f64>,
    translation: Vec3,
    rng: &mut ChaCha8Rng,
) -> RenderedView {
    let k = spec.camera;
    let (w, h) = (k.width, k.height);
    // Dense labels in surface order.
    let counts = surface_pixel_counts(&render, layout.surfaces.len());
    let mut label_of = vec![0u32; layout.surfaces.len()];
    let mut surface_of_label = Vec::new();
    for (s, &c) in counts.iter().enumerate() {
        if c > 0 {
            surface_of_label.push(s);
            label_of[s] = surface_of_label.len() as u32;
        }
    }
    let labels: Vec<u32> = render
        .hits
        .iter()
        .map(|h| match h {
            Some(Hit::Surface(s)) => label_of[*s],
            _ => 0,
        })
        .collect();
    let view = PosedView {
        view_id: 0,
        intrinsics: k,
        rotation,
        translation,
        sparse_depth: DepthMap::filled(w, h, 0.0),
        keypoints: Vec::new(),
    };
    let planes: Vec<PlaneModel> = surface_of_label
        .iter()
        .map(|&s| {
            let p = layout.surfaces[s].plane;
            plane_to_camera(
                &GlobalPlane {
                    normal: p.normal,
                    offset: p.offset,
                    source: Vec::new(),
                },
                &view,
            )
        })
        .collect();
    // Clean normals carry the exact camera-frame plane normal on planes; the
    // normals are settled so that renormalizing them is the identity.
    let planes: Vec<PlaneModel> = planes
        .into_iter()
        .map(|mut p| {
            for _ in 0..4 {
                p.normal /= p.normal.norm();
            }
            p
        })
        .collect();
    let mut normals_clean = render.normals.clone();
    for (i, l) in labels.iter().enumerate() {
        if *l != 0 {
            normals_clean[i] = planes[*l as usize - 1].normal;
        }
    }
    let rgb: Vec<[f64; 3]> = render
        .hits
        .iter()
        .map(|hit| {
            let base = match hit {
                Some(Hit::Surface(s)) => layout.surfaces[*s].color,
                Some(Hit::Sphere(s)) => layout.spheres[*s].color,
                None => [0.0; 3],
            };
            base.map(|c| (c + uniform(rng, -0.04, 0.04)).clamp(0.0, 1.0))
        })
        .collect();
    let depth_noisy = corrupt_depth(&render.depth, &k, &spec.noise, rng);
    let normals_noisy = corrupt_normals(&normals_clean, spec.normal_noise_deg, rng);
    let depth_clean = DepthMap::new(w, h, render.depth).expect("sized from camera");
    RenderedView {
        rgb: ColorImage::new(w, h, rgb).expect("sized from camera"),
        depth_noisy: DepthMap::new(w, h, depth_noisy).expect("sized from camera"),
        normals_clean: NormalMap::from_vectors(w, h, normals_clean).expect("sized from camera"),
        normals_noisy: NormalMap::from_vectors(w, h, normals_noisy).expect("sized from camera"),
        gt: SceneGroundTruth {
            intrinsics: k,
            labels,
            planes,
            depth: depth_clean.clone(),
        },
        depth_clean,
        surface_of_label,
        rotation,
        translation,
    }
}

fn sparse_depth(view: &RenderedView, rng: &mut ChaCha8Rng) -> DepthMap {
    let valid: Vec<usize> = (0..view.depth_clean.len())
        .filter(|&i| view.depth_clean.is_valid(i))
        .collect();
    let count = ((SPARSE_FRACTION * valid.len() as f64).round() as usize).max(1);
    let mut out = DepthMap::filled(view.depth_clean.width(), view.depth_clean.height(), 0.0);
    for j in sample(rng, valid.len(), count).into_iter() {
        let i = valid[j];
        out.values_mut()[i] = view.depth_clean.get(i);
    }
    out
}

/// Keypoint tracks on planar points seen by both views.
fn tracks(
    layout: &Layout,
    first: &RenderedView,
    second: &RenderedView,
    rng: &mut ChaCha8Rng,
) -> (Vec<Keypoint>, Vec<Keypoint>) {
    let k = &first.gt.intrinsics;
    let (w, h) = (k.width, k.height);
    let r2 = second.rotation;
    let c2 = -(r2.transpose() * second.translation);
    let mut a = Vec::new();
    let mut b = Vec::new();
    for _ in 0..TRACK_SAMPLES {
        let i = rng.random_range(0..w * h);
        if first.gt.labels[i] == 0 {
            continue;
        }
        let (u, v) = ((i % w) as f64, (i / w) as f64);
        let x = k.ray(u, v) * first.depth_clean.get(i);
        let Some((u2, v2)) = k.project(&(r2 * x + second.translation)) else {
            continue;
        };
        if !(u2 >= 0.0 && v2 >= 0.0 && u2 <= (w - 1) as f64 && v2 <= (h - 1) as f64) {
            continue;
        }
        let to = x - c2;
        let dist = to.norm();
        match layout.cast(&c2, &(to / dist)) {
            Some((t, _)) if (t - dist).abs() <= 1e-6 * dist.max(1.0) => {}
            _ => continue,
        }
        let track_id = a.len() as u64;
        a.push(Keypoint {
            x: u,
            y: v,
            track_id,
        });
        b.push(Keypoint {
            x: u2,
            y: v2,
            track_id,
        });
    }
    (a, b)
}

/// Renders the scene described by `spec`. Identical specs give identical
/// scenes.
pub fn generate_scene(spec: &SceneSpec) -> Result<SyntheticScene, SynthError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (layout, first_render, second_render) = sample_layout(spec, &mut rng)?;
    let first = finish_view(
        &layout,
        first_render,
        spec,
        Matrix3::identity(),
        Vec3::zeros(),
        &mut rng,
    );
    let two_view = match (spec.second_view.as_ref(), second_render) {
        (Some(pose), Some(r)) => {
            let (rotation, translation, _) = second_pose(pose);
            let second = finish_view(&layout, r, spec, rotation, translation, &mut rng);
            let (kp_a, kp_b) = tracks(&layout, &first, &second, &mut rng);
            let sd_a = sparse_depth(&first, &mut rng);
            let sd_b = sparse_depth(&second, &mut rng);
            let posed = [
                PosedView::new(
                    0,
                    spec.camera,
                    first.rotation,
                    first.translation,
                    sd_a,
                    kp_a,
                ),
                PosedView::new(
                    1,
                    spec.camera,
                    second.rotation,
                    second.translation,
                    sd_b,
                    kp_b,
                ),
            ];
            let [Ok(a), Ok(b)] = posed else {
                unreachable!("rendered poses are proper rotations");
            };
            Some(TwoViewData {
                second,
                posed: [a, b],
                mono_scales: pose.mono_scales,
            })
        }
        _ => None,
    };
    Ok(SyntheticScene {
        first,
        two_view,
        surfaces: layout.surfaces.iter().map(|s| s.plane).collect(),
    })
}

/// Second-camera pose with the given yaw, stepped sideways and back so the
/// two views overlap.
pub fn orbit_pose(yaw_deg: f64) -> SecondViewPose {
    let side = -yaw_deg.signum() * 0.5;
    SecondViewPose {
        yaw_deg,
        center: [side, 0.0, -0.2],
        mono_scales: [1.0, 1.0],
    }
}
