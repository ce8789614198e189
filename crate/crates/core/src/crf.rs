//! Image-level plane segmentation refinement with a fully-connected CRF and
//! connected-component cleanup.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{mean_direction, plane_from_inliers, CameraIntrinsics, PlaneModel, Vec3};
use crate::lattice::Permutohedral;
use crate::raster::{ColorImage, DepthMap, NormalMap};

#[derive(Debug, Error, PartialEq)]
pub enum CrfError {
    #[error("raster dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid crf parameter: {0}")]
    InvalidParams(String),
    #[error("label {label} exceeds the {planes} planes of the segmentation")]
    LabelOutOfRange { label: u32, planes: usize },
}

/// Per-pixel instance ids (0 = non-planar) with one plane per id `1..=K`.
#[derive(Debug, Clone, PartialEq)]
pub struct PlaneSegmentation {
    pub width: usize,
    pub height: usize,
    pub labels: Vec<u32>,
    pub planes: Vec<PlaneModel>,
}

impl PlaneSegmentation {
    pub fn new(
        width: usize,
        height: usize,
        labels: Vec<u32>,
        planes: Vec<PlaneModel>,
    ) -> Result<Self, CrfError> {
        if labels.len() != width * height {
            return Err(CrfError::DimensionMismatch(format!(
                "{} labels for a {width}x{height} raster",
                labels.len()
            )));
        }
        if let Some(&label) = labels.iter().find(|&&l| l as usize > planes.len()) {
            return Err(CrfError::LabelOutOfRange {
                label,
                planes: planes.len(),
            });
        }
        Ok(Self {
            width,
            height,
            labels,
            planes,
        })
    }

    /// All pixels non-planar, no planes.
    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            labels: vec![0; width * height],
            planes: Vec::new(),
        }
    }

    pub fn instance_count(&self) -> usize {
        self.planes.len()
    }

    /// Pixel count per label, index 0 = non-planar.
    pub fn pixel_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.planes.len() + 1];
        for &l in &self.labels {
            counts[l as usize] += 1;
        }
        counts
    }

    /// Drops ids without pixels and renumbers the rest in order.
    pub fn compacted(&self) -> Self {
        let counts = self.pixel_counts();
        let mut remap = vec![0u32; counts.len()];
        let mut planes = Vec::new();
        for id in 1..counts.len() {
            if counts[id] > 0 {
                planes.push(self.planes[id - 1]);
                remap[id] = planes.len() as u32;
            }
        }
        Self {
            width: self.width,
            height: self.height,
            labels: self.labels.iter().map(|&l| remap[l as usize]).collect(),
            planes,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CrfParams {
    /// Position deviation in pixels.
    pub theta_s: f64,
    /// Color deviation, channels in [0, 255].
    pub theta_a: f64,
    /// Depth deviation in normalized scene units.
    pub theta_d: f64,
    /// Normal deviation on raw unit vectors.
    pub theta_n: f64,
    /// Weights of the smoothness, appearance, depth and normal kernels.
    pub kernel_weights: [f64; 4],
    pub iterations: usize,
    pub unary_confidence: f64,
    pub min_region_pixels: usize,
    pub refit_planes: bool,
}

impl Default for CrfParams {
    fn default() -> Self {
        Self {
            theta_s: 10.0,
            theta_a: 10.0,
            theta_d: 0.1,
            theta_n: 0.01,
            kernel_weights: [1.0; 4],
            iterations: 5,
            unary_confidence: 0.8,
            min_region_pixels: 300,
            refit_planes: true,
        }
    }
}

impl CrfParams {
    pub fn validate(&self) -> Result<(), CrfError> {
        let thetas = [self.theta_s, self.theta_a, self.theta_d, self.theta_n];
        if !thetas.iter().all(|t| t.is_finite() && *t > 0.0) {
            return Err(CrfError::InvalidParams(format!(
                "deviations must be positive, got {thetas:?}"
            )));
        }
        if !self
            .kernel_weights
            .iter()
            .all(|w| w.is_finite() && *w >= 0.0)
        {
            return Err(CrfError::InvalidParams(
                "kernel weights must be finite and non-negative".into(),
            ));
        }
        if !(self.unary_confidence > 0.0 && self.unary_confidence < 1.0) {
            return Err(CrfError::InvalidParams(
                "unary_confidence must lie in (0, 1)".into(),
            ));
        }
        Ok(())
    }
}

/// How the dense pairwise messages are computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MessagePassing {
    /// Exact O(N^2) accumulation over all pixel pairs.
    Direct,
    /// Exact separable blur for the smoothness kernel and permutohedral
    /// filtering for the bilateral kernels.
    Filtered,
}

/// Per-pixel observations used by the CRF kernels and by plane refits.
#[derive(Debug, Clone, Copy)]
pub struct CrfScene<'a> {
    pub rgb: &'a ColorImage,
    /// Metric camera-frame depth.
    pub depth: &'a DepthMap,
    pub normals: &'a NormalMap,
    pub intrinsics: &'a CameraIntrinsics,
    /// Depth is divided by this before the depth kernel, so the kernel sees
    /// the same normalized units as the point cloud.
    pub depth_scale: f64,
}

impl CrfScene<'_> {
    fn check(&self, width: usize, height: usize) -> Result<(), CrfError> {
        let ok = self.rgb.same_shape(width, height)
            && self.depth.same_shape(width, height)
            && self.normals.same_shape(width, height)
            && self.intrinsics.width == width
            && self.intrinsics.height == height;
        if !ok {
            return Err(CrfError::DimensionMismatch(format!(
                "segmentation is {width}x{height}; rgb {}x{}, depth {}x{}, normals {}x{}, intrinsics {}x{}",
                self.rgb.width(),
                self.rgb.height(),
                self.depth.width(),
                self.depth.height(),
                self.normals.width(),
                self.normals.height(),
                self.intrinsics.width,
                self.intrinsics.height
            )));
        }
        if !(self.depth_scale.is_finite() && self.depth_scale > 0.0) {
            return Err(CrfError::InvalidParams(
                "depth_scale must be positive".into(),
            ));
        }
        Ok(())
    }

    fn pixel_valid(&self, idx: usize) -> bool {
        self.depth.is_valid(idx) && self.normals.is_valid(idx)
    }
}

/// Mean-field marginals over the pixels that carry depth and normal.
#[derive(Debug, Clone, PartialEq)]
pub struct Marginals {
    pub labels: usize,
    /// Raster index of each inferred pixel.
    pub pixels: Vec<usize>,
    /// `pixels.len() x labels`, row-major.
    pub probabilities: Vec<f64>,
}

impl Marginals {
    pub fn row(&self, k: usize) -> &[f64] {
        &self.probabilities[k * self.labels..(k + 1) * self.labels]
    }

    fn argmax(&self, k: usize) -> u32 {
        let row = self.row(k);
        let mut best = 0;
        for (l, &p) in row.iter().enumerate() {
            if p > row[best] {
                best = l;
            }
        }
        best as u32
    }
}

struct Kernel {
    weight: f64,
    /// Row-major features, already divided by the deviations.
    features: Vec<f64>,
    dim: usize,
}

fn build_kernels(
    seg: &PlaneSegmentation,
    scene: &CrfScene,
    params: &CrfParams,
    pixels: &[usize],
) -> Vec<Kernel> {
    let w = seg.width;
    let mut out = Vec::new();
    for (m, &weight) in params.kernel_weights.iter().enumerate() {
        let dim = [2, 5, 3, 5][m];
        let mut features = Vec::with_capacity(pixels.len() * dim);
        for &idx in pixels {
            let (r, c) = ((idx / w) as f64, (idx % w) as f64);
            features.push(c / params.theta_s);
            features.push(r / params.theta_s);
            match m {
                1 => {
                    for ch in scene.rgb.get(idx) {
                        features.push(ch * 255.0 / params.theta_a);
                    }
                }
                2 => features.push(scene.depth.get(idx) / scene.depth_scale / params.theta_d),
                3 => {
                    let n = scene.normals.vectors()[idx];
                    features.extend(n.iter().map(|v| v / params.theta_n));
                }
                _ => {}
            }
        }
        out.push(Kernel {
            weight,
            features,
            dim,
        });
    }
    out
}

/// Runs `params.iterations` mean-field updates and returns the marginals.
pub fn mean_field(
    seg: &PlaneSegmentation,
    scene: &CrfScene,
    params: &CrfParams,
    method: MessagePassing,
) -> Result<Marginals, CrfError> {
    params.validate()?;
    scene.check(seg.width, seg.height)?;
    if seg.labels.len() != seg.width * seg.height {
        return Err(CrfError::DimensionMismatch("label raster length".into()));
    }
    let labels = seg.planes.len() + 1;
    if labels > 1 && params.unary_confidence <= 1.0 / labels as f64 {
        return Err(CrfError::InvalidParams(format!(
            "unary_confidence {} must exceed 1/{labels}",
            params.unary_confidence
        )));
    }
    let pixels: Vec<usize> = (0..seg.labels.len())
        .filter(|&i| scene.pixel_valid(i))
        .collect();
    let n = pixels.len();

    // Unary as log-probabilities: ln(conf) on the input label, the rest
    // spread uniformly.
    let other = if labels > 1 {
        ((1.0 - params.unary_confidence) / (labels - 1) as f64).ln()
    } else {
        0.0
    };
    let keep = if labels > 1 {
        params.unary_confidence.ln()
    } else {
        0.0
    };
    let mut log_unary = vec![other; n * labels];
    for (k, &idx) in pixels.iter().enumerate() {
        let l = seg.labels[idx] as usize;
        if l >= labels {
            return Err(CrfError::LabelOutOfRange {
                label: l as u32,
                planes: seg.planes.len(),
            });
        }
        log_unary[k * labels + l] = keep;
    }
    let mut q = vec![0.0; n * labels];
    for k in 0..n {
        softmax_into(
            &log_unary[k * labels..(k + 1) * labels],
            &mut q[k * labels..(k + 1) * labels],
        );
    }
    if params.iterations == 0 || n == 0 || labels == 1 {
        return Ok(Marginals {
            labels,
            pixels,
            probabilities: q,
        });
    }

    let kernels = build_kernels(seg, scene, params, &pixels);
    let mut filters: Vec<Box<dyn MessageFilter>> = Vec::new();
    for (m, kernel) in kernels.iter().enumerate() {
        if kernel.weight == 0.0 {
            continue;
        }
        let f: Box<dyn MessageFilter> = match method {
            MessagePassing::Direct => Box::new(DirectFilter::new(kernel)),
            MessagePassing::Filtered if m == 0 => Box::new(SeparableFilter::new(
                seg.width,
                seg.height,
                &pixels,
                params.theta_s,
            )),
            MessagePassing::Filtered => Box::new(LatticeFilter::new(kernel)),
        };
        filters.push(f);
    }
    let weights: Vec<f64> = kernels
        .iter()
        .map(|k| k.weight)
        .filter(|&w| w != 0.0)
        .collect();

    let mut logits = vec![0.0; n * labels];
    for _ in 0..params.iterations {
        logits.copy_from_slice(&log_unary);
        for (f, &wm) in filters.iter().zip(&weights) {
            let msg = f.apply(&q, labels);
            for (lg, m) in logits.iter_mut().zip(&msg) {
                *lg += wm * m;
            }
        }
        for k in 0..n {
            softmax_into(
                &logits[k * labels..(k + 1) * labels],
                &mut q[k * labels..(k + 1) * labels],
            );
        }
    }
    Ok(Marginals {
        labels,
        pixels,
        probabilities: q,
    })
}

fn softmax_into(logits: &[f64], out: &mut [f64]) {
    let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &l) in out.iter_mut().zip(logits) {
        *o = (l - mx).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Normalized Gaussian message: `sum_j k(i,j) Q_j / sum_j k(i,j)`, self
/// included.
trait MessageFilter {
    fn apply(&self, q: &[f64], labels: usize) -> Vec<f64>;
}

struct DirectFilter<'a> {
    kernel: &'a Kernel,
    norm: Vec<f64>,
}

impl<'a> DirectFilter<'a> {
    fn new(kernel: &'a Kernel) -> Self {
        let n = kernel.features.len() / kernel.dim;
        let norm = (0..n)
            .map(|i| (0..n).map(|j| Self::k(kernel, i, j)).sum())
            .collect();
        Self { kernel, norm }
    }

    #[inline]
    fn k(kernel: &Kernel, i: usize, j: usize) -> f64 {
        let d = kernel.dim;
        let fi = &kernel.features[i * d..(i + 1) * d];
        let fj = &kernel.features[j * d..(j + 1) * d];
        let d2: f64 = fi.iter().zip(fj).map(|(a, b)| (a - b) * (a - b)).sum();
        (-0.5 * d2).exp()
    }
}

impl MessageFilter for DirectFilter<'_> {
    fn apply(&self, q: &[f64], labels: usize) -> Vec<f64> {
        let n = self.norm.len();
        let mut out = vec![0.0; n * labels];
        for i in 0..n {
            let row = &mut out[i * labels..(i + 1) * labels];
            for j in 0..n {
                let k = Self::k(self.kernel, i, j);
                for (o, v) in row.iter_mut().zip(&q[j * labels..(j + 1) * labels]) {
                    *o += k * v;
                }
            }
            for o in row.iter_mut() {
                *o /= self.norm[i];
            }
        }
        out
    }
}

struct LatticeFilter {
    lattice: Permutohedral,
    norm: Vec<f64>,
}

impl LatticeFilter {
    fn new(kernel: &Kernel) -> Self {
        let lattice = Permutohedral::new(&kernel.features, kernel.dim);
        let norm = lattice.filter(&vec![1.0; lattice.point_count()], 1);
        Self { lattice, norm }
    }
}

impl MessageFilter for LatticeFilter {
    fn apply(&self, q: &[f64], labels: usize) -> Vec<f64> {
        let mut out = self.lattice.filter(q, labels);
        for (row, &z) in out.chunks_mut(labels).zip(&self.norm) {
            for v in row {
                *v /= z;
            }
        }
        out
    }
}

/// Exact position-only Gaussian as two 1-D passes over the full raster,
/// with uninferred pixels contributing nothing.
struct SeparableFilter {
    width: usize,
    height: usize,
    pixels: Vec<usize>,
    taps: Vec<f64>,
    norm: Vec<f64>,
}

impl SeparableFilter {
    fn new(width: usize, height: usize, pixels: &[usize], sigma: f64) -> Self {
        // Beyond 6 sigma the kernel is below 1.6e-8 of its peak.
        let radius = (6.0 * sigma).ceil() as usize;
        let taps = (0..=radius)
            .map(|d| (-((d * d) as f64) / (2.0 * sigma * sigma)).exp())
            .collect();
        let mut f = Self {
            width,
            height,
            pixels: pixels.to_vec(),
            taps,
            norm: Vec::new(),
        };
        f.norm = f.blur(&vec![1.0; pixels.len()], 1);
        f
    }

    fn blur(&self, input: &[f64], ch: usize) -> Vec<f64> {
        let (w, h) = (self.width, self.height);
        let r = self.taps.len() - 1;
        let mut grid = vec![0.0; w * h * ch];
        for (k, &idx) in self.pixels.iter().enumerate() {
            grid[idx * ch..(idx + 1) * ch].copy_from_slice(&input[k * ch..(k + 1) * ch]);
        }
        let mut tmp = vec![0.0; w * h * ch];
        for y in 0..h {
            for x in 0..w {
                let dst = (y * w + x) * ch;
                for xx in x.saturating_sub(r)..(x + r + 1).min(w) {
                    let t = self.taps[x.abs_diff(xx)];
                    let src = (y * w + xx) * ch;
                    for c in 0..ch {
                        tmp[dst + c] += t * grid[src + c];
                    }
                }
            }
        }
        let mut out = vec![0.0; self.pixels.len() * ch];
        for (k, &idx) in self.pixels.iter().enumerate() {
            let (y, x) = (idx / w, idx % w);
            for yy in y.saturating_sub(r)..(y + r + 1).min(h) {
                let t = self.taps[y.abs_diff(yy)];
                let src = (yy * w + x) * ch;
                for c in 0..ch {
                    out[k * ch + c] += t * tmp[src + c];
                }
            }
        }
        out
    }
}

impl MessageFilter for SeparableFilter {
    fn apply(&self, q: &[f64], labels: usize) -> Vec<f64> {
        let mut out = self.blur(q, labels);
        for (row, &z) in out.chunks_mut(labels).zip(&self.norm) {
            for v in row {
                *v /= z;
            }
        }
        out
    }
}

/// Mean-field refinement of `seg`. Pixels without valid depth and normal
/// come out non-planar. Ids are kept stable, so an id can end up without
/// pixels; [`connected_component_filter`] drops such ids. When
/// `params.refit_planes` is set, each surviving mask's plane is refit in
/// the camera frame.
pub fn crf_refine(
    seg: &PlaneSegmentation,
    scene: &CrfScene,
    params: &CrfParams,
) -> Result<PlaneSegmentation, CrfError> {
    crf_refine_with(seg, scene, params, MessagePassing::Filtered)
}

pub fn crf_refine_with(
    seg: &PlaneSegmentation,
    scene: &CrfScene,
    params: &CrfParams,
    method: MessagePassing,
) -> Result<PlaneSegmentation, CrfError> {
    let marg = mean_field(seg, scene, params, method)?;
    let mut labels = vec![0u32; seg.labels.len()];
    for (k, &idx) in marg.pixels.iter().enumerate() {
        labels[idx] = marg.argmax(k);
    }
    let out = PlaneSegmentation {
        width: seg.width,
        height: seg.height,
        labels,
        planes: seg.planes.clone(),
    };
    Ok(if params.refit_planes {
        refit_segment_planes(&out, scene)
    } else {
        out
    })
}

/// Refits every plane on its mask's depth-lifted camera-frame points, with
/// the model normal set to the mean predicted normal. Masks with fewer than
/// three usable points keep their plane.
pub fn refit_segment_planes(seg: &PlaneSegmentation, scene: &CrfScene) -> PlaneSegmentation {
    let k = seg.planes.len();
    let mut points: Vec<Vec<Vec3>> = vec![Vec::new(); k + 1];
    let mut normals: Vec<Vec<Vec3>> = vec![Vec::new(); k + 1];
    for (idx, &l) in seg.labels.iter().enumerate() {
        if l == 0 {
            continue;
        }
        let (Some(z), Some(n)) = (scene.depth.valid(idx), scene.normals.get(idx)) else {
            continue;
        };
        let (r, c) = (idx / seg.width, idx % seg.width);
        points[l as usize].push(scene.intrinsics.ray(c as f64, r as f64) * z);
        normals[l as usize].push(n);
    }
    let planes = seg
        .planes
        .iter()
        .enumerate()
        .map(|(i, old)| {
            let id = i + 1;
            match plane_from_inliers(points[id].iter()) {
                Ok(p) => match mean_direction(normals[id].iter()) {
                    Some(m) => p.with_model_normal(m),
                    None => p,
                },
                Err(_) => *old,
            }
        })
        .collect();
    PlaneSegmentation {
        planes,
        ..seg.clone()
    }
}

/// Splits every label into 4-connected components, clears components
/// smaller than `min_region_pixels`, and renumbers the survivors densely in
/// order of (original id, first pixel in raster order). Split pieces copy
/// the plane of their source id.
pub fn connected_component_filter(
    seg: &PlaneSegmentation,
    min_region_pixels: usize,
) -> PlaneSegmentation {
    let (w, h) = (seg.width, seg.height);
    let mut comp = vec![u32::MAX; w * h];
    // (source id, first pixel, pixels)
    let mut regions: Vec<(u32, usize, Vec<usize>)> = Vec::new();
    let mut stack = Vec::new();
    for start in 0..w * h {
        let l = seg.labels[start];
        if l == 0 || comp[start] != u32::MAX {
            continue;
        }
        let id = regions.len() as u32;
        comp[start] = id;
        stack.push(start);
        let mut members = Vec::new();
        while let Some(p) = stack.pop() {
            members.push(p);
            let (y, x) = (p / w, p % w);
            let mut visit = |q: usize| {
                if seg.labels[q] == l && comp[q] == u32::MAX {
                    comp[q] = id;
                    stack.push(q);
                }
            };
            if x > 0 {
                visit(p - 1);
            }
            if x + 1 < w {
                visit(p + 1);
            }
            if y > 0 {
                visit(p - w);
            }
            if y + 1 < h {
                visit(p + w);
            }
        }
        regions.push((l, start, members));
    }
    let mut kept: Vec<&(u32, usize, Vec<usize>)> = regions
        .iter()
        .filter(|r| r.2.len() >= min_region_pixels.max(1))
        .collect();
    kept.sort_by_key(|r| (r.0, r.1));
    let mut labels = vec![0u32; w * h];
    let mut planes = Vec::with_capacity(kept.len());
    for (new_id, region) in kept.iter().enumerate() {
        planes.push(seg.planes[region.0 as usize - 1]);
        for &p in &region.2 {
            labels[p] = new_id as u32 + 1;
        }
    }
    PlaneSegmentation {
        width: w,
        height: h,
        labels,
        planes,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector3;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    struct Owned {
        rgb: ColorImage,
        depth: DepthMap,
        normals: NormalMap,
        k: CameraIntrinsics,
    }

    impl Owned {
        fn uniform(w: usize, h: usize) -> Self {
            Self {
                rgb: ColorImage::filled(w, h, [0.5, 0.5, 0.5]),
                depth: DepthMap::filled(w, h, 2.0),
                normals: NormalMap::from_vectors(w, h, vec![Vector3::z(); w * h]).unwrap(),
                k: CameraIntrinsics::new(100.0, 100.0, w as f64 / 2.0, h as f64 / 2.0, w, h)
                    .unwrap(),
            }
        }

        fn scene(&self) -> CrfScene<'_> {
            CrfScene {
                rgb: &self.rgb,
                depth: &self.depth,
                normals: &self.normals,
                intrinsics: &self.k,
                depth_scale: 1.0,
            }
        }
    }

    fn planes(k: usize) -> Vec<PlaneModel> {
        (0..k)
            .map(|i| PlaneModel::new(Vec3::z(), 1.0 + i as f64, Vec3::z()))
            .collect()
    }

    fn no_refit() -> CrfParams {
        CrfParams {
            refit_planes: false,
            ..CrfParams::default()
        }
    }

    /// Random blocky segmentation plus matching per-region observations.
    fn random_scene(
        rng: &mut ChaCha8Rng,
        w: usize,
        h: usize,
        k: usize,
    ) -> (PlaneSegmentation, Owned) {
        let cells = 4;
        let cell_label: Vec<u32> = (0..cells * cells)
            .map(|_| rng.random_range(0..=k as u32))
            .collect();
        let mut labels = Vec::with_capacity(w * h);
        let mut rgb = Vec::new();
        let mut depth = Vec::new();
        let mut normals = Vec::new();
        let colors: Vec<[f64; 3]> = (0..=k)
            .map(|_| [rng.random(), rng.random(), rng.random()])
            .collect();
        let dirs: Vec<Vec3> = (0..=k)
            .map(|_| {
                Vec3::new(
                    rng.random_range(-0.3..0.3),
                    rng.random_range(-0.3..0.3),
                    1.0,
                )
                .normalize()
            })
            .collect();
        for y in 0..h {
            for x in 0..w {
                let mut l = cell_label[(y * cells / h) * cells + x * cells / w];
                if rng.random_bool(0.05) {
                    l = rng.random_range(0..=k as u32);
                }
                labels.push(l);
                let c = colors[l as usize];
                rgb.push([
                    (c[0] + rng.random_range(-0.02..0.02)).clamp(0.0, 1.0),
                    (c[1] + rng.random_range(-0.02..0.02)).clamp(0.0, 1.0),
                    (c[2] + rng.random_range(-0.02..0.02)).clamp(0.0, 1.0),
                ]);
                depth.push(if rng.random_bool(0.02) {
                    0.0
                } else {
                    1.0 + 0.1 * l as f64 + rng.random_range(0.0..0.02)
                });
                normals.push(
                    (dirs[l as usize] + Vec3::new(rng.random_range(-0.005..0.005), 0.0, 0.0))
                        .normalize(),
                );
            }
        }
        let seg = PlaneSegmentation::new(w, h, labels, planes(k)).unwrap();
        let owned = Owned {
            rgb: ColorImage::new(w, h, rgb).unwrap(),
            depth: DepthMap::new(w, h, depth).unwrap(),
            normals: NormalMap::from_vectors(w, h, normals).unwrap(),
            k: CameraIntrinsics::new(50.0, 50.0, w as f64 / 2.0, h as f64 / 2.0, w, h).unwrap(),
        };
        (seg, owned)
    }

    #[test]
    fn zero_weights_keep_labels() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (seg, obs) = random_scene(&mut rng, 20, 16, 3);
        let params = CrfParams {
            kernel_weights: [0.0; 4],
            ..no_refit()
        };
        let out = crf_refine(&seg, &obs.scene(), &params).unwrap();
        for i in 0..seg.labels.len() {
            let expect = if obs.depth.is_valid(i) {
                seg.labels[i]
            } else {
                0
            };
            assert_eq!(out.labels[i], expect);
        }
    }

    #[test]
    fn zero_iterations_is_identity_on_valid_pixels() {
        let obs = Owned::uniform(6, 5);
        let labels: Vec<u32> = (0..30).map(|i| (i % 3) as u32).collect();
        let seg = PlaneSegmentation::new(6, 5, labels.clone(), planes(2)).unwrap();
        let params = CrfParams {
            iterations: 0,
            ..no_refit()
        };
        let out = crf_refine(&seg, &obs.scene(), &params).unwrap();
        assert_eq!(out.labels, labels);
    }

    #[test]
    fn island_is_absorbed_after_one_iteration() {
        let obs = Owned::uniform(3, 3);
        let mut labels = vec![1u32; 9];
        labels[4] = 2;
        let seg = PlaneSegmentation::new(3, 3, labels, planes(2)).unwrap();
        let params = CrfParams {
            theta_s: 1.0,
            kernel_weights: [10.0, 0.0, 0.0, 0.0],
            iterations: 1,
            ..no_refit()
        };
        let marg = mean_field(&seg, &obs.scene(), &params, MessagePassing::Direct).unwrap();

        // Hand computation for the center pixel. Initial marginals equal the
        // unary distribution: (0.1, 0.8, 0.1) on label-1 pixels and
        // (0.1, 0.1, 0.8) at the center.
        let e1 = (-0.5f64).exp(); // 4 edge neighbors at distance 1
        let e2 = (-1.0f64).exp(); // 4 corner neighbors at distance sqrt(2)
        let z = 1.0 + 4.0 * e1 + 4.0 * e2;
        let m0 = 0.1;
        let m1 = (0.1 + 4.0 * e1 * 0.8 + 4.0 * e2 * 0.8) / z;
        let m2 = (0.8 + 4.0 * e1 * 0.1 + 4.0 * e2 * 0.1) / z;
        let logits = [
            0.1f64.ln() + 10.0 * m0,
            0.1f64.ln() + 10.0 * m1,
            0.8f64.ln() + 10.0 * m2,
        ];
        let s: f64 = logits.iter().map(|l| l.exp()).sum();
        let expect: Vec<f64> = logits.iter().map(|l| l.exp() / s).collect();
        let center = marg.row(4);
        for l in 0..3 {
            assert!(
                (center[l] - expect[l]).abs() < 1e-12,
                "{center:?} vs {expect:?}"
            );
        }
        assert!(center[1] > center[2]);
        let out = crf_refine_with(&seg, &obs.scene(), &params, MessagePassing::Direct).unwrap();
        assert_eq!(out.labels, vec![1u32; 9]);
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let obs = Owned::uniform(4, 4);
        let seg = PlaneSegmentation::empty(5, 4);
        assert!(matches!(
            crf_refine(&seg, &obs.scene(), &CrfParams::default()),
            Err(CrfError::DimensionMismatch(_))
        ));
    }

    #[test]
    fn refit_recovers_mask_plane() {
        let mut obs = Owned::uniform(12, 10);
        // Tilted plane n.x = 2 rendered into depth.
        let n = Vec3::new(0.2, -0.1, 1.0).normalize();
        let vals: Vec<f64> = (0..120)
            .map(|i| {
                let ray = obs.k.ray((i % 12) as f64, (i / 12) as f64);
                2.0 / n.dot(&ray)
            })
            .collect();
        obs.depth = DepthMap::new(12, 10, vals).unwrap();
        let seg = PlaneSegmentation::new(12, 10, vec![1; 120], planes(1)).unwrap();
        let out = refit_segment_planes(&seg, &obs.scene());
        assert!((out.planes[0].normal - n).norm() < 1e-9);
        assert!((out.planes[0].offset - 2.0).abs() < 1e-9);
    }

    #[test]
    fn filtered_messages_match_direct_on_64x64() {
        use crate::synth::{generate_scene, NoiseModel, RoomType, SceneSpec};
        let mut worst = 0.0f64;
        for seed in 0..6u64 {
            let mut spec = SceneSpec::new(RoomType::Box, 3 + seed as usize % 3, seed);
            spec.camera = CameraIntrinsics::new(55.0, 55.0, 32.0, 32.0, 64, 64).unwrap();
            if seed % 2 == 1 {
                spec.noise = NoiseModel::monocular();
                spec.normal_noise_deg = 3.0;
            }
            let s = generate_scene(&spec).unwrap();
            let v = &s.first;
            let scene = CrfScene {
                rgb: &v.rgb,
                depth: &v.depth_noisy,
                normals: &v.normals_noisy,
                intrinsics: &v.gt.intrinsics,
                depth_scale: 3.0,
            };
            let seg = v.gt.as_segmentation();
            let params = no_refit();
            let direct = mean_field(&seg, &scene, &params, MessagePassing::Direct).unwrap();
            let fast = mean_field(&seg, &scene, &params, MessagePassing::Filtered).unwrap();
            assert_eq!(direct.pixels, fast.pixels);
            for (a, b) in direct.probabilities.iter().zip(&fast.probabilities) {
                worst = worst.max((a - b).abs());
            }
        }
        assert!(worst <= 1e-3, "max marginal difference {worst}");
    }

    #[test]
    fn component_filter_examples() {
        // 20x20 block = 400 px stays, 10x20 block = 200 px goes.
        let (w, h) = (40, 20);
        let labels: Vec<u32> = (0..w * h)
            .map(|i| match i % w {
                0..20 => 1,
                20..30 => 2,
                _ => 0,
            })
            .collect();
        let seg = PlaneSegmentation::new(w, h, labels, planes(2)).unwrap();
        let out = connected_component_filter(&seg, 300);
        assert_eq!(out.planes, vec![seg.planes[0]]);
        assert_eq!(out.pixel_counts(), vec![400, 400]);

        // One label split into two 350 px blobs.
        let (w, h) = (80, 10);
        let split: Vec<u32> = (0..w * h)
            .map(|i| if i % w < 35 || i % w >= 45 { 1 } else { 0 })
            .collect();
        let seg = PlaneSegmentation::new(w, h, split, planes(1)).unwrap();
        let out = connected_component_filter(&seg, 300);
        assert_eq!(out.planes.len(), 2);
        assert_eq!(out.planes[0], out.planes[1]);
        assert_eq!(out.pixel_counts(), vec![100, 350, 350]);
    }

    fn is_four_connected(labels: &[u32], w: usize, h: usize, id: u32) -> bool {
        let Some(start) = labels.iter().position(|&l| l == id) else {
            return false;
        };
        let mut seen = vec![false; labels.len()];
        let mut stack = vec![start];
        seen[start] = true;
        let mut count = 0;
        while let Some(p) = stack.pop() {
            count += 1;
            let (y, x) = (p / w, p % w);
            let mut nb = Vec::new();
            if x > 0 {
                nb.push(p - 1);
            }
            if x + 1 < w {
                nb.push(p + 1);
            }
            if y > 0 {
                nb.push(p - w);
            }
            if y + 1 < h {
                nb.push(p + w);
            }
            for q in nb {
                if !seen[q] && labels[q] == id {
                    seen[q] = true;
                    stack.push(q);
                }
            }
        }
        count == labels.iter().filter(|&&l| l == id).count()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn marginals_are_distributions(seed in any::<u64>(), k in 1usize..5, direct in any::<bool>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (seg, obs) = random_scene(&mut rng, 12, 9, k);
            let method = if direct { MessagePassing::Direct } else { MessagePassing::Filtered };
            for iterations in [1usize, 3] {
                let params = CrfParams { iterations, theta_s: 3.0, ..no_refit() };
                let m = mean_field(&seg, &obs.scene(), &params, method).unwrap();
                for r in 0..m.pixels.len() {
                    let row = m.row(r);
                    prop_assert!(row.iter().all(|&p| p >= 0.0));
                    prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
                }
                let out = crf_refine(&seg, &obs.scene(), &params).unwrap();
                prop_assert_eq!(out.labels.len(), seg.labels.len());
                let input: std::collections::BTreeSet<u32> = seg.labels.iter().copied().collect();
                for &l in &out.labels {
                    prop_assert!(l == 0 || input.contains(&l));
                }
            }
        }

        #[test]
        fn component_filter_invariants(seed in any::<u64>(), min in 0usize..12) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (w, h) = (10usize, 8usize);
            let k = 3;
            let labels: Vec<u32> = (0..w * h).map(|_| rng.random_range(0..=k as u32)).collect();
            let seg = PlaneSegmentation::new(w, h, labels, planes(k as usize)).unwrap();
            let out = connected_component_filter(&seg, min);
            prop_assert_eq!(out.labels.len(), seg.labels.len());
            let counts = out.pixel_counts();
            for id in 1..counts.len() {
                prop_assert!(counts[id] >= min.max(1));
                prop_assert!(is_four_connected(&out.labels, w, h, id as u32));
            }
            for (a, b) in seg.labels.iter().zip(&out.labels) {
                if *b != 0 {
                    prop_assert!(*a != 0);
                    prop_assert_eq!(out.planes[*b as usize - 1], seg.planes[*a as usize - 1]);
                }
            }
        }
    }
}
