//! End-to-end drivers: configuration, single-view and two-view
//! reconstruction, evaluation and ablation sweeps.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crf::{
    connected_component_filter, crf_refine, refit_segment_planes, CrfError, CrfParams, CrfScene,
    PlaneSegmentation,
};
use crate::geom::{
    angle_between_deg, normalize_cloud, unproject_strided, CameraIntrinsics, GeomError,
    NormTransform,
};
use crate::graph::{build_grid_graph, ProximityParams};
use crate::metrics::{
    geometric_tolerance_filter, match_instances, planar_depth, plane_recall, segmentation_scores,
    two_view_plane_ap, ApParams, MaskedPlane, MetricsError, RecallCurve, RecallParams,
    SceneGroundTruth, SegmentationScores,
};
use crate::ransac::{sequential_extract, EstimatorVariant, RansacError, RansacParams};
use crate::raster::{ColorImage, DepthMap, NormalMap};
use crate::sparseview::{
    align_depth_scale, fuse_planes, match_planes, plane_to_world, GlobalPlane, MatchParams,
    PosedView, SparseError,
};
use crate::synth::{
    generate_scene, orbit_pose, NoiseModel, RoomType, SceneSpec, SynthError, SyntheticScene,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Geom(#[from] GeomError),
    #[error(transparent)]
    Ransac(#[from] RansacError),
    #[error(transparent)]
    Crf(#[from] CrfError),
    #[error(transparent)]
    Sparse(#[from] SparseError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Synth(#[from] SynthError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsConfig {
    /// Ground-truth depths beyond this (metres) are ignored by scale alignment.
    pub depth_cap: f64,
    /// Depth-gap thresholds (metres) of the recall curve.
    pub recall_thresholds: Vec<f64>,
    /// Report predicted instances pardoned by the geometric tolerance rule.
    pub tolerance_protocol: bool,
    pub ap: ApParams,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            depth_cap: 10.0,
            recall_thresholds: (1..=12).map(|k| k as f64 / 20.0).collect(),
            tolerance_protocol: false,
            ap: ApParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputOptions {
    pub write_planar_depth: bool,
    pub write_ply: bool,
}

impl Default for OutputOptions {
    fn default() -> Self {
        Self {
            write_planar_depth: true,
            write_ply: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub variant: EstimatorVariant,
    pub use_crf: bool,
    /// Pixel step of the point cloud along both image axes.
    pub stride: usize,
    pub ransac: RansacParams,
    pub proximity: ProximityParams,
    pub crf: CrfParams,
    pub matching: MatchParams,
    pub metrics: MetricsConfig,
    pub output: OutputOptions,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            variant: EstimatorVariant::ProximityGraphCutRansac,
            use_crf: true,
            stride: 1,
            ransac: RansacParams::default(),
            proximity: ProximityParams::default(),
            crf: CrfParams::default(),
            matching: MatchParams::default(),
            metrics: MetricsConfig::default(),
            output: OutputOptions::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, PipelineError> {
        let config: Self =
            toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        self.ransac.validate()?;
        self.crf.validate()?;
        self.matching.validate().map_err(PipelineError::Config)?;
        if self.stride == 0 {
            return Err(PipelineError::Config("stride must be at least 1".into()));
        }
        let p = &self.proximity;
        if [p.alpha_p2, p.alpha_c2, p.alpha_n2]
            .iter()
            .any(|a| !(*a > 0.0))
        {
            return Err(PipelineError::Config(
                "proximity alphas must be positive".into(),
            ));
        }
        if [p.w_p, p.w_c, p.w_n].iter().any(|w| !(*w >= 0.0)) {
            return Err(PipelineError::Config(
                "proximity weights must be non-negative".into(),
            ));
        }
        if !(self.metrics.depth_cap > 0.0) {
            return Err(PipelineError::Config("depth_cap must be positive".into()));
        }
        Ok(())
    }

    /// Copy with one dotted key (e.g. `ransac.epsilon`) replaced.
    pub fn with_override(&self, key: &str, value: toml::Value) -> Result<Self, PipelineError> {
        let mut root =
            toml::Value::try_from(self).map_err(|e| PipelineError::Config(e.to_string()))?;
        let mut slot = &mut root;
        let parts: Vec<&str> = key.split('.').collect();
        for (i, part) in parts.iter().enumerate() {
            let table = slot.as_table_mut().ok_or_else(|| {
                PipelineError::Config(format!("`{key}` does not name a config field"))
            })?;
            if i + 1 == parts.len() {
                if !table.contains_key(*part) {
                    return Err(PipelineError::Config(format!("unknown config key `{key}`")));
                }
                table.insert(part.to_string(), value.clone());
                break;
            }
            slot = table
                .get_mut(*part)
                .ok_or_else(|| PipelineError::Config(format!("unknown config key `{key}`")))?;
        }
        let out: Self = root
            .try_into()
            .map_err(|e: toml::de::Error| PipelineError::Config(format!("`{key}`: {e}")))?;
        out.validate()?;
        Ok(out)
    }
}

/// Inputs of one view: image, monocular depth and normals, intrinsics.
#[derive(Debug, Clone, Copy)]
pub struct ViewInput<'a> {
    pub rgb: &'a ColorImage,
    pub depth: &'a DepthMap,
    pub normals: &'a NormalMap,
    pub intrinsics: &'a CameraIntrinsics,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SingleViewOutput {
    /// Final instances with camera-frame planes in the depth map's units.
    pub segmentation: PlaneSegmentation,
    /// Estimator output before refinement.
    pub initial: PlaneSegmentation,
    pub norm_transform: NormTransform,
    pub planar_depth: DepthMap,
}

impl SingleViewOutput {
    pub fn is_empty(&self) -> bool {
        self.segmentation.planes.is_empty()
    }

    fn empty(w: usize, h: usize) -> Self {
        Self {
            segmentation: PlaneSegmentation::empty(w, h),
            initial: PlaneSegmentation::empty(w, h),
            norm_transform: NormTransform::identity(),
            planar_depth: DepthMap::filled(w, h, 0.0),
        }
    }
}

/// Unproject, normalize, build the neighborhood graph, extract planes,
/// paint the label map, refine with the dense CRF and drop small regions.
/// A view without valid pixels gives an empty result.
pub fn run_single_view(
    input: &ViewInput,
    config: &PipelineConfig,
) -> Result<SingleViewOutput, PipelineError> {
    config.validate()?;
    let k = input.intrinsics;
    let (w, h) = (k.width, k.height);
    let cloud = match unproject_strided(input.depth, k, input.rgb, input.normals, config.stride) {
        Ok(c) => c,
        Err(GeomError::NoValidPixels) => return Ok(SingleViewOutput::empty(w, h)),
        Err(e) => return Err(e.into()),
    };
    let cloud = match normalize_cloud(cloud) {
        Ok(c) => c,
        Err(GeomError::DegenerateCloud) => return Ok(SingleViewOutput::empty(w, h)),
        Err(e) => return Err(e.into()),
    };
    let graph = build_grid_graph(&cloud, &config.proximity);
    let mut rng = ChaCha8Rng::seed_from_u64(config.ransac.seed);
    let instances = sequential_extract(&cloud, &graph, &config.ransac, config.variant, &mut rng);
    let tr = cloud.norm_transform;

    let mut labels = vec![0u32; w * h];
    for (k_inst, inst) in instances.iter().enumerate() {
        for &i in &inst.inlier_indices {
            labels[cloud.pixel_index(i)] = k_inst as u32 + 1;
        }
    }
    if config.stride > 1 {
        labels = upsample_labels(&labels, input, config.stride);
    }
    let planes = instances
        .iter()
        .map(|i| tr.plane_to_source(&i.plane))
        .collect();
    let initial = PlaneSegmentation {
        width: w,
        height: h,
        labels,
        planes,
    };
    let scene = CrfScene {
        rgb: input.rgb,
        depth: input.depth,
        normals: input.normals,
        intrinsics: k,
        depth_scale: tr.scale,
    };
    let refined = if config.use_crf && !initial.planes.is_empty() {
        crf_refine(&initial, &scene, &config.crf)?
    } else {
        initial.clone()
    };
    let mut segmentation = connected_component_filter(&refined, config.crf.min_region_pixels);
    if config.crf.refit_planes {
        segmentation = refit_segment_planes(&segmentation, &scene);
    }
    let planar_depth = planar_depth(&segmentation, k);
    Ok(SingleViewOutput {
        segmentation,
        initial,
        norm_transform: tr,
        planar_depth,
    })
}

/// Labels of strided samples spread over their `stride x stride` blocks,
/// on pixels with valid depth and normal.
fn upsample_labels(labels: &[u32], input: &ViewInput, stride: usize) -> Vec<u32> {
    let w = input.intrinsics.width;
    (0..labels.len())
        .map(|i| {
            if !(input.depth.is_valid(i) && input.normals.is_valid(i)) {
                return 0;
            }
            let (r, c) = (i / w, i % w);
            labels[(r / stride * stride) * w + c / stride * stride]
        })
        .collect()
}

/// Inputs of two calibrated views. Depth maps are monocular (unknown scale).
#[derive(Debug, Clone, Copy)]
pub struct TwoViewInput<'a> {
    pub views: [ViewInput<'a>; 2],
    pub posed: [&'a PosedView; 2],
}

#[derive(Debug, Clone, PartialEq)]
pub struct TwoViewOutput {
    /// Per-view results with planes in world units, camera frames.
    pub views: [SingleViewOutput; 2],
    pub scales: [f64; 2],
    pub matches: Vec<(u32, u32)>,
    /// Fused pairs first, then unmatched instances of view 0 and view 1.
    pub planes: Vec<GlobalPlane>,
    /// Instance id in each view behind each global plane.
    pub members: Vec<[Option<u32>; 2]>,
}

pub fn run_two_view(
    input: &TwoViewInput,
    config: &PipelineConfig,
) -> Result<TwoViewOutput, PipelineError> {
    let mut outputs = Vec::with_capacity(2);
    let mut scales = [0.0; 2];
    for i in 0..2 {
        let v = &input.views[i];
        let (s, depth) = align_depth_scale(v.depth, &input.posed[i].sparse_depth)?;
        scales[i] = s;
        let scaled = ViewInput {
            depth: &depth,
            ..*v
        };
        outputs.push(run_single_view(&scaled, config)?);
    }
    let [a, b]: [SingleViewOutput; 2] = outputs.try_into().expect("two views");
    let matches = match_planes(
        &a.segmentation,
        &b.segmentation,
        (input.posed[0], input.posed[1]),
        &config.matching,
    );
    let world = |out: &SingleViewOutput, view: &PosedView| -> Vec<GlobalPlane> {
        out.segmentation
            .planes
            .iter()
            .enumerate()
            .map(|(k, p)| plane_to_world(p, view, &NormTransform::identity(), k as u32 + 1))
            .collect()
    };
    let wa = world(&a, input.posed[0]);
    let wb = world(&b, input.posed[1]);
    let mut planes = Vec::new();
    let mut members = Vec::new();
    let mut used_a = vec![false; wa.len()];
    let mut used_b = vec![false; wb.len()];
    for &(ia, ib) in &matches {
        let (pa, pb) = (&wa[ia as usize - 1], &wb[ib as usize - 1]);
        match fuse_planes(pa, pb) {
            Ok(f) => {
                used_a[ia as usize - 1] = true;
                used_b[ib as usize - 1] = true;
                planes.push(f);
                members.push([Some(ia), Some(ib)]);
            }
            Err(SparseError::AmbiguousFusion) => {}
            Err(e) => return Err(e.into()),
        }
    }
    for (k, p) in wa.iter().enumerate().filter(|(k, _)| !used_a[*k]) {
        planes.push(p.clone());
        members.push([Some(k as u32 + 1), None]);
    }
    for (k, p) in wb.iter().enumerate().filter(|(k, _)| !used_b[*k]) {
        planes.push(p.clone());
        members.push([None, Some(k as u32 + 1)]);
    }
    Ok(TwoViewOutput {
        views: [a, b],
        scales,
        matches,
        planes,
        members,
    })
}

impl TwoViewOutput {
    /// Global planes with their masks in both views, scored by pixel count.
    pub fn masked_planes(&self) -> Vec<MaskedPlane> {
        self.planes
            .iter()
            .zip(&self.members)
            .map(|(p, ids)| {
                let masks: Vec<Vec<bool>> = (0..2)
                    .map(|v| {
                        let labels = &self.views[v].segmentation.labels;
                        match ids[v] {
                            Some(id) => labels.iter().map(|&l| l == id).collect(),
                            None => vec![false; labels.len()],
                        }
                    })
                    .collect();
                let score = masks.iter().flatten().filter(|&&m| m).count() as f64;
                MaskedPlane {
                    normal: p.normal,
                    offset: p.offset,
                    masks,
                    score,
                    pardoned: false,
                }
            })
            .collect()
    }
}

/// Per-view evaluation against ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewScores {
    pub scores: SegmentationScores,
    pub recall: RecallCurve,
    /// Angle (degrees) between matched predicted and true plane normals.
    pub normal_errors: Vec<f64>,
    pub pred_planes: usize,
    pub gt_planes: usize,
    pub pardoned: Vec<u32>,
}

pub fn evaluate_view(
    pred: &PlaneSegmentation,
    gt: &SceneGroundTruth,
    config: &MetricsConfig,
) -> Result<ViewScores, PipelineError> {
    let scores = segmentation_scores(pred, gt)?;
    let params = RecallParams {
        depth_cap: config.depth_cap,
        ..RecallParams::default()
    };
    let recall = plane_recall(pred, gt, &config.recall_thresholds, &params)?;
    let normal_errors = match_instances(&pred.labels, &gt.labels, params.iou_threshold)
        .into_iter()
        .map(|(p, g, _)| {
            angle_between_deg(
                &pred.planes[p as usize - 1].normal,
                &gt.planes[g as usize - 1].normal,
            )
        })
        .collect();
    let pardoned = if config.tolerance_protocol {
        geometric_tolerance_filter(pred, gt)?.into_iter().collect()
    } else {
        Vec::new()
    };
    Ok(ViewScores {
        scores,
        recall,
        normal_errors,
        pred_planes: pred.planes.len(),
        gt_planes: gt.planes.len(),
        pardoned,
    })
}

/// One scene of an evaluation suite: the inputs the pipeline sees and the
/// ground truth it is scored against.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalScene {
    pub name: String,
    pub rgb: ColorImage,
    pub depth: DepthMap,
    pub normals: NormalMap,
    pub gt: SceneGroundTruth,
}

impl EvalScene {
    /// The first view of a synthetic scene, fed its noisy renders.
    pub fn from_synth(name: impl Into<String>, scene: &SyntheticScene) -> Self {
        let v = &scene.first;
        Self {
            name: name.into(),
            rgb: v.rgb.clone(),
            depth: v.depth_noisy.clone(),
            normals: v.normals_noisy.clone(),
            gt: v.gt.clone(),
        }
    }

    pub fn input(&self) -> ViewInput<'_> {
        ViewInput {
            rgb: &self.rgb,
            depth: &self.depth,
            normals: &self.normals,
            intrinsics: &self.gt.intrinsics,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SuiteKind {
    /// Box and corridor rooms, 3 to 8 planes, exact depth and normals.
    Noiseless,
    /// As `Noiseless` with monocular-style depth noise and 3 degree normal noise.
    Noisy,
    /// Noiseless box rooms seen from two views 10 to 30 degrees apart.
    TwoView,
}

impl std::str::FromStr for SuiteKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "noiseless" => Ok(Self::Noiseless),
            "noisy" => Ok(Self::Noisy),
            "two-view" | "two_view" => Ok(Self::TwoView),
            other => Err(format!("unknown suite `{other}`")),
        }
    }
}

/// Scene specs of a reproducible suite; scene `i` uses seed `seed + i`.
pub fn suite_specs(kind: SuiteKind, count: usize, seed: u64) -> Vec<SceneSpec> {
    (0..count)
        .map(|i| {
            let s = seed.wrapping_add(i as u64);
            let room = if i % 2 == 0 {
                RoomType::Box
            } else {
                RoomType::Corridor
            };
            let planes = 3 + i % 6;
            let mut spec = SceneSpec::new(room, planes, s);
            match kind {
                SuiteKind::Noiseless => {}
                SuiteKind::Noisy => {
                    spec.noise = NoiseModel::monocular();
                    spec.normal_noise_deg = 3.0;
                }
                SuiteKind::TwoView => {
                    spec.room_type = RoomType::Box;
                    spec.plane_count = 3 + i % 4;
                    let mag = 10.0 + 20.0 * ((i * 7) % 11) as f64 / 10.0;
                    let yaw = if i % 2 == 0 { mag } else { -mag };
                    spec.second_view = Some(orbit_pose(yaw));
                }
            }
            spec
        })
        .collect()
}

pub fn generate_suite(specs: &[SceneSpec]) -> Result<Vec<SyntheticScene>, PipelineError> {
    specs
        .par_iter()
        .map(|s| generate_scene(s).map_err(PipelineError::from))
        .collect()
}

/// Ground-truth global planes of a two-view synthetic scene.
pub fn synth_gt_masked_planes(scene: &SyntheticScene) -> Vec<MaskedPlane> {
    let Some(tv) = &scene.two_view else {
        return Vec::new();
    };
    let views = [&scene.first, &tv.second];
    scene
        .surfaces
        .iter()
        .enumerate()
        .filter_map(|(s, plane)| {
            let masks: Vec<Vec<bool>> = views
                .iter()
                .map(|v| {
                    let label = v
                        .surface_of_label
                        .iter()
                        .position(|&x| x == s)
                        .map(|k| k as u32 + 1);
                    v.gt.labels.iter().map(|l| Some(*l) == label).collect()
                })
                .collect();
            masks.iter().flatten().any(|&m| m).then(|| MaskedPlane {
                normal: plane.normal,
                offset: plane.offset,
                masks,
                score: 0.0,
                pardoned: false,
            })
        })
        .collect()
}

/// Two-view AP under the three protocols: all criteria, without the offset
/// check, and without offset and normal checks.
pub fn two_view_ap_protocols(
    pred: &[MaskedPlane],
    gt: &[MaskedPlane],
    base: &ApParams,
) -> [f64; 3] {
    [
        two_view_plane_ap(pred, gt, base),
        two_view_plane_ap(
            pred,
            gt,
            &ApParams {
                use_offset: false,
                ..*base
            },
        ),
        two_view_plane_ap(
            pred,
            gt,
            &ApParams {
                use_offset: false,
                use_normal: false,
                ..*base
            },
        ),
    ]
}

/// One cell of an ablation grid.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationCell {
    pub variant: EstimatorVariant,
    pub use_crf: bool,
    /// Dotted config keys and their values.
    pub overrides: Vec<(String, toml::Value)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub crf: bool,
    pub overrides: String,
    pub scenes: usize,
    pub voi: f64,
    pub ri: f64,
    pub sc: f64,
    /// Mean recall over the configured depth-gap thresholds.
    pub recall: f64,
    pub wall_time_s: f64,
}

/// Cross product of variants, CRF switches and override sets.
pub fn ablation_grid(
    variants: &[EstimatorVariant],
    crf: &[bool],
    overrides: &[Vec<(String, toml::Value)>],
) -> Vec<AblationCell> {
    let empty = vec![Vec::new()];
    let overrides = if overrides.is_empty() {
        &empty[..]
    } else {
        overrides
    };
    let mut out = Vec::new();
    for &variant in variants {
        for &use_crf in crf {
            for o in overrides {
                out.push(AblationCell {
                    variant,
                    use_crf,
                    overrides: o.clone(),
                });
            }
        }
    }
    out
}

/// Runs every cell on every scene and averages the scores per cell. Scenes
/// of a cell run in parallel on the current rayon pool.
pub fn run_ablation(
    base: &PipelineConfig,
    cells: &[AblationCell],
    scenes: &[EvalScene],
) -> Result<Vec<AblationRow>, PipelineError> {
    let mut rows = Vec::with_capacity(cells.len());
    for cell in cells {
        let mut config = base.clone();
        for (k, v) in &cell.overrides {
            config = config.with_override(k, v.clone())?;
        }
        config.variant = cell.variant;
        config.use_crf = cell.use_crf;
        let start = Instant::now();
        let results: Vec<ViewScores> = scenes
            .par_iter()
            .map(|s| {
                let out = run_single_view(&s.input(), &config)?;
                evaluate_view(&out.segmentation, &s.gt, &config.metrics)
            })
            .collect::<Result<_, _>>()?;
        let wall = start.elapsed().as_secs_f64();
        let n = results.len().max(1) as f64;
        let mean = |f: &dyn Fn(&ViewScores) -> f64| results.iter().map(f).sum::<f64>() / n;
        rows.push(AblationRow {
            variant: cell.variant.short_name().to_string(),
            crf: cell.use_crf,
            overrides: cell
                .overrides
                .iter()
                .map(|(k, v)| format!("{k}={v}"))
                .collect::<Vec<_>>()
                .join(";"),
            scenes: results.len(),
            voi: mean(&|r| r.scores.voi),
            ri: mean(&|r| r.scores.ri),
            sc: mean(&|r| r.scores.sc),
            recall: mean(&|r| {
                r.recall.recall.iter().sum::<f64>() / r.recall.recall.len().max(1) as f64
            }),
            wall_time_s: wall,
        });
    }
    Ok(rows)
}
