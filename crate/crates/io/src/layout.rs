//! Scene directory layout.
//!
//! A view directory holds `rgb.png`, `depth.pfm`, `normals.pfm` and
//! `intrinsics.json`. A segmentation directory holds `labels.png` and
//! `planes.json`; a ground-truth directory adds `depth.pfm` and
//! `intrinsics.json`. Synthetic scenes put their ground truth in `gt/`.
//!
//! A two-view directory holds `view0/` and `view1/` (each a view directory
//! plus `sparse_depth.pfm`), `poses.json` and `tracks.json`. Synthetic
//! two-view scenes also carry `gt_planes.json`, the world-frame surfaces
//! with the per-view labels they cover.

use std::path::Path;

use planeseg::crf::PlaneSegmentation;
use planeseg::geom::CameraIntrinsics;
use planeseg::metrics::{MaskedPlane, SceneGroundTruth};
use planeseg::raster::{ColorImage, DepthMap, NormalMap};
use planeseg::sparseview::{GlobalPlane, PosedView};
use planeseg::synth::{RenderedView, SyntheticScene};

use crate::json::{
    from_json, to_json, GlobalPlanesDoc, IntrinsicsDoc, PlanesDoc, PoseRecord, PosesDoc, TracksDoc,
    ViewTracks,
};
use crate::pfm::{
    decode_pfm, depth_to_pfm, encode_pfm, normals_to_pfm, pfm_to_depth, pfm_to_normals,
};
use crate::png::{decode_labels, decode_rgb, encode_labels, encode_rgb, LabelImage};
use crate::{load, write_file, IoError};

pub const RGB: &str = "rgb.png";
pub const DEPTH: &str = "depth.pfm";
pub const NORMALS: &str = "normals.pfm";
pub const INTRINSICS: &str = "intrinsics.json";
pub const LABELS: &str = "labels.png";
pub const PLANES: &str = "planes.json";
pub const PLANAR_DEPTH: &str = "planar_depth.pfm";
pub const MESH: &str = "mesh.ply";
pub const SPARSE_DEPTH: &str = "sparse_depth.pfm";
pub const POSES: &str = "poses.json";
pub const TRACKS: &str = "tracks.json";
pub const GLOBAL_PLANES: &str = "global_planes.json";
pub const GT_PLANES: &str = "gt_planes.json";
pub const GT_DIR: &str = "gt";
pub const VIEW_DIRS: [&str; 2] = ["view0", "view1"];

#[derive(Debug, Clone, PartialEq)]
pub struct ViewData {
    pub rgb: ColorImage,
    pub depth: DepthMap,
    pub normals: NormalMap,
    pub intrinsics: CameraIntrinsics,
}

pub fn read_depth(path: &Path) -> Result<DepthMap, IoError> {
    load(path, |b| pfm_to_depth(&decode_pfm(b)?))
}

pub fn write_depth(path: &Path, depth: &DepthMap) -> Result<(), IoError> {
    write_file(path, &encode_pfm(&depth_to_pfm(depth)))
}

pub fn read_intrinsics(path: &Path) -> Result<CameraIntrinsics, IoError> {
    load(path, |b| {
        let k = from_json::<IntrinsicsDoc>(b)?.intrinsics;
        k.validate()?;
        Ok(k)
    })
}

pub fn write_intrinsics(path: &Path, k: &CameraIntrinsics) -> Result<(), IoError> {
    write_file(path, &to_json(&IntrinsicsDoc::new(*k)))
}

fn check_shape(what: &str, w: usize, h: usize, k: &CameraIntrinsics) -> Result<(), IoError> {
    if (w, h) != (k.width, k.height) {
        return Err(IoError::Format(format!(
            "{what} is {w}x{h} but intrinsics say {}x{}",
            k.width, k.height
        )));
    }
    Ok(())
}

pub fn read_view(dir: &Path) -> Result<ViewData, IoError> {
    read_view_files(
        &dir.join(RGB),
        &dir.join(DEPTH),
        &dir.join(NORMALS),
        &dir.join(INTRINSICS),
    )
}

/// Reads a view from explicitly named files and checks their sizes agree.
pub fn read_view_files(
    rgb: &Path,
    depth: &Path,
    normals: &Path,
    intrinsics: &Path,
) -> Result<ViewData, IoError> {
    let intrinsics = read_intrinsics(intrinsics)?;
    let rgb = load(rgb, decode_rgb)?;
    let depth = read_depth(depth)?;
    let normals = load(normals, |b| pfm_to_normals(&decode_pfm(b)?))?;
    check_shape(RGB, rgb.width(), rgb.height(), &intrinsics)?;
    check_shape(DEPTH, depth.width(), depth.height(), &intrinsics)?;
    check_shape(NORMALS, normals.width(), normals.height(), &intrinsics)?;
    Ok(ViewData {
        rgb,
        depth,
        normals,
        intrinsics,
    })
}

pub fn write_view(dir: &Path, view: &ViewData) -> Result<(), IoError> {
    write_file(&dir.join(RGB), &encode_rgb(&view.rgb)?)?;
    write_depth(&dir.join(DEPTH), &view.depth)?;
    write_file(
        &dir.join(NORMALS),
        &encode_pfm(&normals_to_pfm(&view.normals)),
    )?;
    write_intrinsics(&dir.join(INTRINSICS), &view.intrinsics)
}

pub fn read_segmentation(dir: &Path) -> Result<PlaneSegmentation, IoError> {
    let labels = load(&dir.join(LABELS), decode_labels)?;
    let planes = load(&dir.join(PLANES), from_json::<PlanesDoc>)?;
    Ok(PlaneSegmentation::new(
        labels.width,
        labels.height,
        labels.labels,
        planes.plane_models(),
    )?)
}

pub fn write_segmentation(dir: &Path, seg: &PlaneSegmentation) -> Result<(), IoError> {
    let labels = LabelImage {
        width: seg.width,
        height: seg.height,
        labels: seg.labels.clone(),
    };
    write_file(&dir.join(LABELS), &encode_labels(&labels)?)?;
    write_file(
        &dir.join(PLANES),
        &to_json(&PlanesDoc::from_segmentation(seg)),
    )
}

pub fn read_ground_truth(dir: &Path) -> Result<SceneGroundTruth, IoError> {
    let seg = read_segmentation(dir)?;
    let intrinsics = read_intrinsics(&dir.join(INTRINSICS))?;
    let depth = read_depth(&dir.join(DEPTH))?;
    check_shape(LABELS, seg.width, seg.height, &intrinsics)?;
    check_shape(DEPTH, depth.width(), depth.height(), &intrinsics)?;
    Ok(SceneGroundTruth {
        intrinsics,
        labels: seg.labels,
        planes: seg.planes,
        depth,
    })
}

pub fn write_ground_truth(dir: &Path, gt: &SceneGroundTruth) -> Result<(), IoError> {
    write_segmentation(dir, &gt.as_segmentation())?;
    write_intrinsics(&dir.join(INTRINSICS), &gt.intrinsics)?;
    write_depth(&dir.join(DEPTH), &gt.depth)
}

/// Poses, sparse depths and tracks of a two-view directory.
pub fn read_posed_views(
    dir: &Path,
    intrinsics: [CameraIntrinsics; 2],
) -> Result<[PosedView; 2], IoError> {
    let poses = load(&dir.join(POSES), from_json::<PosesDoc>)?;
    let tracks = load(&dir.join(TRACKS), from_json::<TracksDoc>)?;
    let read = |i: usize| -> Result<PosedView, IoError> {
        let id = i as u32;
        let pose = poses
            .pose(id)
            .ok_or_else(|| IoError::Format(format!("{POSES} has no view_id {id}")))?;
        let sparse = read_depth(&dir.join(VIEW_DIRS[i]).join(SPARSE_DEPTH))?;
        Ok(PosedView::new(
            id,
            intrinsics[i],
            pose.rotation(),
            pose.translation(),
            sparse,
            tracks.keypoints(id),
        )?)
    };
    Ok([read(0)?, read(1)?])
}

pub fn write_posed_views(dir: &Path, views: &[PosedView; 2]) -> Result<(), IoError> {
    let poses = PosesDoc::new(
        views
            .iter()
            .map(|v| PoseRecord::new(v.view_id, &v.rotation, &v.translation))
            .collect(),
    );
    let tracks = TracksDoc::new(
        views
            .iter()
            .map(|v| ViewTracks::new(v.view_id, &v.keypoints))
            .collect(),
    );
    write_file(&dir.join(POSES), &to_json(&poses))?;
    write_file(&dir.join(TRACKS), &to_json(&tracks))?;
    for (i, v) in views.iter().enumerate() {
        write_depth(&dir.join(VIEW_DIRS[i]).join(SPARSE_DEPTH), &v.sparse_depth)?;
    }
    Ok(())
}

/// Global planes whose `sources` hold `[view, label]` pairs, expanded to
/// per-view masks over the given label rasters.
pub fn masked_planes(
    doc: &GlobalPlanesDoc,
    labels: [&[u32]; 2],
) -> Result<Vec<MaskedPlane>, IoError> {
    doc.planes
        .iter()
        .map(|p| {
            let mut masks: Vec<Vec<bool>> = labels.iter().map(|l| vec![false; l.len()]).collect();
            for &[view, id] in &p.sources {
                let mask = masks
                    .get_mut(view as usize)
                    .ok_or_else(|| IoError::Format(format!("plane source names view {view}")))?;
                for (m, &l) in mask.iter_mut().zip(labels[view as usize]) {
                    *m |= l == id;
                }
            }
            Ok(MaskedPlane {
                normal: p.normal.into(),
                offset: p.offset,
                masks,
                score: p.score,
                pardoned: false,
            })
        })
        .collect()
}

fn synth_view(dir: &Path, view: &RenderedView, depth: DepthMap) -> Result<(), IoError> {
    write_view(
        dir,
        &ViewData {
            rgb: view.rgb.clone(),
            depth,
            normals: view.normals_noisy.clone(),
            intrinsics: view.gt.intrinsics,
        },
    )?;
    write_ground_truth(&dir.join(GT_DIR), &view.gt)
}

/// Writes a synthetic scene: a view directory with `gt/`, or for two-view
/// scenes a two-view directory whose views carry monocular-scaled depth.
pub fn write_synth_scene(dir: &Path, scene: &SyntheticScene) -> Result<(), IoError> {
    let Some(tv) = &scene.two_view else {
        return synth_view(dir, &scene.first, scene.first.depth_noisy.clone());
    };
    let views = [&scene.first, &tv.second];
    for (i, v) in views.iter().enumerate() {
        synth_view(&dir.join(VIEW_DIRS[i]), v, tv.mono_depth(&scene.first, i))?;
    }
    write_posed_views(dir, &tv.posed)?;
    let mut planes = Vec::new();
    let mut counts = Vec::new();
    for (s, surface) in scene.surfaces.iter().enumerate() {
        let mut source = Vec::new();
        let mut count = 0;
        for (i, v) in views.iter().enumerate() {
            if let Some(k) = v.surface_of_label.iter().position(|&x| x == s) {
                let label = k as u32 + 1;
                source.push((i as u32, label));
                count += v.gt.labels.iter().filter(|&&l| l == label).count();
            }
        }
        if !source.is_empty() {
            planes.push(GlobalPlane {
                normal: surface.normal,
                offset: surface.offset,
                source,
            });
            counts.push(count);
        }
    }
    let total = views.iter().map(|v| v.gt.labels.len()).sum();
    write_file(
        &dir.join(GT_PLANES),
        &to_json(&GlobalPlanesDoc::new(&planes, &counts, total)),
    )
}
