use planeseg::crf::PlaneSegmentation;
use planeseg::geom::{CameraIntrinsics, PlaneModel};
use planeseg::sparseview::{plane_to_camera, GlobalPlane, PosedView};
use planeseg_io::ply::{plane_color, push_mask_patch, PlyMesh};

fn mask(seg: &PlaneSegmentation, label: u32) -> Vec<bool> {
    seg.labels.iter().map(|&l| l == label).collect()
}

fn push_plane(
    mesh: &mut PlyMesh,
    seg: &PlaneSegmentation,
    label: u32,
    color: [u8; 3],
    k: &CameraIntrinsics,
    plane: &PlaneModel,
    to_out: impl Fn(nalgebra::Vector3<f64>) -> nalgebra::Vector3<f64>,
) {
    push_mask_patch(mesh, seg.width, &mask(seg, label), color, |u, v| {
        let ray = k.ray(u, v);
        plane.depth_along(&ray).map(|z| to_out(ray * z))
    });
}

/// Camera-frame mesh: each plane's mask lifted onto the plane.
pub fn single_view_mesh(seg: &PlaneSegmentation, k: &CameraIntrinsics) -> PlyMesh {
    let mut mesh = PlyMesh::default();
    for (i, plane) in seg.planes.iter().enumerate() {
        push_plane(
            &mut mesh,
            seg,
            i as u32 + 1,
            plane_color(i),
            k,
            plane,
            |p| p,
        );
    }
    mesh
}

/// One view's contribution to a world-frame plane.
pub struct ViewPart<'a> {
    pub seg: &'a PlaneSegmentation,
    pub posed: &'a PosedView,
}

/// World-frame mesh of global planes; `members[i][v]` is the label of plane
/// `i` in view `v`, whose mask is lifted onto the (fused) plane.
pub fn fused_mesh(
    planes: &[GlobalPlane],
    members: &[[Option<u32>; 2]],
    views: [ViewPart; 2],
) -> PlyMesh {
    let mut mesh = PlyMesh::default();
    for (i, (plane, ids)) in planes.iter().zip(members).enumerate() {
        for (part, id) in views.iter().zip(ids) {
            let Some(id) = *id else { continue };
            let local = plane_to_camera(plane, part.posed);
            push_plane(
                &mut mesh,
                part.seg,
                id,
                plane_color(i),
                &part.posed.intrinsics,
                &local,
                |p| part.posed.to_world(&p),
            );
        }
    }
    mesh
}
