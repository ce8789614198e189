//! Binary little-endian PLY with colored vertices and polygon faces.

use nalgebra::Vector3;

use crate::IoError;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlyVertex {
    pub position: [f32; 3],
    pub color: [u8; 3],
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PlyMesh {
    pub vertices: Vec<PlyVertex>,
    pub faces: Vec<Vec<u32>>,
}

const HEADER_VERTEX: &str = "property float x\nproperty float y\nproperty float z\n\
property uchar red\nproperty uchar green\nproperty uchar blue\n";
const HEADER_FACE: &str = "property list uchar int vertex_indices\n";
const MAX_HEADER: usize = 4096;

pub fn encode_ply(mesh: &PlyMesh) -> Result<Vec<u8>, IoError> {
    let mut out = format!(
        "ply\nformat binary_little_endian 1.0\nelement vertex {}\n{HEADER_VERTEX}element face {}\n{HEADER_FACE}end_header\n",
        mesh.vertices.len(),
        mesh.faces.len()
    )
    .into_bytes();
    for v in &mesh.vertices {
        for c in v.position {
            out.extend(c.to_le_bytes());
        }
        out.extend(v.color);
    }
    for f in &mesh.faces {
        let n = u8::try_from(f.len())
            .map_err(|_| IoError::Format("face has more than 255 vertices".into()))?;
        out.push(n);
        for &i in f {
            if i as usize >= mesh.vertices.len() {
                return Err(IoError::Format(format!("face index {i} out of range")));
            }
            out.extend((i as i32).to_le_bytes());
        }
    }
    Ok(out)
}

/// Reads the layout written by [`encode_ply`].
pub fn decode_ply(bytes: &[u8]) -> Result<PlyMesh, IoError> {
    let marker = b"end_header\n";
    let end = bytes
        .windows(marker.len())
        .take(MAX_HEADER)
        .position(|w| w == marker)
        .ok_or_else(|| IoError::Format("missing ply end_header".into()))?;
    let header = std::str::from_utf8(&bytes[..end])
        .map_err(|_| IoError::Format("ply header is not utf-8".into()))?;
    let body = &bytes[end + marker.len()..];

    let mut lines = header.lines();
    let mut expect = |want: &str| -> Result<String, IoError> {
        match lines.next() {
            Some(l) if l.starts_with(want) => Ok(l[want.len()..].to_string()),
            _ => Err(IoError::Format(format!(
                "expected ply header line {want:?}"
            ))),
        }
    };
    expect("ply")?;
    expect("format binary_little_endian 1.0")?;
    let nv: usize = expect("element vertex ")?
        .parse()
        .map_err(|_| IoError::Format("bad vertex count".into()))?;
    for line in HEADER_VERTEX.lines() {
        expect(line)?;
    }
    let nf: usize = expect("element face ")?
        .parse()
        .map_err(|_| IoError::Format("bad face count".into()))?;
    expect(HEADER_FACE.trim_end())?;
    if lines.next().is_some() {
        return Err(IoError::Format("unexpected ply header content".into()));
    }

    let vertex_bytes = nv
        .checked_mul(15)
        .filter(|&n| n <= body.len())
        .ok_or_else(|| IoError::Format("ply vertex data truncated".into()))?;
    let vertices = body[..vertex_bytes]
        .chunks_exact(15)
        .map(|c| {
            let f = |o: usize| f32::from_le_bytes([c[o], c[o + 1], c[o + 2], c[o + 3]]);
            PlyVertex {
                position: [f(0), f(4), f(8)],
                color: [c[12], c[13], c[14]],
            }
        })
        .collect();

    let mut rest = &body[vertex_bytes..];
    // Every face needs at least its count byte.
    if nf > rest.len() {
        return Err(IoError::Format("ply face data truncated".into()));
    }
    let mut faces = Vec::with_capacity(nf);
    for _ in 0..nf {
        let (&n, tail) = rest
            .split_first()
            .ok_or_else(|| IoError::Format("ply face data truncated".into()))?;
        let len = n as usize * 4;
        if tail.len() < len {
            return Err(IoError::Format("ply face data truncated".into()));
        }
        let face = tail[..len]
            .chunks_exact(4)
            .map(|c| {
                let i = i32::from_le_bytes([c[0], c[1], c[2], c[3]]);
                u32::try_from(i)
                    .ok()
                    .filter(|&i| (i as usize) < nv)
                    .ok_or_else(|| IoError::Format(format!("face index {i} out of range")))
            })
            .collect::<Result<Vec<u32>, _>>()?;
        faces.push(face);
        rest = &tail[len..];
    }
    if !rest.is_empty() {
        return Err(IoError::Format("trailing bytes after ply data".into()));
    }
    Ok(PlyMesh { vertices, faces })
}

/// Distinct, deterministic color for plane `index`.
pub fn plane_color(index: usize) -> [u8; 3] {
    let hue = (index as f64 * 0.618_033_988_749_895).fract() * 6.0;
    let x = 1.0 - (hue % 2.0 - 1.0).abs();
    let (r, g, b) = match hue as u32 {
        0 => (1.0, x, 0.0),
        1 => (x, 1.0, 0.0),
        2 => (0.0, 1.0, x),
        3 => (0.0, x, 1.0),
        4 => (x, 0.0, 1.0),
        _ => (1.0, 0.0, x),
    };
    [r, g, b].map(|c: f64| (55.0 + 200.0 * c).round() as u8)
}

/// Appends one quad per masked pixel of a `width`-wide raster. `corner(u, v)`
/// places the image point `(u, v)` in 3D; quads sharing a pixel corner share
/// the vertex, and pixels with an unplaceable corner are skipped.
pub fn push_mask_patch(
    mesh: &mut PlyMesh,
    width: usize,
    mask: &[bool],
    color: [u8; 3],
    corner: impl Fn(f64, f64) -> Option<Vector3<f64>>,
) {
    if width == 0 {
        return;
    }
    let height = mask.len() / width;
    let mut ids: Vec<Option<Option<u32>>> = vec![None; (width + 1) * (height + 1)];
    let mut vertex = |mesh: &mut PlyMesh, r: usize, c: usize| -> Option<u32> {
        *ids[r * (width + 1) + c].get_or_insert_with(|| {
            let p = corner(c as f64 - 0.5, r as f64 - 0.5)?;
            mesh.vertices.push(PlyVertex {
                position: [p.x as f32, p.y as f32, p.z as f32],
                color,
            });
            Some(mesh.vertices.len() as u32 - 1)
        })
    };
    for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        let (r, c) = (i / width, i % width);
        let quad =
            [(r, c), (r, c + 1), (r + 1, c + 1), (r + 1, c)].map(|(r, c)| vertex(mesh, r, c));
        if let [Some(a), Some(b), Some(c), Some(d)] = quad {
            mesh.faces.push(vec![a, b, c, d]);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_patch_shares_corners() {
        let mask = [true, true, false, true];
        let mut mesh = PlyMesh::default();
        push_mask_patch(&mut mesh, 2, &mask, [1, 2, 3], |u, v| {
            Some(Vector3::new(u, v, 5.0))
        });
        assert_eq!(mesh.vertices.len(), 8);
        assert_eq!(mesh.faces.len(), 3);
        assert!(mesh
            .vertices
            .iter()
            .all(|v| v.position[2] == 5.0 && v.color == [1, 2, 3]));
        let first: Vec<[f32; 3]> = mesh.faces[0]
            .iter()
            .map(|&i| mesh.vertices[i as usize].position)
            .collect();
        assert_eq!(
            first,
            vec![
                [-0.5, -0.5, 5.0],
                [0.5, -0.5, 5.0],
                [0.5, 0.5, 5.0],
                [-0.5, 0.5, 5.0]
            ]
        );
    }

    #[test]
    fn unplaceable_corners_drop_their_pixels() {
        let mut mesh = PlyMesh::default();
        push_mask_patch(&mut mesh, 2, &[true, true], [0; 3], |u, _| {
            (u < 1.0).then(|| Vector3::new(u, 0.0, 1.0))
        });
        assert_eq!(mesh.faces.len(), 1);
    }

    #[test]
    fn encode_decode_round_trip() {
        let mesh = PlyMesh {
            vertices: vec![
                PlyVertex {
                    position: [1.0, -2.0, 3.5],
                    color: [1, 2, 3],
                },
                PlyVertex {
                    position: [0.0, 0.0, 0.0],
                    color: [255, 0, 9],
                },
                PlyVertex {
                    position: [4.0, 4.0, 4.0],
                    color: [7, 7, 7],
                },
            ],
            faces: vec![vec![0, 1, 2]],
        };
        let bytes = encode_ply(&mesh).unwrap();
        assert_eq!(decode_ply(&bytes).unwrap(), mesh);
    }

    #[test]
    fn bad_face_index_is_rejected() {
        let mesh = PlyMesh {
            vertices: vec![],
            faces: vec![vec![0]],
        };
        assert!(encode_ply(&mesh).is_err());
    }

    #[test]
    fn colors_differ_between_neighbors() {
        for k in 0..20 {
            assert_ne!(plane_color(k), plane_color(k + 1));
        }
    }
}
