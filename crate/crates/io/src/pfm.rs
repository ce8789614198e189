//! Portable float map: `Pf` (1 channel) or `PF` (3 channels), float32.
//!
//! Rows are stored bottom-to-top on disk and exposed top-to-bottom here.
//! Writers always emit little-endian data (negative scale); readers accept
//! either byte order.

use nalgebra::Vector3;
use planeseg::raster::{DepthMap, NormalMap};

use crate::IoError;

#[derive(Debug, Clone, PartialEq)]
pub struct Pfm {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    /// Row-major, top row first, channels interleaved.
    pub data: Vec<f32>,
}

impl Pfm {
    pub fn new(
        width: usize,
        height: usize,
        channels: usize,
        data: Vec<f32>,
    ) -> Result<Self, IoError> {
        if channels != 1 && channels != 3 {
            return Err(IoError::Format(format!(
                "pfm supports 1 or 3 channels, got {channels}"
            )));
        }
        if width == 0 || height == 0 {
            return Err(IoError::Format(format!(
                "pfm size {width}x{height} is empty"
            )));
        }
        if data.len() != width * height * channels {
            return Err(IoError::Format(format!(
                "pfm {width}x{height}x{channels} needs {} samples, got {}",
                width * height * channels,
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }
}

fn next_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a [u8], IoError> {
    while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(IoError::Format("truncated pfm header".into()));
    }
    Ok(&bytes[start..*pos])
}

fn parse_token<T: std::str::FromStr>(token: &[u8], what: &str) -> Result<T, IoError> {
    std::str::from_utf8(token)
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| IoError::Format(format!("bad pfm {what}")))
}

pub fn decode_pfm(bytes: &[u8]) -> Result<Pfm, IoError> {
    let mut pos = 0;
    let channels = match next_token(bytes, &mut pos)? {
        b"PF" => 3,
        b"Pf" => 1,
        _ => return Err(IoError::Format("missing PF/Pf magic".into())),
    };
    let width: usize = parse_token(next_token(bytes, &mut pos)?, "width")?;
    let height: usize = parse_token(next_token(bytes, &mut pos)?, "height")?;
    if width == 0 || height == 0 {
        return Err(IoError::Format(format!(
            "pfm size {width}x{height} is empty"
        )));
    }
    let scale: f64 = parse_token(next_token(bytes, &mut pos)?, "scale")?;
    if !scale.is_finite() || scale == 0.0 {
        return Err(IoError::Format(
            "pfm scale must be finite and nonzero".into(),
        ));
    }
    // Exactly one whitespace byte separates the header from the data.
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(IoError::Format("truncated pfm header".into()));
    }
    pos += 1;
    let samples = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(channels))
        .ok_or_else(|| IoError::Format("pfm dimensions overflow".into()))?;
    let body = &bytes[pos..];
    if samples.checked_mul(4) != Some(body.len()) {
        return Err(IoError::Format(format!(
            "pfm body has {} bytes, expected {} samples",
            body.len(),
            samples
        )));
    }
    let little = scale < 0.0;
    let row_len = width * channels;
    let mut data = vec![0f32; samples];
    for (i, chunk) in body.chunks_exact(4).enumerate() {
        let raw = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if little {
            f32::from_le_bytes(raw)
        } else {
            f32::from_be_bytes(raw)
        };
        let (disk_row, col) = (i / row_len, i % row_len);
        data[(height - 1 - disk_row) * row_len + col] = v;
    }
    Pfm::new(width, height, channels, data)
}

pub fn encode_pfm(pfm: &Pfm) -> Vec<u8> {
    let magic = if pfm.channels == 3 { "PF" } else { "Pf" };
    let mut out = format!("{magic}\n{} {}\n-1.0\n", pfm.width, pfm.height).into_bytes();
    let row_len = pfm.width * pfm.channels;
    out.reserve(pfm.data.len() * 4);
    for row in (0..pfm.height).rev() {
        for v in &pfm.data[row * row_len..(row + 1) * row_len] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn depth_to_pfm(depth: &DepthMap) -> Pfm {
    Pfm {
        width: depth.width(),
        height: depth.height(),
        channels: 1,
        data: depth.values().iter().map(|&v| v as f32).collect(),
    }
}

pub fn pfm_to_depth(pfm: &Pfm) -> Result<DepthMap, IoError> {
    if pfm.channels != 1 {
        return Err(IoError::Format("depth map must be a 1-channel pfm".into()));
    }
    Ok(DepthMap::new(
        pfm.width,
        pfm.height,
        pfm.data.iter().map(|&v| v as f64).collect(),
    )?)
}

/// Invalid normals are written as zero vectors.
pub fn normals_to_pfm(normals: &NormalMap) -> Pfm {
    let mut data = Vec::with_capacity(normals.len() * 3);
    for i in 0..normals.len() {
        let n = normals.get(i).unwrap_or_else(Vector3::zeros);
        data.extend([n.x as f32, n.y as f32, n.z as f32]);
    }
    Pfm {
        width: normals.width(),
        height: normals.height(),
        channels: 3,
        data,
    }
}

pub fn pfm_to_normals(pfm: &Pfm) -> Result<NormalMap, IoError> {
    if pfm.channels != 3 {
        return Err(IoError::Format("normal map must be a 3-channel pfm".into()));
    }
    let raw = pfm
        .data
        .chunks_exact(3)
        .map(|c| Vector3::new(c[0] as f64, c[1] as f64, c[2] as f64))
        .collect();
    Ok(NormalMap::from_vectors(pfm.width, pfm.height, raw)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rows_are_flipped_on_disk() {
        let pfm = Pfm::new(2, 2, 1, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let bytes = encode_pfm(&pfm);
        let header = b"Pf\n2 2\n-1.0\n";
        assert_eq!(&bytes[..header.len()], header);
        let first = f32::from_le_bytes(bytes[header.len()..header.len() + 4].try_into().unwrap());
        assert_eq!(first, 3.0);
        assert_eq!(decode_pfm(&bytes).unwrap(), pfm);
    }

    #[test]
    fn empty_dimensions_are_rejected() {
        assert!(decode_pfm(b"Pf\n0 1000000000000\n-1.0\n").is_err());
        assert!(decode_pfm(b"PF\n7 0\n-1.0\n").is_err());
        assert!(Pfm::new(0, 3, 1, Vec::new()).is_err());
    }

    #[test]
    fn big_endian_input_is_accepted() {
        let mut bytes = b"Pf\n1 2\n1.0\n".to_vec();
        bytes.extend(5.0f32.to_be_bytes());
        bytes.extend(7.0f32.to_be_bytes());
        let pfm = decode_pfm(&bytes).unwrap();
        assert_eq!(pfm.data, vec![7.0, 5.0]);
    }

    #[test]
    fn malformed_inputs_are_rejected() {
        assert!(decode_pfm(b"").is_err());
        assert!(decode_pfm(b"P6\n1 1\n-1\n").is_err());
        assert!(decode_pfm(b"Pf\n1 1\n0\n\0\0\0\0").is_err());
        assert!(decode_pfm(b"Pf\n2 1\n-1\n\0\0\0\0").is_err());
        assert!(decode_pfm(b"Pf\n99999999999 99999999999\n-1\n").is_err());
    }

    #[test]
    fn normals_keep_invalid_pixels_invalid() {
        let raw = vec![Vector3::new(0.0, 0.0, 1.0), Vector3::zeros()];
        let normals = NormalMap::from_vectors(2, 1, raw).unwrap();
        let back =
            pfm_to_normals(&decode_pfm(&encode_pfm(&normals_to_pfm(&normals))).unwrap()).unwrap();
        assert!(back.is_valid(0));
        assert!(!back.is_valid(1));
    }
}
