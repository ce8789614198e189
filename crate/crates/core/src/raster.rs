//! Row-major per-pixel rasters: depth, normals and color.

use nalgebra::Vector3;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum RasterError {
    #[error("raster of {width}x{height} needs {expected} entries, got {got}")]
    LengthMismatch {
        width: usize,
        height: usize,
        expected: usize,
        got: usize,
    },
}

fn check_len(width: usize, height: usize, got: usize) -> Result<(), RasterError> {
    let expected = width * height;
    if expected != got {
        return Err(RasterError::LengthMismatch {
            width,
            height,
            expected,
            got,
        });
    }
    Ok(())
}

/// Per-pixel depth along the optical axis (z-forward).
///
/// A pixel is valid when its value is finite and strictly positive; zero,
/// negative and NaN entries all mean "no measurement".
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    width: usize,
    height: usize,
    values: Vec<f64>,
}

impl DepthMap {
    pub fn new(width: usize, height: usize, values: Vec<f64>) -> Result<Self, RasterError> {
        check_len(width, height, values.len())?;
        Ok(Self {
            width,
            height,
            values,
        })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        Self {
            width,
            height,
            values: vec![value; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    #[inline]
    pub fn get(&self, idx: usize) -> f64 {
        self.values[idx]
    }

    /// Depth at `idx` when valid.
    #[inline]
    pub fn valid(&self, idx: usize) -> Option<f64> {
        let z = self.values[idx];
        (z.is_finite() && z > 0.0).then_some(z)
    }

    #[inline]
    pub fn is_valid(&self, idx: usize) -> bool {
        self.valid(idx).is_some()
    }

    pub fn valid_count(&self) -> usize {
        (0..self.values.len()).filter(|&i| self.is_valid(i)).count()
    }

    /// Returns a copy with every valid depth multiplied by `scale`.
    pub fn scaled(&self, scale: f64) -> Self {
        let values = self
            .values
            .iter()
            .map(|&z| {
                if z.is_finite() && z > 0.0 {
                    z * scale
                } else {
                    z
                }
            })
            .collect();
        Self {
            width: self.width,
            height: self.height,
            values,
        }
    }

    pub fn same_shape(&self, width: usize, height: usize) -> bool {
        self.width == width && self.height == height
    }
}

/// Per-pixel camera-frame surface normals with a validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalMap {
    width: usize,
    height: usize,
    normals: Vec<Vector3<f64>>,
    valid: Vec<bool>,
}

/// Tolerance on |n| for a raw vector to count as a valid unit normal.
pub const NORMAL_UNIT_TOLERANCE: f64 = 1e-4;

impl NormalMap {
    /// Builds a normal map from raw vectors. Vectors that are not unit length
    /// within [`NORMAL_UNIT_TOLERANCE`] (including zero and NaN vectors) are
    /// marked invalid; accepted vectors are renormalized.
    pub fn from_vectors(
        width: usize,
        height: usize,
        raw: Vec<Vector3<f64>>,
    ) -> Result<Self, RasterError> {
        check_len(width, height, raw.len())?;
        let mut valid = Vec::with_capacity(raw.len());
        let normals = raw
            .into_iter()
            .map(|n| {
                let norm = n.norm();
                let ok = norm.is_finite() && (norm - 1.0).abs() <= NORMAL_UNIT_TOLERANCE;
                valid.push(ok);
                if ok {
                    n / norm
                } else {
                    Vector3::zeros()
                }
            })
            .collect();
        Ok(Self {
            width,
            height,
            normals,
            valid,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len(&self) -> usize {
        self.normals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.normals.is_empty()
    }

    #[inline]
    pub fn get(&self, idx: usize) -> Option<Vector3<f64>> {
        self.valid[idx].then(|| self.normals[idx])
    }

    #[inline]
    pub fn is_valid(&self, idx: usize) -> bool {
        self.valid[idx]
    }

    /// Raw storage; invalid entries are zero vectors.
    pub fn vectors(&self) -> &[Vector3<f64>] {
        &self.normals
    }

    pub fn same_shape(&self, width: usize, height: usize) -> bool {
        self.width == width && self.height == height
    }
}

/// RGB raster with channels in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct ColorImage {
    width: usize,
    height: usize,
    pixels: Vec<[f64; 3]>,
}

impl ColorImage {
    pub fn new(width: usize, height: usize, pixels: Vec<[f64; 3]>) -> Result<Self, RasterError> {
        check_len(width, height, pixels.len())?;
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Self {
        Self {
            width,
            height,
            pixels: vec![rgb; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[[f64; 3]] {
        &self.pixels
    }

    #[inline]
    pub fn get(&self, idx: usize) -> [f64; 3] {
        self.pixels[idx]
    }

    pub fn same_shape(&self, width: usize, height: usize) -> bool {
        self.width == width && self.height == height
    }
}
