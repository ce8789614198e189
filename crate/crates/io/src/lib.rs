//! On-disk formats for planeseg.
//!
//! Depth and normal maps are PFM, labels are 16-bit grayscale PNG, colors
//! 8-bit RGB PNG, records are versioned JSON and meshes binary PLY.
//! [`layout`] fixes the file names inside scene directories.

use std::path::{Path, PathBuf};

use thiserror::Error;

pub mod json;
pub mod layout;
pub mod pfm;
pub mod ply;
pub mod png;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    In { path: PathBuf, source: Box<IoError> },
    #[error("malformed data: {0}")]
    Format(String),
    #[error("png: {0}")]
    Image(#[from] image::ImageError),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unsupported schema_version {0}")]
    Schema(u32),
    #[error(transparent)]
    Raster(#[from] planeseg::raster::RasterError),
    #[error(transparent)]
    Geom(#[from] planeseg::geom::GeomError),
    #[error(transparent)]
    Crf(#[from] planeseg::crf::CrfError),
    #[error(transparent)]
    Sparse(#[from] planeseg::sparseview::SparseError),
}

pub fn read_file(path: &Path) -> Result<Vec<u8>, IoError> {
    std::fs::read(path).map_err(|source| IoError::File {
        path: path.to_path_buf(),
        source,
    })
}

/// Creates parent directories as needed.
pub fn write_file(path: &Path, bytes: &[u8]) -> Result<(), IoError> {
    let io = |source| IoError::File {
        path: path.to_path_buf(),
        source,
    };
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(io)?;
    }
    std::fs::write(path, bytes).map_err(io)
}

/// Reads `path` and decodes it, tagging decode errors with the path.
pub fn load<T>(
    path: &Path,
    decode: impl FnOnce(&[u8]) -> Result<T, IoError>,
) -> Result<T, IoError> {
    let bytes = read_file(path)?;
    decode(&bytes).map_err(|e| IoError::In {
        path: path.to_path_buf(),
        source: Box::new(e),
    })
}
