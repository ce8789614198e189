//! Plane instance detection and reconstruction from a single image (or a
//! sparse set of posed images) given precomputed monocular depth and surface
//! normal maps.
//!
//! The crate is organised bottom-up:
//!
//! 1. [`raster`]: depth, normal and color rasters.
//! 2. [`geom`]: camera model, unprojection, cloud normalization, planes.
//! 3. [`graph`]: lattice neighborhood graph and exact binary min-cut.
//! 4. [`ransac`]: sequential, graph-cut and proximity-guided graph-cut RANSAC.
//! 5. [`crf`]: dense-CRF mean-field refinement and connected components.
//! 6. [`sparseview`]: scale alignment, cross-view matching and plane fusion.
//! 7. [`metrics`]: segmentation, depth-recall, tolerance and two-view AP metrics.
//! 8. [`synth`]: synthetic piecewise-planar scenes with ground truth.
//! 9. [`pipeline`]: end-to-end single-view and two-view drivers and config.

pub mod crf;
pub mod geom;
pub mod graph;
pub mod lattice;
pub mod maxflow;
pub mod metrics;
pub mod pipeline;
pub mod ransac;
pub mod raster;
pub mod sparseview;
pub mod synth;

pub use geom::{CameraIntrinsics, NormTransform, OrientedPointCloud, PlaneModel, Vec3};
pub use raster::{ColorImage, DepthMap, NormalMap};
