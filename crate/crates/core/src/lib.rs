//! Cone-beam CT building blocks: acquisition geometry, attenuation volumes,
//! a ray-marching DRR projector with its backprojector, the FDK and SART
//! reconstructors, and PSNR/SSIM.

pub mod baselines;
mod error;
pub mod geometry;
pub mod interp;
pub mod metrics;
pub mod phantom;
pub mod points;
pub mod projection;
pub mod projector;
pub mod volume;

pub use error::{Error, Result};
pub use geometry::{sample_view_angles, DetectorPoint, ScannerGeometry, ViewAngleSet};
pub use points::{sample_points, PointBatch, PointSampling};
pub use projection::{Projection, ProjectionSet};
pub use volume::{GridSpec, Volume};
