//! Point-based rendering of scenes with curved reflectors.
//!
//! The crate is organized around a dual point cloud representation: a static
//! primary cloud for the mostly-diffuse scene content and a reflection cloud
//! whose points are displaced per camera by a learned warp field. Both clouds
//! are rasterized with differentiable elliptical splatting and decoded by a
//! small neural renderer; everything trains end-to-end on multi-view images.
//!
//! Modules:
//! - [`geometry`]: cameras, rays, projections, mirror reflection.
//! - [`volume`]: convex reflection volume built from per-view masks.
//! - [`oracle`]: ray-traced synthetic datasets and analytic catacaustics.
//! - [`raster`]: differentiable splat rasterizer with an exact linear-time
//!   backward pass.
//! - [`neural`]: dense networks with reverse-mode gradients, the warp field,
//!   the two-headed renderer, the environment map, and Adam.
//! - [`losses`]: the five training loss terms plus PSNR/SSIM metrics.
//! - [`trainer`]: progressive optimization with warm-up and densification.
//! - [`pipeline`]: the shared forward render path.
//! - [`apps`]: correspondences, reflection editing, cloning, stereo.

pub mod apps;
pub mod error;
pub mod geometry;
pub mod img;
pub mod losses;
pub mod neural;
pub mod oracle;
pub mod pipeline;
pub mod ply;
pub mod raster;
pub mod trainer;
pub mod volume;

pub use error::{Error, Result};
pub use geometry::{Aabb, Camera, Ray};
pub use img::{FeatureImage, MaskImage};
pub use raster::{PointCloud, RasterOutput, Splat2D, SplatPoint};
pub use volume::{Halfspace, ReflectionVolume};
