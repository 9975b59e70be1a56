//! Geometric-optics ground truth.
//!
//! [`scene`] ray-traces synthetic reflector scenes into multi-view datasets;
//! [`caustic`] provides analytic virtual points for planar mirrors and
//! envelope-based catacaustic points for curved ones.

pub mod caustic;
pub mod scene;

pub use caustic::{
    envelope_points, planar_virtual_point, solve_specular_point, virtual_point_on_catacaustic,
    CatacausticSample, CircleSection, LineSection, Mirror1d, SourceSpec,
};
pub use scene::{
    generate_dataset, load_dataset, reflector_mask, render_reference, save_dataset, Dataset,
    DatasetParams, DatasetView, Marker, Material, OrbitSpec, PointLight, Reflector, SurfacePoint,
    SyntheticScene, Triangle,
};
