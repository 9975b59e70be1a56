//! Shared fixtures for the criterion benchmarks.

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use catasplat_core::raster::{PointCloud, SplatPoint, FEATURE_DIM};
use catasplat_core::Camera;

/// Random splat cloud in front of a centered camera.
pub fn bench_scene(n_points: usize, width: u32, height: u32) -> (PointCloud, Camera) {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut cloud = PointCloud::default();
    for _ in 0..n_points {
        let position = Vector3::new(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(2.0..6.0),
        );
        let normal = Vector3::new(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..-0.2),
        )
        .normalize();
        let mut features = [0.0; FEATURE_DIM];
        for f in features.iter_mut() {
            *f = rng.gen_range(-1.0..1.0);
        }
        cloud.points.push(SplatPoint::new(
            position,
            normal,
            rng.gen_range(0.001..0.01),
            rng.gen_range(0.2..0.9),
            features,
            Some(rng.gen_range(0.1..0.9)),
        ));
    }
    let focal = 0.9 * width as f64;
    let camera = Camera::new(
        Vector3::new(0.0, 0.0, -1.0),
        Matrix3::identity(),
        focal,
        focal,
        width as f64 / 2.0,
        height as f64 / 2.0,
        width,
        height,
    )
    .unwrap();
    (cloud, camera)
}
