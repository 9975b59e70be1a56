//! Whitted-style ray tracer for synthetic reflector scenes.
//!
//! Scenes combine one mirror primitive with textured diffuse triangles and
//! point lights. The tracer shades diffuse hits with shadowed Lambertian
//! lighting and follows a bounded number of mirror bounces; it is the
//! reference against which the learned renderer is evaluated, and the
//! source of synthetic training datasets.

use nalgebra::{Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{reflect_dir, Camera, Ray};
use crate::img::{FeatureImage, MaskImage};
use crate::ply::PointRecords;

const RAY_EPS: f64 = 1e-9;
const SHADOW_EPS: f64 = 1e-7;

/// Mirror primitive.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub enum Reflector {
    Sphere { center: Vector3<f64>, radius: f64 },
    /// Finite disk mirror.
    Plane { point: Vector3<f64>, normal: Vector3<f64>, extent: f64 },
    /// Concave spherical cap: the part of the sphere within `angle` of `axis`.
    Cap { center: Vector3<f64>, radius: f64, axis: Vector3<f64>, angle: f64 },
}

impl Reflector {
    /// Nearest intersection beyond `t_min`; returns (t, point, shading normal).
    pub fn intersect(&self, ray: &Ray, t_min: f64) -> Option<(f64, Vector3<f64>, Vector3<f64>)> {
        match self {
            Reflector::Sphere { center, radius } => {
                sphere_hit(ray, center, *radius, t_min, |_| true)
            }
            Reflector::Plane { point, normal, extent } => {
                let n = normal.normalize();
                let denom = ray.direction.dot(&n);
                if denom.abs() < 1e-12 {
                    return None;
                }
                let t = (point - ray.origin).dot(&n) / denom;
                if t <= t_min {
                    return None;
                }
                let p = ray.at(t);
                if (p - point).norm() > *extent {
                    return None;
                }
                let facing = if denom < 0.0 { n } else { -n };
                Some((t, p, facing))
            }
            Reflector::Cap { center, radius, axis, angle } => {
                let axis = axis.normalize();
                let cos_angle = angle.cos();
                sphere_hit(ray, center, *radius, t_min, |p| {
                    ((p - center) / *radius).dot(&axis) >= cos_angle
                })
            }
        }
    }

    pub fn center(&self) -> Vector3<f64> {
        match self {
            Reflector::Sphere { center, .. } | Reflector::Cap { center, .. } => *center,
            Reflector::Plane { point, .. } => *point,
        }
    }
}

fn sphere_hit(
    ray: &Ray,
    center: &Vector3<f64>,
    radius: f64,
    t_min: f64,
    accept: impl Fn(&Vector3<f64>) -> bool,
) -> Option<(f64, Vector3<f64>, Vector3<f64>)> {
    let oc = ray.origin - center;
    let b = oc.dot(&ray.direction);
    let c = oc.norm_squared() - radius * radius;
    let disc = b * b - c;
    if disc < 0.0 {
        return None;
    }
    let sq = disc.sqrt();
    for t in [-b - sq, -b + sq] {
        if t > t_min {
            let p = ray.at(t);
            if accept(&p) {
                let mut n = (p - center) / radius;
                if n.dot(&ray.direction) > 0.0 {
                    n = -n;
                }
                return Some((t, p, n));
            }
        }
    }
    None
}

/// Colored disk painted on a material's uv space.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Marker {
    pub uv: Vector2<f64>,
    pub radius: f64,
    pub color: Vector3<f64>,
    /// Emissive markers shine regardless of lighting.
    pub emissive: bool,
}

/// Procedural checkerboard with optional markers.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Material {
    pub checker_scale: f64,
    pub color_a: Vector3<f64>,
    pub color_b: Vector3<f64>,
    pub markers: Vec<Marker>,
}

impl Material {
    pub fn flat(color: Vector3<f64>) -> Self {
        Material { checker_scale: 1.0, color_a: color, color_b: color, markers: Vec::new() }
    }

    /// (albedo, emissive) at a uv location.
    pub fn shade(&self, uv: &Vector2<f64>) -> (Vector3<f64>, Vector3<f64>) {
        for m in &self.markers {
            if (uv - m.uv).norm() <= m.radius {
                return if m.emissive {
                    (Vector3::zeros(), m.color)
                } else {
                    (m.color, Vector3::zeros())
                };
            }
        }
        let cell = (uv.x * self.checker_scale).floor() as i64
            + (uv.y * self.checker_scale).floor() as i64;
        let albedo = if cell.rem_euclid(2) == 0 { self.color_a } else { self.color_b };
        (albedo, Vector3::zeros())
    }
}

/// Textured triangle; uv interpolated from the vertices.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Triangle {
    pub a: Vector3<f64>,
    pub b: Vector3<f64>,
    pub c: Vector3<f64>,
    pub uv_a: Vector2<f64>,
    pub uv_b: Vector2<f64>,
    pub uv_c: Vector2<f64>,
    pub material: usize,
}

impl Triangle {
    pub fn normal(&self) -> Vector3<f64> {
        (self.b - self.a).cross(&(self.c - self.a)).normalize()
    }

    pub fn area(&self) -> f64 {
        0.5 * (self.b - self.a).cross(&(self.c - self.a)).norm()
    }

    /// Moeller-Trumbore; returns (t, u, v) barycentric.
    pub fn intersect(&self, ray: &Ray, t_min: f64) -> Option<(f64, f64, f64)> {
        let e1 = self.b - self.a;
        let e2 = self.c - self.a;
        let pvec = ray.direction.cross(&e2);
        let det = e1.dot(&pvec);
        if det.abs() < 1e-14 {
            return None;
        }
        let inv = 1.0 / det;
        let tvec = ray.origin - self.a;
        let u = tvec.dot(&pvec) * inv;
        if !(-1e-12..=1.0 + 1e-12).contains(&u) {
            return None;
        }
        let qvec = tvec.cross(&e1);
        let v = ray.direction.dot(&qvec) * inv;
        if v < -1e-12 || u + v > 1.0 + 1e-12 {
            return None;
        }
        let t = e2.dot(&qvec) * inv;
        if t <= t_min {
            return None;
        }
        Some((t, u, v))
    }

    pub fn uv_at(&self, u: f64, v: f64) -> Vector2<f64> {
        self.uv_a * (1.0 - u - v) + self.uv_b * u + self.uv_c * v
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PointLight {
    pub position: Vector3<f64>,
    pub intensity: Vector3<f64>,
}

/// One mirror primitive plus diffuse triangles and point lights.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SyntheticScene {
    pub reflector: Option<Reflector>,
    pub triangles: Vec<Triangle>,
    pub materials: Vec<Material>,
    pub lights: Vec<PointLight>,
    pub background: Vector3<f64>,
    pub ambient: f64,
    pub max_bounces: u32,
}

impl SyntheticScene {
    fn hit_triangle(&self, ray: &Ray, t_min: f64) -> Option<(f64, usize, f64, f64)> {
        let mut best: Option<(f64, usize, f64, f64)> = None;
        for (i, tri) in self.triangles.iter().enumerate() {
            if let Some((t, u, v)) = tri.intersect(ray, t_min) {
                if best.map_or(true, |(bt, ..)| t < bt) {
                    best = Some((t, i, u, v));
                }
            }
        }
        best
    }

    fn occluded(&self, from: &Vector3<f64>, to: &Vector3<f64>) -> bool {
        let seg = to - from;
        let dist = seg.norm();
        if dist < SHADOW_EPS {
            return false;
        }
        let ray = Ray::new(*from, seg);
        if let Some((t, ..)) = self.hit_triangle(&ray, SHADOW_EPS) {
            if t < dist - SHADOW_EPS {
                return true;
            }
        }
        if let Some(r) = &self.reflector {
            if let Some((t, ..)) = r.intersect(&ray, SHADOW_EPS) {
                if t < dist - SHADOW_EPS {
                    return true;
                }
            }
        }
        false
    }

    fn shade_diffuse(&self, p: &Vector3<f64>, n: &Vector3<f64>, uv: &Vector2<f64>, mat: usize) -> Vector3<f64> {
        let (albedo, emissive) = self.materials[mat].shade(uv);
        let mut light = Vector3::repeat(self.ambient);
        for l in &self.lights {
            let to_light = l.position - p;
            let dist2 = to_light.norm_squared();
            let cos = n.dot(&to_light.normalize()).max(0.0);
            if cos > 0.0 && !self.occluded(&(p + n * SHADOW_EPS * 10.0), &l.position) {
                light += l.intensity * (cos / dist2);
            }
        }
        emissive + albedo.component_mul(&light)
    }

    /// Radiance along a ray with `bounces` mirror reflections remaining.
    pub fn trace(&self, ray: &Ray, bounces: u32) -> Vector3<f64> {
        let tri = self.hit_triangle(ray, RAY_EPS);
        let refl = self.reflector.as_ref().and_then(|r| r.intersect(ray, RAY_EPS));
        let tri_t = tri.map(|(t, ..)| t).unwrap_or(f64::INFINITY);
        let refl_t = refl.map(|(t, ..)| t).unwrap_or(f64::INFINITY);
        if refl_t < tri_t {
            let (_, p, n) = refl.unwrap();
            if bounces == 0 {
                return self.background;
            }
            let dir = reflect_dir(&ray.direction, &n);
            let next = Ray { origin: p + n * SHADOW_EPS * 10.0, direction: dir };
            return self.trace(&next, bounces - 1);
        }
        if let Some((_, i, u, v)) = tri {
            let tri = &self.triangles[i];
            let mut n = tri.normal();
            if n.dot(&ray.direction) > 0.0 {
                n = -n;
            }
            let p = ray.at(tri_t);
            let uv = tri.uv_at(u, v);
            return self.shade_diffuse(&p, &n, &uv, tri.material);
        }
        self.background
    }

    /// Axis-aligned rectangle as two triangles, mapped to the unit uv square.
    pub fn push_quad(
        &mut self,
        origin: Vector3<f64>,
        edge_u: Vector3<f64>,
        edge_v: Vector3<f64>,
        material: usize,
    ) {
        let (a, b, c, d) = (origin, origin + edge_u, origin + edge_u + edge_v, origin + edge_v);
        self.triangles.push(Triangle {
            a,
            b,
            c,
            uv_a: Vector2::new(0.0, 0.0),
            uv_b: Vector2::new(1.0, 0.0),
            uv_c: Vector2::new(1.0, 1.0),
            material,
        });
        self.triangles.push(Triangle {
            a,
            b: c,
            c: d,
            uv_a: Vector2::new(0.0, 0.0),
            uv_b: Vector2::new(1.0, 1.0),
            uv_c: Vector2::new(0.0, 1.0),
            material,
        });
    }
}

/// Render a camera view; `spp` stratified samples per pixel, deterministic.
pub fn render_reference(scene: &SyntheticScene, camera: &Camera, spp: u32) -> FeatureImage {
    assert!(spp >= 1);
    let w = camera.width as usize;
    let h = camera.height as usize;
    let m = (spp as f64).sqrt().ceil() as u32;
    let rows: Vec<Vec<f64>> = (0..h)
        .into_par_iter()
        .map(|y| {
            let mut row = vec![0.0; w * 3];
            for x in 0..w {
                let mut acc = Vector3::zeros();
                for s in 0..spp {
                    let sx = (s % m) as f64;
                    let sy = (s / m) as f64;
                    let ray = camera.pixel_ray(
                        x as f64 + (sx + 0.5) / m as f64,
                        y as f64 + (sy + 0.5) / m as f64,
                    );
                    acc += scene.trace(&ray, scene.max_bounces);
                }
                acc /= spp as f64;
                for c in 0..3 {
                    row[x * 3 + c] = acc[c].clamp(0.0, 1.0);
                }
            }
            row
        })
        .collect();
    let mut img = FeatureImage::new(w, h, 3);
    for (y, row) in rows.into_iter().enumerate() {
        img.data[y * w * 3..(y + 1) * w * 3].copy_from_slice(&row);
    }
    img
}

/// Pixels whose center ray hits the reflector first.
pub fn reflector_mask(scene: &SyntheticScene, camera: &Camera) -> MaskImage {
    let mut mask = MaskImage::new(camera.width as usize, camera.height as usize);
    let Some(reflector) = &scene.reflector else { return mask };
    for y in 0..mask.height {
        for x in 0..mask.width {
            let ray = camera.pixel_ray(x as f64 + 0.5, y as f64 + 0.5);
            let refl_t = reflector.intersect(&ray, RAY_EPS).map(|(t, ..)| t);
            if let Some(rt) = refl_t {
                let tri_t =
                    scene.hit_triangle(&ray, RAY_EPS).map(|(t, ..)| t).unwrap_or(f64::INFINITY);
                if rt < tri_t {
                    mask.set(x, y, true);
                }
            }
        }
    }
    mask
}

/// Sample on a diffuse surface with its shading data.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SurfacePoint {
    pub position: Vector3<f64>,
    pub normal: Vector3<f64>,
    pub color: Vector3<f64>,
}

/// Ring of cameras around a point of interest.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OrbitSpec {
    pub center: Vector3<f64>,
    pub radius: f64,
    pub height: f64,
    /// Swept arc in radians.
    pub sweep: f64,
    pub start_angle: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetParams {
    pub n_views: usize,
    pub width: u32,
    pub height: u32,
    pub focal: f64,
    pub spp: u32,
    pub n_points: usize,
    /// Carve this many holes out of the sampled point cloud.
    pub dropout_holes: usize,
    pub hole_radius: f64,
    /// Gaussian position noise emulating reconstruction error.
    pub jitter: f64,
    pub seed: u64,
}

impl Default for DatasetParams {
    fn default() -> Self {
        DatasetParams {
            n_views: 40,
            width: 64,
            height: 64,
            focal: 70.0,
            spp: 4,
            n_points: 6000,
            dropout_holes: 0,
            hole_radius: 0.0,
            jitter: 0.0,
            seed: 1,
        }
    }
}

#[derive(Clone, Debug)]
pub struct DatasetView {
    pub camera: Camera,
    pub image: FeatureImage,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub views: Vec<DatasetView>,
    pub points: Vec<SurfacePoint>,
    pub scene: Option<SyntheticScene>,
    /// Centers of the dropout holes carved out of `points` (in-memory only).
    pub holes: Vec<Vector3<f64>>,
}

/// Cameras on the orbit, all aimed at the orbit center.
pub fn orbit_cameras(orbit: &OrbitSpec, params: &DatasetParams) -> Vec<Camera> {
    let mut cams = Vec::with_capacity(params.n_views);
    for i in 0..params.n_views {
        let frac = if params.n_views > 1 { i as f64 / (params.n_views - 1) as f64 } else { 0.0 };
        let theta = orbit.start_angle + frac * orbit.sweep;
        let height = orbit.height * (1.0 + 0.15 * (3.0 * theta).sin());
        let pos = orbit.center
            + Vector3::new(orbit.radius * theta.cos(), height, orbit.radius * theta.sin());
        cams.push(
            Camera::look_at(
                pos,
                orbit.center,
                Vector3::y(),
                params.focal,
                params.focal,
                params.width as f64 / 2.0,
                params.height as f64 / 2.0,
                params.width,
                params.height,
            )
            .expect("orbit camera"),
        );
    }
    cams
}

/// Render an orbit of views and sample the diffuse surfaces.
///
/// Points are drawn from triangles only, mimicking multi-view stereo output
/// that misses the shiny reflector; holes and jitter emulate its defects.
pub fn generate_dataset(scene: &SyntheticScene, orbit: &OrbitSpec, params: &DatasetParams) -> Dataset {
    let cams = orbit_cameras(orbit, params);
    let views: Vec<DatasetView> = cams
        .into_iter()
        .map(|camera| {
            let image = render_reference(scene, &camera, params.spp);
            DatasetView { camera, image }
        })
        .collect();
    let (points, holes) = sample_diffuse_points(scene, params);
    Dataset { views, points, scene: Some(scene.clone()), holes }
}

fn sample_diffuse_points(
    scene: &SyntheticScene,
    params: &DatasetParams,
) -> (Vec<SurfacePoint>, Vec<Vector3<f64>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut cdf = Vec::with_capacity(scene.triangles.len());
    let mut total = 0.0;
    for tri in &scene.triangles {
        total += tri.area();
        cdf.push(total);
    }
    if total <= 0.0 {
        return (Vec::new(), Vec::new());
    }
    let sample_one = |rng: &mut ChaCha8Rng| -> SurfacePoint {
        let r = rng.gen_range(0.0..total);
        let i = cdf.partition_point(|&c| c < r).min(scene.triangles.len() - 1);
        let tri = &scene.triangles[i];
        let su = rng.gen::<f64>().sqrt();
        let t = rng.gen::<f64>();
        let (u, v) = (su * (1.0 - t), su * t);
        let position = tri.a * (1.0 - u - v) + tri.b * u + tri.c * v;
        let uv = tri.uv_at(u, v);
        let (albedo, emissive) = scene.materials[tri.material].shade(&uv);
        SurfacePoint { position, normal: tri.normal(), color: albedo + emissive }
    };
    let holes: Vec<Vector3<f64>> =
        (0..params.dropout_holes).map(|_| sample_one(&mut rng).position).collect();
    let normal = Normal::new(0.0, params.jitter.max(f64::MIN_POSITIVE)).unwrap();
    let mut out = Vec::with_capacity(params.n_points);
    let mut attempts = 0;
    while out.len() < params.n_points && attempts < params.n_points * 20 {
        attempts += 1;
        let mut s = sample_one(&mut rng);
        if holes.iter().any(|h| (h - s.position).norm() < params.hole_radius) {
            continue;
        }
        if params.jitter > 0.0 {
            s.position += Vector3::new(
                normal.sample(&mut rng),
                normal.sample(&mut rng),
                normal.sample(&mut rng),
            );
        }
        out.push(s);
    }
    (out, holes)
}

/// Write `cameras.json`, `images/view_####.{png,pfm}`, `masks/view_####.png`,
/// `points_primary.ply` and `scene.json` under `dir`.
pub fn save_dataset(dir: &std::path::Path, dataset: &Dataset) -> Result<()> {
    std::fs::create_dir_all(dir.join("images"))?;
    let cams: Vec<Camera> = dataset.views.iter().map(|v| v.camera.clone()).collect();
    crate::geometry::save_cameras(&dir.join("cameras.json"), &cams)?;
    for (i, view) in dataset.views.iter().enumerate() {
        crate::img::save_png(&dir.join(format!("images/view_{i:04}.png")), &view.image)?;
        crate::img::save_pfm(&dir.join(format!("images/view_{i:04}.pfm")), &view.image)?;
    }
    if let Some(scene) = &dataset.scene {
        if scene.reflector.is_some() {
            std::fs::create_dir_all(dir.join("masks"))?;
            for (i, view) in dataset.views.iter().enumerate() {
                let mask = reflector_mask(scene, &view.camera);
                crate::img::save_mask(&dir.join(format!("masks/view_{i:04}.png")), &mask)?;
            }
        }
        std::fs::write(dir.join("scene.json"), serde_json::to_string_pretty(scene)?)?;
    }
    let records = PointRecords {
        names: ["x", "y", "z", "nx", "ny", "nz", "red", "green", "blue"]
            .iter()
            .map(|s| s.to_string())
            .collect(),
        rows: dataset
            .points
            .iter()
            .map(|p| {
                vec![
                    p.position.x, p.position.y, p.position.z, p.normal.x, p.normal.y, p.normal.z,
                    p.color.x, p.color.y, p.color.z,
                ]
            })
            .collect(),
    };
    crate::ply::save_binary_points(&dir.join("points_primary.ply"), &records)?;
    Ok(())
}

/// Load a dataset directory written by [`save_dataset`].
///
/// PFM images are preferred over PNG when both exist.
pub fn load_dataset(dir: &std::path::Path) -> Result<Dataset> {
    let cams = crate::geometry::load_cameras(&dir.join("cameras.json"))?;
    let mut views = Vec::with_capacity(cams.len());
    for (i, camera) in cams.into_iter().enumerate() {
        let pfm = dir.join(format!("images/view_{i:04}.pfm"));
        let png = dir.join(format!("images/view_{i:04}.png"));
        let image = if pfm.exists() {
            crate::img::load_pfm(&pfm)?
        } else if png.exists() {
            crate::img::load_png(&png)?
        } else {
            return Err(Error::InvalidInput(format!("missing image for view {i}")));
        };
        if image.width != camera.width as usize || image.height != camera.height as usize {
            return Err(Error::ShapeMismatch(format!(
                "view {i}: image {}x{} vs camera {}x{}",
                image.width, image.height, camera.width, camera.height
            )));
        }
        views.push(DatasetView { camera, image });
    }
    let records = crate::ply::load_binary_points(&dir.join("points_primary.ply"))?;
    let (xi, yi, zi) =
        (records.column("x")?, records.column("y")?, records.column("z")?);
    let normals = records.column("nx").ok().map(|nx| (nx, records.column("ny").unwrap(), records.column("nz").unwrap()));
    let colors = records.column("red").ok().map(|r| (r, records.column("green").unwrap(), records.column("blue").unwrap()));
    let points = records
        .rows
        .iter()
        .map(|row| SurfacePoint {
            position: Vector3::new(row[xi], row[yi], row[zi]),
            normal: normals
                .map(|(a, b, c)| Vector3::new(row[a], row[b], row[c]))
                .unwrap_or_else(Vector3::z),
            color: colors
                .map(|(a, b, c)| Vector3::new(row[a], row[b], row[c]))
                .unwrap_or_else(|| Vector3::repeat(0.5)),
        })
        .collect();
    let scene_path = dir.join("scene.json");
    let scene = if scene_path.exists() {
        Some(serde_json::from_str(&std::fs::read_to_string(scene_path)?)?)
    } else {
        None
    };
    Ok(Dataset { views, points, scene, holes: Vec::new() })
}

/// Masks for each view of a dataset (reflector silhouettes).
pub fn load_masks(dir: &std::path::Path, n_views: usize) -> Result<Vec<MaskImage>> {
    (0..n_views)
        .map(|i| crate::img::load_mask(&dir.join(format!("masks/view_{i:04}.png"))))
        .collect()
}

/// Room with a centered sphere mirror, checkered floor and walls.
pub fn scene_sphere_room() -> SyntheticScene {
    let mut scene = SyntheticScene {
        reflector: Some(Reflector::Sphere { center: Vector3::new(0.0, 0.0, 0.0), radius: 0.45 }),
        triangles: Vec::new(),
        materials: vec![
            Material {
                checker_scale: 6.0,
                color_a: Vector3::new(0.85, 0.55, 0.25),
                color_b: Vector3::new(0.15, 0.12, 0.1),
                markers: vec![
                    Marker {
                        uv: Vector2::new(0.3, 0.62),
                        radius: 0.05,
                        color: Vector3::new(1.0, 0.05, 0.05),
                        emissive: true,
                    },
                    Marker {
                        uv: Vector2::new(0.72, 0.35),
                        radius: 0.05,
                        color: Vector3::new(0.05, 1.0, 0.1),
                        emissive: true,
                    },
                ],
            },
            Material {
                checker_scale: 5.0,
                color_a: Vector3::new(0.25, 0.45, 0.85),
                color_b: Vector3::new(0.9, 0.9, 0.9),
                markers: vec![Marker {
                    uv: Vector2::new(0.5, 0.4),
                    radius: 0.06,
                    color: Vector3::new(1.0, 0.9, 0.1),
                    emissive: true,
                }],
            },
            Material {
                checker_scale: 4.0,
                color_a: Vector3::new(0.4, 0.85, 0.45),
                color_b: Vector3::new(0.12, 0.12, 0.15),
                markers: vec![Marker {
                    uv: Vector2::new(0.35, 0.55),
                    radius: 0.06,
                    color: Vector3::new(0.95, 0.2, 0.95),
                    emissive: true,
                }],
            },
        ],
        lights: vec![
            PointLight { position: Vector3::new(1.4, 2.2, -1.2), intensity: Vector3::repeat(4.5) },
            PointLight { position: Vector3::new(-1.6, 1.8, 1.4), intensity: Vector3::repeat(3.0) },
        ],
        background: Vector3::new(0.04, 0.04, 0.06),
        ambient: 0.18,
        max_bounces: 1,
    };
    // floor
    scene.push_quad(
        Vector3::new(-2.2, -0.45, -2.2),
        Vector3::new(4.4, 0.0, 0.0),
        Vector3::new(0.0, 0.0, 4.4),
        0,
    );
    // back wall
    scene.push_quad(
        Vector3::new(-2.2, -0.45, 2.2),
        Vector3::new(4.4, 0.0, 0.0),
        Vector3::new(0.0, 3.0, 0.0),
        1,
    );
    // side wall
    scene.push_quad(
        Vector3::new(-2.2, -0.45, -2.2),
        Vector3::new(0.0, 0.0, 4.4),
        Vector3::new(0.0, 3.0, 0.0),
        2,
    );
    scene
}

/// Room with a planar disk mirror standing in for the back wall.
pub fn scene_mirror_wall() -> SyntheticScene {
    let mut scene = scene_sphere_room();
    scene.reflector = Some(Reflector::Plane {
        point: Vector3::new(0.0, 0.6, 1.8),
        normal: Vector3::new(0.0, 0.0, -1.0),
        extent: 1.1,
    });
    scene
}

/// Room with a concave spherical cap mirror facing the cameras.
pub fn scene_concave_bowl() -> SyntheticScene {
    let mut scene = scene_sphere_room();
    scene.reflector = Some(Reflector::Cap {
        center: Vector3::new(0.0, 0.3, 1.2),
        radius: 1.0,
        axis: Vector3::new(0.0, 0.0, -1.0),
        angle: 0.55,
    });
    scene
}

/// Look up a preset scene by name.
pub fn scene_by_name(name: &str) -> Result<SyntheticScene> {
    match name {
        "sphere_room" => Ok(scene_sphere_room()),
        "mirror_wall" => Ok(scene_mirror_wall()),
        "concave_bowl" => Ok(scene_concave_bowl()),
        other => Err(Error::InvalidInput(format!(
            "unknown scene {other:?} (try sphere_room, mirror_wall, concave_bowl)"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::project;
    use nalgebra::Matrix3;

    fn plain_plane_scene() -> SyntheticScene {
        // the light sits between mirror plane and wall so that no mirror
        // shadow can fall on anything the tests look at
        let mut scene = SyntheticScene {
            reflector: None,
            triangles: Vec::new(),
            materials: vec![Material::flat(Vector3::repeat(0.5))],
            lights: vec![PointLight {
                position: Vector3::new(0.8, 1.5, 0.5),
                intensity: Vector3::repeat(3.0),
            }],
            background: Vector3::zeros(),
            ambient: 0.1,
            max_bounces: 1,
        };
        scene.push_quad(
            Vector3::new(-4.0, -4.0, 2.0),
            Vector3::new(8.0, 0.0, 0.0),
            Vector3::new(0.0, 8.0, 0.0),
            0,
        );
        scene
    }

    fn front_camera() -> Camera {
        Camera::look_at(
            Vector3::new(0.0, 0.0, -3.0),
            Vector3::new(0.0, 0.0, 2.0),
            Vector3::y(),
            96.0,
            96.0,
            48.0,
            48.0,
            96,
            96,
        )
        .unwrap()
    }

    #[test]
    fn lambertian_plane_matches_closed_form() {
        let scene = plain_plane_scene();
        let cam = front_camera();
        let img = render_reference(&scene, &cam, 1);
        for (px, py) in [(48usize, 48usize), (20, 70), (75, 30)] {
            let ray = cam.pixel_ray(px as f64 + 0.5, py as f64 + 0.5);
            // ray hits the plane z=2
            let t = (2.0 - ray.origin.z) / ray.direction.z;
            let p = ray.at(t);
            let n = Vector3::new(0.0, 0.0, -1.0);
            let to_light = scene.lights[0].position - p;
            let expect = 0.5
                * (0.1 + 3.0 * n.dot(&to_light.normalize()).max(0.0) / to_light.norm_squared());
            for c in 0..3 {
                let got = img.get(px, py, c);
                assert!(
                    (got - expect.clamp(0.0, 1.0)).abs() < 1e-6,
                    "pixel ({px},{py}) ch {c}: {got} vs {expect}"
                );
            }
        }
    }

    #[test]
    fn planar_mirror_matches_mirrored_camera() {
        let mut scene = plain_plane_scene();
        // marker so the mirror shows structure
        scene.materials[0].markers.push(Marker {
            uv: Vector2::new(0.4, 0.55),
            radius: 0.04,
            color: Vector3::new(0.9, 0.1, 0.2),
            emissive: true,
        });
        scene.materials[0].checker_scale = 5.0;
        scene.materials[0].color_b = Vector3::new(0.2, 0.3, 0.7);
        let mirror_q = Vector3::new(0.0, 0.0, -1.0);
        let mirror_n = Vector3::new(0.0, 0.0, 1.0);
        scene.reflector =
            Some(Reflector::Plane { point: mirror_q, normal: mirror_n, extent: 0.8 });

        let cam = Camera::look_at(
            Vector3::new(0.3, 0.2, 1.0),
            mirror_q,
            Vector3::y(),
            96.0,
            96.0,
            48.0,
            48.0,
            96,
            96,
        )
        .unwrap();
        let real = render_reference(&scene, &cam, 1);

        // mirrored camera renders the reflector-free scene
        let m = Matrix3::identity() - 2.0 * mirror_n * mirror_n.transpose();
        let virt_pos = m * (cam.position - mirror_q) + mirror_q;
        let flip_x = Matrix3::from_diagonal(&Vector3::new(-1.0, 1.0, 1.0));
        let virt_rot = flip_x * cam.rotation * m;
        let virt_cam = Camera::new(
            virt_pos,
            virt_rot,
            cam.fx,
            cam.fy,
            cam.cx,
            cam.cy,
            cam.width,
            cam.height,
        )
        .unwrap();
        let mut bare = scene.clone();
        bare.reflector = None;
        let virt = render_reference(&bare, &virt_cam, 1);

        let mirror_ref = scene.reflector.as_ref().unwrap();
        let mut checked = 0;
        for y in 0..96usize {
            for x in 0..96usize {
                let ray = cam.pixel_ray(x as f64 + 0.5, y as f64 + 0.5);
                if mirror_ref.intersect(&ray, 1e-9).is_none() {
                    continue;
                }
                // pixel x flips about cx in the virtual view
                let vx = 95 - x;
                for c in 0..3 {
                    let a = real.get(x, y, c);
                    let b = virt.get(vx, y, c);
                    assert!((a - b).abs() < 1e-6, "({x},{y}) ch {c}: {a} vs {b}");
                }
                checked += 1;
            }
        }
        assert!(checked > 500, "mirror region too small: {checked}");
    }

    #[test]
    fn sphere_reflection_matches_specular_solve() {
        use crate::oracle::caustic::solve_specular_point;
        let mut scene = SyntheticScene {
            reflector: Some(Reflector::Sphere { center: Vector3::zeros(), radius: 0.5 }),
            triangles: Vec::new(),
            materials: vec![Material {
                checker_scale: 1.0,
                color_a: Vector3::repeat(0.05),
                color_b: Vector3::repeat(0.05),
                markers: vec![Marker {
                    uv: Vector2::new(0.5, 0.5),
                    radius: 0.05,
                    color: Vector3::new(1.0, 0.0, 0.0),
                    emissive: true,
                }],
            }],
            lights: Vec::new(),
            background: Vector3::zeros(),
            ambient: 0.0,
            max_bounces: 1,
        };
        // small quad whose uv center carries the marker
        let quad_origin = Vector3::new(0.6, 0.4, -1.1);
        let edge_u = Vector3::new(1.2, 0.0, 0.0);
        let edge_v = Vector3::new(0.0, 1.2, 0.0);
        scene.push_quad(quad_origin, edge_u, edge_v, 0);
        let marker_world = quad_origin + 0.5 * edge_u + 0.5 * edge_v;

        let probes = [
            Vector3::new(0.0, 0.0, -2.6),
            Vector3::new(0.9, 0.3, -2.4),
            Vector3::new(-1.0, 0.5, -2.2),
            Vector3::new(-0.4, -0.6, -2.7),
            Vector3::new(0.5, 0.9, -2.3),
        ];
        for eye in probes {
            let cam = Camera::look_at(
                eye,
                Vector3::zeros(),
                Vector3::y(),
                220.0,
                220.0,
                80.0,
                80.0,
                160,
                160,
            )
            .unwrap();
            let img = render_reference(&scene, &cam, 16);
            // predicted pixel: project the analytic specular point
            let s = solve_specular_point(&Vector3::zeros(), 0.5, &marker_world, &eye).unwrap();
            let (predict, _) = project(&cam, &s).unwrap();
            // observed pixel: red-weighted centroid inside the sphere silhouette
            let sphere = scene.reflector.as_ref().unwrap();
            let mut wsum = 0.0;
            let mut cx = 0.0;
            let mut cy = 0.0;
            for y in 0..160usize {
                for x in 0..160usize {
                    let ray = cam.pixel_ray(x as f64 + 0.5, y as f64 + 0.5);
                    if sphere.intersect(&ray, 1e-9).is_none() {
                        continue;
                    }
                    let w = img.get(x, y, 0) - img.get(x, y, 1);
                    if w > 0.02 {
                        wsum += w;
                        cx += w * (x as f64 + 0.5);
                        cy += w * (y as f64 + 0.5);
                    }
                }
            }
            assert!(wsum > 0.0, "marker reflection not found for eye {eye:?}");
            let observed = Vector2::new(cx / wsum, cy / wsum);
            let err = (observed - predict).norm();
            assert!(err < 0.5, "eye {eye:?}: predicted {predict:?} observed {observed:?} ({err} px)");
        }
    }

    #[test]
    fn dataset_cameras_distinct_and_points_on_surface() {
        let scene = scene_sphere_room();
        let orbit = OrbitSpec {
            center: Vector3::zeros(),
            radius: 2.3,
            height: 0.8,
            sweep: std::f64::consts::TAU,
            start_angle: 0.0,
        };
        let params = DatasetParams {
            n_views: 50,
            width: 16,
            height: 16,
            focal: 18.0,
            spp: 1,
            n_points: 400,
            seed: 9,
            ..Default::default()
        };
        let ds = generate_dataset(&scene, &orbit, &params);
        assert_eq!(ds.views.len(), 50);
        for i in 0..50 {
            for j in (i + 1)..50 {
                assert!(
                    (ds.views[i].camera.position - ds.views[j].camera.position).norm() > 0.0,
                    "views {i} and {j} coincide"
                );
            }
        }
        // dropout 0, jitter 0: every point on some triangle plane
        for p in &ds.points {
            let mut best = f64::INFINITY;
            for tri in &scene.triangles {
                let d = (p.position - tri.a).dot(&tri.normal()).abs();
                best = best.min(d);
            }
            assert!(best < 1e-9, "point off surface by {best}");
        }
    }

    #[test]
    fn jitter_matches_requested_sigma() {
        let mut scene = plain_plane_scene();
        scene.lights.clear();
        let orbit = OrbitSpec {
            center: Vector3::zeros(),
            radius: 2.0,
            height: 0.0,
            sweep: 1.0,
            start_angle: 0.0,
        };
        let sigma = 0.02;
        let params = DatasetParams {
            n_views: 2,
            width: 8,
            height: 8,
            focal: 8.0,
            spp: 1,
            n_points: 20_000,
            jitter: sigma,
            seed: 4,
            ..Default::default()
        };
        let ds = generate_dataset(&scene, &orbit, &params);
        // single plane z=2: distance to surface is |z - 2|
        let rms = (ds.points.iter().map(|p| (p.position.z - 2.0).powi(2)).sum::<f64>()
            / ds.points.len() as f64)
            .sqrt();
        assert!((rms - sigma).abs() / sigma < 0.1, "rms {rms} vs sigma {sigma}");
    }

    #[test]
    fn dataset_round_trip() {
        let scene = scene_mirror_wall();
        let orbit = OrbitSpec {
            center: Vector3::new(0.0, 0.5, 1.0),
            radius: 2.0,
            height: 0.4,
            sweep: 1.2,
            start_angle: -2.2,
        };
        let params = DatasetParams {
            n_views: 3,
            width: 24,
            height: 20,
            focal: 26.0,
            spp: 1,
            n_points: 200,
            seed: 2,
            ..Default::default()
        };
        let ds = generate_dataset(&scene, &orbit, &params);
        let dir = tempfile::tempdir().unwrap();
        save_dataset(dir.path(), &ds).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back.views.len(), 3);
        assert_eq!(back.points.len(), 200);
        assert!(back.scene.is_some());
        for (a, b) in ds.views.iter().zip(&back.views) {
            assert!(a.image.mean_abs_diff(&b.image) < 1e-6);
            assert!((a.camera.position - b.camera.position).norm() < 1e-12);
        }
        for (a, b) in ds.points.iter().zip(&back.points) {
            assert!((a.position - b.position).norm() < 1e-12);
        }
        let masks = load_masks(dir.path(), 3).unwrap();
        assert_eq!(masks.len(), 3);
        assert!(masks.iter().any(|m| m.count_inside() > 0));
    }

    #[test]
    fn concave_cap_reflects() {
        let scene = scene_concave_bowl();
        let cam = Camera::look_at(
            Vector3::new(0.0, 0.4, -2.2),
            Vector3::new(0.0, 0.3, 1.2),
            Vector3::y(),
            48.0,
            48.0,
            24.0,
            24.0,
            48,
            48,
        )
        .unwrap();
        let mask = reflector_mask(&scene, &cam);
        assert!(mask.count_inside() > 40, "cap barely visible: {}", mask.count_inside());
        let img = render_reference(&scene, &cam, 1);
        // reflected content varies inside the cap region
        let mut vals = Vec::new();
        for y in 0..48 {
            for x in 0..48 {
                if mask.get(x, y) {
                    vals.push(img.get(x, y, 0));
                }
            }
        }
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        assert!(var > 1e-4, "cap reflection is flat (var {var})");
    }
}
