//! Cameras, rays, mirror reflection and coordinate normalization.
//!
//! Conventions used throughout the crate: right-handed world coordinates,
//! view space looks down +z, pixel origin at the top-left corner, pixel
//! centers at integer + 0.5. The rotation stored in [`Camera`] maps world
//! to view space.

use nalgebra::{Matrix2x3, Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Points closer than this to the camera plane count as behind the camera.
pub const EPS_DEPTH: f64 = 1e-6;

/// Calibrated pinhole camera.
#[derive(Clone, Debug, PartialEq)]
pub struct Camera {
    pub position: Vector3<f64>,
    /// World-to-view rotation, orthonormal.
    pub rotation: Matrix3<f64>,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl Camera {
    pub fn new(
        position: Vector3<f64>,
        rotation: Matrix3<f64>,
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: u32,
        height: u32,
    ) -> Result<Self> {
        let dev = (rotation.transpose() * rotation - Matrix3::identity()).norm();
        if dev > 1e-9 {
            return Err(Error::InvalidCamera(format!(
                "rotation not orthonormal (|R^T R - I| = {dev:.3e})"
            )));
        }
        if !(fx > 0.0 && fy > 0.0) {
            return Err(Error::InvalidCamera("focal lengths must be positive".into()));
        }
        if width < 1 || height < 1 {
            return Err(Error::InvalidCamera("image must be at least 1x1".into()));
        }
        Ok(Self { position, rotation, fx, fy, cx, cy, width, height })
    }

    /// Camera at `position` looking at `target`, `up` fixing the roll.
    pub fn look_at(
        position: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: u32,
        height: u32,
    ) -> Result<Self> {
        let forward = (target - position)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::InvalidCamera("look_at target equals position".into()))?;
        let right = forward
            .cross(&up)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::InvalidCamera("look_at up parallel to view direction".into()))?;
        let down = forward.cross(&right);
        let rotation = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        Self::new(position, rotation, fx, fy, cx, cy, width, height)
    }

    #[inline]
    pub fn to_view(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * (p - self.position)
    }

    /// Unit ray through a (continuous) pixel coordinate.
    pub fn pixel_ray(&self, px: f64, py: f64) -> Ray {
        let dir_view = Vector3::new((px - self.cx) / self.fx, (py - self.cy) / self.fy, 1.0);
        let dir = self.rotation.transpose() * dir_view;
        Ray::new(self.position, dir)
    }

    /// Scale the camera to a different resolution (same field of view).
    pub fn scaled(&self, scale: f64) -> Camera {
        let width = ((self.width as f64 * scale).round() as u32).max(1);
        let height = ((self.height as f64 * scale).round() as u32).max(1);
        let sx = width as f64 / self.width as f64;
        let sy = height as f64 / self.height as f64;
        Camera {
            position: self.position,
            rotation: self.rotation,
            fx: self.fx * sx,
            fy: self.fy * sy,
            cx: self.cx * sx,
            cy: self.cy * sy,
            width,
            height,
        }
    }
}

/// Project a world point; `None` when behind the camera.
pub fn project(camera: &Camera, p: &Vector3<f64>) -> Option<(Vector2<f64>, f64)> {
    let v = camera.to_view(p);
    if v.z <= EPS_DEPTH {
        return None;
    }
    let px = camera.fx * v.x / v.z + camera.cx;
    let py = camera.fy * v.y / v.z + camera.cy;
    Some((Vector2::new(px, py), v.z))
}

/// Inverse of [`project`] given the view-space depth.
pub fn unproject(camera: &Camera, pixel: &Vector2<f64>, depth: f64) -> Vector3<f64> {
    let v = Vector3::new(
        (pixel.x - camera.cx) / camera.fx * depth,
        (pixel.y - camera.cy) / camera.fy * depth,
        depth,
    );
    camera.rotation.transpose() * v + camera.position
}

/// Jacobian of the world -> pixel map, `None` when behind the camera.
pub fn projection_jacobian(camera: &Camera, p: &Vector3<f64>) -> Option<Matrix2x3<f64>> {
    let v = camera.to_view(p);
    if v.z <= EPS_DEPTH {
        return None;
    }
    let z2 = v.z * v.z;
    let a = Matrix2x3::new(
        camera.fx / v.z,
        0.0,
        -camera.fx * v.x / z2,
        0.0,
        camera.fy / v.z,
        -camera.fy * v.y / z2,
    );
    Some(a * camera.rotation)
}

/// Ray with unit direction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: Vector3<f64>,
    pub direction: Vector3<f64>,
}

impl Ray {
    /// Normalizes `direction`; panics on zero-length input.
    pub fn new(origin: Vector3<f64>, direction: Vector3<f64>) -> Self {
        let n = direction.norm();
        assert!(n > 1e-12, "ray direction must be nonzero");
        Ray { origin, direction: direction / n }
    }

    #[inline]
    pub fn at(&self, t: f64) -> Vector3<f64> {
        self.origin + t * self.direction
    }
}

/// Mirror-law reflection of `incident` at `hit` with unit `normal`.
pub fn reflect_ray(incident: &Ray, hit: Vector3<f64>, normal: &Vector3<f64>) -> Ray {
    let d = incident.direction;
    let dir = d - 2.0 * d.dot(normal) * normal;
    Ray { origin: hit, direction: dir }
}

/// Reflect a direction vector off a unit normal.
#[inline]
pub fn reflect_dir(d: &Vector3<f64>, normal: &Vector3<f64>) -> Vector3<f64> {
    d - 2.0 * d.dot(normal) * normal
}

/// Axis-aligned bounding box.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: Vector3<f64>,
    pub max: Vector3<f64>,
}

impl Aabb {
    pub fn new(min: Vector3<f64>, max: Vector3<f64>) -> Self {
        debug_assert!(min.x <= max.x && min.y <= max.y && min.z <= max.z);
        Aabb { min, max }
    }

    /// Smallest box containing all points; `None` on empty input.
    pub fn from_points<'a, I: IntoIterator<Item = &'a Vector3<f64>>>(points: I) -> Option<Self> {
        let mut it = points.into_iter();
        let first = *it.next()?;
        let mut min = first;
        let mut max = first;
        for p in it {
            min = min.inf(p);
            max = max.sup(p);
        }
        Some(Aabb { min, max })
    }

    #[inline]
    pub fn center(&self) -> Vector3<f64> {
        0.5 * (self.min + self.max)
    }

    #[inline]
    pub fn extent(&self) -> Vector3<f64> {
        self.max - self.min
    }

    /// Grow each half-extent by `factor` (0.5 = 50% dilation).
    pub fn dilated(&self, factor: f64) -> Aabb {
        let c = self.center();
        let h = 0.5 * self.extent() * (1.0 + factor);
        Aabb { min: c - h, max: c + h }
    }

    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        p.x >= self.min.x
            && p.x <= self.max.x
            && p.y >= self.min.y
            && p.y <= self.max.y
            && p.z >= self.min.z
            && p.z <= self.max.z
    }

    pub fn union(&self, other: &Aabb) -> Aabb {
        Aabb { min: self.min.inf(&other.min), max: self.max.sup(&other.max) }
    }
}

/// Affine map of `box` onto [-1,1]^3; the box center maps to the origin.
pub fn normalize_to_unit_cube(p: &Vector3<f64>, bbox: &Aabb) -> Result<Vector3<f64>> {
    let e = bbox.extent();
    for axis in 0..3 {
        if e[axis] < 1e-12 {
            return Err(Error::DegenerateBox { axis, extent: e[axis] });
        }
    }
    let c = bbox.center();
    Ok(Vector3::new(
        2.0 * (p.x - c.x) / e.x,
        2.0 * (p.y - c.y) / e.y,
        2.0 * (p.z - c.z) / e.z,
    ))
}

/// Inverse of [`normalize_to_unit_cube`].
pub fn denormalize_from_unit_cube(q: &Vector3<f64>, bbox: &Aabb) -> Vector3<f64> {
    let e = bbox.extent();
    let c = bbox.center();
    Vector3::new(c.x + 0.5 * q.x * e.x, c.y + 0.5 * q.y * e.y, c.z + 0.5 * q.z * e.z)
}

#[derive(Serialize, Deserialize)]
struct CameraRecord {
    position: [f64; 3],
    rotation: [f64; 9],
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    width: u32,
    height: u32,
}

/// Serialize a camera set as a JSON list.
pub fn cameras_to_json(cameras: &[Camera]) -> Result<String> {
    let records: Vec<CameraRecord> = cameras
        .iter()
        .map(|c| {
            let mut rotation = [0.0; 9];
            for r in 0..3 {
                for k in 0..3 {
                    rotation[r * 3 + k] = c.rotation[(r, k)];
                }
            }
            CameraRecord {
                position: [c.position.x, c.position.y, c.position.z],
                rotation,
                fx: c.fx,
                fy: c.fy,
                cx: c.cx,
                cy: c.cy,
                width: c.width,
                height: c.height,
            }
        })
        .collect();
    Ok(serde_json::to_string_pretty(&records)?)
}

/// Parse a camera set from a JSON list, validating each entry.
pub fn cameras_from_json(json: &str) -> Result<Vec<Camera>> {
    let records: Vec<CameraRecord> = serde_json::from_str(json)?;
    records
        .into_iter()
        .map(|r| {
            let rotation = Matrix3::new(
                r.rotation[0],
                r.rotation[1],
                r.rotation[2],
                r.rotation[3],
                r.rotation[4],
                r.rotation[5],
                r.rotation[6],
                r.rotation[7],
                r.rotation[8],
            );
            Camera::new(
                Vector3::new(r.position[0], r.position[1], r.position[2]),
                rotation,
                r.fx,
                r.fy,
                r.cx,
                r.cy,
                r.width,
                r.height,
            )
        })
        .collect()
}

pub fn load_cameras(path: &std::path::Path) -> Result<Vec<Camera>> {
    cameras_from_json(&std::fs::read_to_string(path)?)
}

pub fn save_cameras(path: &std::path::Path, cameras: &[Camera]) -> Result<()> {
    std::fs::write(path, cameras_to_json(cameras)?)?;
    Ok(())
}
