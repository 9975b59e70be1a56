//! Convex reflection volume built from per-view reflector masks.
//!
//! Each mask contributes one halfspace per edge of its simplified convex
//! hull, lifted through the camera center. The intersection of all
//! halfspaces, clipped by the scene bounding box, is the region of space
//! that can host reflection points. The boundary is triangulated so it can
//! be sampled, rasterized into per-view masks and exported as a mesh.

use nalgebra::{Matrix3, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{Aabb, Camera};
use crate::img::MaskImage;
use crate::ply::TriMesh;

/// Halfspace `{x : n.x <= d}` with unit normal.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Halfspace {
    pub normal: Vector3<f64>,
    pub offset: f64,
}

impl Halfspace {
    /// Normalizes `normal`; errors on a near-zero vector.
    pub fn new(normal: Vector3<f64>, offset: f64) -> Result<Self> {
        let n = normal.norm();
        if n < 1e-12 {
            return Err(Error::InvalidInput("halfspace normal near zero".into()));
        }
        Ok(Halfspace { normal: normal / n, offset: offset / n })
    }

    #[inline]
    pub fn signed_distance(&self, p: &Vector3<f64>) -> f64 {
        self.normal.dot(p) - self.offset
    }

    #[inline]
    pub fn contains(&self, p: &Vector3<f64>, tol: f64) -> bool {
        self.signed_distance(p) <= tol
    }
}

/// Bounded convex polyhedron with a triangulated boundary.
#[derive(Clone, Debug)]
pub struct ReflectionVolume {
    pub halfspaces: Vec<Halfspace>,
    pub vertices: Vec<Vector3<f64>>,
    pub faces: Vec<[usize; 3]>,
}

impl ReflectionVolume {
    pub fn contains(&self, p: &Vector3<f64>, tol: f64) -> bool {
        self.halfspaces.iter().all(|h| h.contains(p, tol))
    }

    pub fn aabb(&self) -> Aabb {
        Aabb::from_points(self.vertices.iter()).expect("volume has vertices")
    }

    pub fn centroid(&self) -> Vector3<f64> {
        let mut c = Vector3::zeros();
        for v in &self.vertices {
            c += v;
        }
        c / self.vertices.len() as f64
    }

    /// Enclosed volume via the divergence theorem over the oriented boundary.
    pub fn volume(&self) -> f64 {
        let mut six_v = 0.0;
        for f in &self.faces {
            let (a, b, c) = (self.vertices[f[0]], self.vertices[f[1]], self.vertices[f[2]]);
            six_v += a.dot(&b.cross(&c));
        }
        six_v / 6.0
    }

    pub fn surface_area(&self) -> f64 {
        self.faces
            .iter()
            .map(|f| {
                let (a, b, c) = (self.vertices[f[0]], self.vertices[f[1]], self.vertices[f[2]]);
                0.5 * (b - a).cross(&(c - a)).norm()
            })
            .sum()
    }

    pub fn to_mesh(&self) -> TriMesh {
        TriMesh { vertices: self.vertices.clone(), faces: self.faces.clone() }
    }

    /// Rebuild a volume from a boundary mesh (e.g. loaded from PLY).
    ///
    /// Halfspaces are recovered from the face planes, oriented away from the
    /// vertex centroid, and deduplicated.
    pub fn from_mesh(mesh: &TriMesh) -> Result<Self> {
        if mesh.vertices.len() < 4 || mesh.faces.is_empty() {
            return Err(Error::EmptyVolume);
        }
        let mut centroid = Vector3::zeros();
        for v in &mesh.vertices {
            centroid += v;
        }
        centroid /= mesh.vertices.len() as f64;
        let scale = Aabb::from_points(mesh.vertices.iter()).unwrap().extent().norm().max(1e-9);
        let mut halfspaces: Vec<Halfspace> = Vec::new();
        for f in &mesh.faces {
            let (a, b, c) = (mesh.vertices[f[0]], mesh.vertices[f[1]], mesh.vertices[f[2]]);
            let n = (b - a).cross(&(c - a));
            if n.norm() < 1e-12 * scale * scale {
                continue;
            }
            let mut h = Halfspace::new(n, n.dot(&a))?;
            if h.signed_distance(&centroid) > 0.0 {
                h = Halfspace { normal: -h.normal, offset: -h.offset };
            }
            let dup = halfspaces.iter().any(|g| {
                (g.normal - h.normal).norm() < 1e-7 && (g.offset - h.offset).abs() < 1e-7 * scale
            });
            if !dup {
                halfspaces.push(h);
            }
        }
        let tol = 1e-6 * scale;
        for v in &mesh.vertices {
            for h in &halfspaces {
                if !h.contains(v, tol) {
                    return Err(Error::InvalidInput("mesh is not convex".into()));
                }
            }
        }
        let vol = ReflectionVolume {
            halfspaces,
            vertices: mesh.vertices.clone(),
            faces: mesh.faces.clone(),
        };
        if vol.volume() <= 0.0 {
            return Err(Error::EmptyVolume);
        }
        Ok(vol)
    }

    pub fn save_ply(&self, path: &std::path::Path) -> Result<()> {
        crate::ply::save_ascii_mesh(path, &self.to_mesh())
    }

    pub fn load_ply(path: &std::path::Path) -> Result<Self> {
        Self::from_mesh(&crate::ply::load_ascii_mesh(path)?)
    }
}

#[inline]
fn cross2(o: &Vector2<f64>, a: &Vector2<f64>, b: &Vector2<f64>) -> f64 {
    (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x)
}

/// Counterclockwise convex hull (monotone chain); collinear vertices dropped.
pub fn convex_hull_2d(points: &[Vector2<f64>]) -> Result<Vec<Vector2<f64>>> {
    if points.len() < 3 {
        return Err(Error::InvalidInput("hull needs at least 3 points".into()));
    }
    let mut pts: Vec<Vector2<f64>> = points.to_vec();
    pts.sort_by(|a, b| (a.x, a.y).partial_cmp(&(b.x, b.y)).unwrap());
    pts.dedup_by(|a, b| (*a - *b).norm() < 1e-12);
    let mut lower: Vec<Vector2<f64>> = Vec::new();
    for p in &pts {
        while lower.len() >= 2 && cross2(&lower[lower.len() - 2], &lower[lower.len() - 1], p) <= 0.0
        {
            lower.pop();
        }
        lower.push(*p);
    }
    let mut upper: Vec<Vector2<f64>> = Vec::new();
    for p in pts.iter().rev() {
        while upper.len() >= 2 && cross2(&upper[upper.len() - 2], &upper[upper.len() - 1], p) <= 0.0
        {
            upper.pop();
        }
        upper.push(*p);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);
    if lower.len() < 3 {
        return Err(Error::InvalidInput("degenerate (collinear) mask".into()));
    }
    Ok(lower)
}

fn point_segment_distance(p: &Vector2<f64>, a: &Vector2<f64>, b: &Vector2<f64>) -> f64 {
    let ab = b - a;
    let len2 = ab.norm_squared();
    if len2 < 1e-24 {
        return (p - a).norm();
    }
    let t = ((p - a).dot(&ab) / len2).clamp(0.0, 1.0);
    (p - (a + t * ab)).norm()
}

fn douglas_peucker(chain: &[Vector2<f64>], epsilon: f64, out: &mut Vec<Vector2<f64>>) {
    if chain.len() <= 2 {
        out.extend_from_slice(&chain[..chain.len().saturating_sub(1)]);
        return;
    }
    let (a, b) = (chain[0], chain[chain.len() - 1]);
    let mut best = f64::NEG_INFINITY;
    let mut best_i = 0;
    for (i, p) in chain.iter().enumerate().take(chain.len() - 1).skip(1) {
        let d = point_segment_distance(p, &a, &b);
        if d > best {
            best = d;
            best_i = i;
        }
    }
    if best >= epsilon && best_i > 0 {
        douglas_peucker(&chain[..=best_i], epsilon, out);
        douglas_peucker(&chain[best_i..], epsilon, out);
    } else {
        out.push(a);
    }
}

/// Douglas-Peucker on a closed polyline; every removed vertex stays within
/// `epsilon` of the simplified chain. `epsilon = 0` keeps everything.
pub fn simplify_polyline(polyline: &[Vector2<f64>], epsilon: f64) -> Vec<Vector2<f64>> {
    let n = polyline.len();
    if n <= 3 {
        return polyline.to_vec();
    }
    // Split the loop at vertex 0 and the vertex farthest from it.
    let far = (1..n)
        .max_by(|&i, &j| {
            let di = (polyline[i] - polyline[0]).norm();
            let dj = (polyline[j] - polyline[0]).norm();
            di.partial_cmp(&dj).unwrap()
        })
        .unwrap();
    let chain1: Vec<Vector2<f64>> = polyline[0..=far].to_vec();
    let mut chain2: Vec<Vector2<f64>> = polyline[far..].to_vec();
    chain2.push(polyline[0]);
    let mut out = Vec::new();
    douglas_peucker(&chain1, epsilon, &mut out);
    douglas_peucker(&chain2, epsilon, &mut out);
    out
}

/// Hull of the set pixel centers of a mask.
pub fn mask_to_hull(mask: &MaskImage) -> Result<Vec<Vector2<f64>>> {
    let mut pts = Vec::new();
    for y in 0..mask.height {
        for x in 0..mask.width {
            if mask.get(x, y) {
                pts.push(Vector2::new(x as f64 + 0.5, y as f64 + 0.5));
            }
        }
    }
    if pts.is_empty() {
        return Err(Error::InvalidMask("mask has no set pixels".into()));
    }
    convex_hull_2d(&pts)
}

/// One halfspace per polygon edge, through the camera center, interior on
/// the side of rays through the polygon.
pub fn lift_mask_to_halfspaces(camera: &Camera, polyline: &[Vector2<f64>]) -> Result<Vec<Halfspace>> {
    if polyline.len() < 3 {
        return Err(Error::InvalidMask("polygon needs at least 3 vertices".into()));
    }
    let centroid = polyline.iter().sum::<Vector2<f64>>() / polyline.len() as f64;
    let centroid_dir = camera.pixel_ray(centroid.x, centroid.y).direction;
    let mut out = Vec::with_capacity(polyline.len());
    for i in 0..polyline.len() {
        let a = polyline[i];
        let b = polyline[(i + 1) % polyline.len()];
        let da = camera.pixel_ray(a.x, a.y).direction;
        let db = camera.pixel_ray(b.x, b.y).direction;
        let n = da.cross(&db);
        if n.norm() < 1e-12 {
            return Err(Error::InvalidMask(format!("edge {i} rays are parallel")));
        }
        let mut h = Halfspace::new(n, n.dot(&camera.position))?;
        if h.normal.dot(&centroid_dir) > 0.0 {
            h = Halfspace { normal: -h.normal, offset: -h.offset };
        }
        out.push(h);
    }
    Ok(out)
}

/// Six halfspaces bounding an AABB.
pub fn aabb_halfspaces(b: &Aabb) -> Vec<Halfspace> {
    vec![
        Halfspace { normal: Vector3::new(1.0, 0.0, 0.0), offset: b.max.x },
        Halfspace { normal: Vector3::new(-1.0, 0.0, 0.0), offset: -b.min.x },
        Halfspace { normal: Vector3::new(0.0, 1.0, 0.0), offset: b.max.y },
        Halfspace { normal: Vector3::new(0.0, -1.0, 0.0), offset: -b.min.y },
        Halfspace { normal: Vector3::new(0.0, 0.0, 1.0), offset: b.max.z },
        Halfspace { normal: Vector3::new(0.0, 0.0, -1.0), offset: -b.min.z },
    ]
}

/// Intersect halfspaces (plus `clip`) into a bounded convex polyhedron.
///
/// Vertices come from all triples of planes, filtered for membership; faces
/// are recovered per active halfspace and triangulated with outward
/// orientation. An empty intersection is reported as [`Error::EmptyVolume`].
pub fn intersect_halfspaces(halfspaces: &[Halfspace], clip: &Aabb) -> Result<ReflectionVolume> {
    let mut all = halfspaces.to_vec();
    all.extend(aabb_halfspaces(clip));
    let scale = clip.extent().norm().max(1e-9);
    let member_tol = 1e-9 * scale;
    let dedup_tol = 1e-8 * scale;

    let n = all.len();
    let mut vertices: Vec<Vector3<f64>> = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            for k in (j + 1)..n {
                let m = Matrix3::from_rows(&[
                    all[i].normal.transpose(),
                    all[j].normal.transpose(),
                    all[k].normal.transpose(),
                ]);
                let rhs = Vector3::new(all[i].offset, all[j].offset, all[k].offset);
                let Some(inv) = m.try_inverse() else { continue };
                if inv.norm() > 1e12 {
                    continue;
                }
                let x = inv * rhs;
                if !x.iter().all(|v| v.is_finite()) {
                    continue;
                }
                if all.iter().all(|h| h.contains(&x, member_tol)) {
                    let dup = vertices.iter().any(|v| (v - x).norm() < dedup_tol);
                    if !dup {
                        vertices.push(x);
                    }
                }
            }
        }
    }
    if vertices.len() < 4 {
        return Err(Error::EmptyVolume);
    }

    // One polygonal face per halfspace touching enough vertices.
    let face_tol = 1e-7 * scale;
    let mut faces: Vec<[usize; 3]> = Vec::new();
    let mut active: Vec<Halfspace> = Vec::new();
    for h in &all {
        let on: Vec<usize> = (0..vertices.len())
            .filter(|&vi| h.signed_distance(&vertices[vi]).abs() <= face_tol)
            .collect();
        if on.len() < 3 {
            continue;
        }
        active.push(*h);
        // Order the face vertices by angle in the plane, oriented so the
        // triangle normals point along h.normal (outward).
        let u = pick_perpendicular(&h.normal);
        let v = h.normal.cross(&u);
        let center: Vector3<f64> =
            on.iter().map(|&vi| vertices[vi]).sum::<Vector3<f64>>() / on.len() as f64;
        let mut ordered = on.clone();
        ordered.sort_by(|&a, &b| {
            let pa = vertices[a] - center;
            let pb = vertices[b] - center;
            let aa = pa.dot(&v).atan2(pa.dot(&u));
            let ab = pb.dot(&v).atan2(pb.dot(&u));
            aa.partial_cmp(&ab).unwrap().then(a.cmp(&b))
        });
        for t in 1..ordered.len() - 1 {
            let tri = [ordered[0], ordered[t], ordered[t + 1]];
            let (a, b, c) = (vertices[tri[0]], vertices[tri[1]], vertices[tri[2]]);
            let fn_ = (b - a).cross(&(c - a));
            if fn_.norm() < 1e-12 * scale * scale {
                continue;
            }
            if fn_.dot(&h.normal) >= 0.0 {
                faces.push(tri);
            } else {
                faces.push([tri[0], tri[2], tri[1]]);
            }
        }
    }
    let vol = ReflectionVolume { halfspaces: active, vertices, faces };
    if vol.volume() <= 1e-12 * scale * scale * scale {
        return Err(Error::EmptyVolume);
    }
    Ok(vol)
}

fn pick_perpendicular(n: &Vector3<f64>) -> Vector3<f64> {
    let cand = if n.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
    n.cross(&cand).normalize()
}

/// Uniform-by-area samples on the triangulated boundary; deterministic per seed.
pub fn sample_surface(volume: &ReflectionVolume, count: usize, seed: u64) -> Vec<Vector3<f64>> {
    let mut cdf = Vec::with_capacity(volume.faces.len());
    let mut total = 0.0;
    for f in &volume.faces {
        let (a, b, c) = (volume.vertices[f[0]], volume.vertices[f[1]], volume.vertices[f[2]]);
        total += 0.5 * (b - a).cross(&(c - a)).norm();
        cdf.push(total);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let r = rng.gen_range(0.0..total);
        let fi = cdf.partition_point(|&c| c < r).min(volume.faces.len() - 1);
        let f = volume.faces[fi];
        let (a, b, c) = (volume.vertices[f[0]], volume.vertices[f[1]], volume.vertices[f[2]]);
        let su = rng.gen::<f64>().sqrt();
        let t = rng.gen::<f64>();
        out.push(a * (1.0 - su) + b * (su * (1.0 - t)) + c * (su * t));
    }
    out
}

/// Intersect a ray with the halfspace intersection; returns entry/exit t.
pub fn ray_volume_span(
    volume: &ReflectionVolume,
    origin: &Vector3<f64>,
    dir: &Vector3<f64>,
) -> Option<(f64, f64)> {
    let mut t_min = f64::NEG_INFINITY;
    let mut t_max = f64::INFINITY;
    for h in &volume.halfspaces {
        let nd = h.normal.dot(dir);
        let dist = h.offset - h.normal.dot(origin);
        if nd.abs() < 1e-14 {
            if dist < 0.0 {
                return None;
            }
        } else if nd > 0.0 {
            t_max = t_max.min(dist / nd);
        } else {
            t_min = t_min.max(dist / nd);
        }
        if t_min > t_max {
            return None;
        }
    }
    Some((t_min, t_max))
}

/// Binary mask of pixels whose center ray hits the volume at t >= 0.
pub fn rasterize_volume_mask(volume: &ReflectionVolume, camera: &Camera) -> MaskImage {
    let mut mask = MaskImage::new(camera.width as usize, camera.height as usize);
    for y in 0..mask.height {
        for x in 0..mask.width {
            let ray = camera.pixel_ray(x as f64 + 0.5, y as f64 + 0.5);
            if let Some((t0, t1)) = ray_volume_span(volume, &ray.origin, &ray.direction) {
                if t1 >= t0.max(0.0) {
                    mask.set(x, y, true);
                }
            }
        }
    }
    mask
}

/// Point-in-convex-polygon for a CCW polygon, with tolerance.
pub fn polygon_contains(poly: &[Vector2<f64>], p: &Vector2<f64>, tol: f64) -> bool {
    for i in 0..poly.len() {
        let a = poly[i];
        let b = poly[(i + 1) % poly.len()];
        if cross2(&a, &b, p) < -tol * (b - a).norm() {
            return false;
        }
    }
    true
}
