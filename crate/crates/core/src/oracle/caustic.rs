//! Catacaustic geometry: envelopes of virtual reflected rays.
//!
//! A point source and a curved mirror define a family of reflected rays;
//! their backward extensions are tangent to a caustic surface, and the
//! virtual image seen by a camera is the tangency point along its specular
//! ray. Envelope points are computed as the limit of pairwise ray
//! intersections with Richardson extrapolation; specular points are found
//! by root-finding the Fermat condition on the mirror.

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::geometry::reflect_dir;
use crate::oracle::scene::Reflector;

/// Mirror image of `p` across the plane through `q` with normal `n`.
pub fn planar_virtual_point(q: &Vector3<f64>, n: &Vector3<f64>, p: &Vector3<f64>) -> Vector3<f64> {
    let n = n.normalize();
    p - 2.0 * (p - q).dot(&n) * n
}

/// One-parameter mirror curve in 3D.
pub trait Mirror1d {
    fn point(&self, t: f64) -> Vector3<f64>;
    /// Unit tangent d/dt point(t), normalized.
    fn tangent(&self, t: f64) -> Vector3<f64>;
    /// Unit normal (sign is irrelevant to reflection).
    fn normal(&self, t: f64) -> Vector3<f64>;
}

/// Circle of `radius` about `center` in the plane spanned by `u`, `v`.
#[derive(Clone, Copy, Debug)]
pub struct CircleSection {
    pub center: Vector3<f64>,
    pub radius: f64,
    pub u: Vector3<f64>,
    pub v: Vector3<f64>,
}

impl CircleSection {
    /// Great circle of a sphere in the plane through `center`, `a` and `b`,
    /// with `u` pointing from the center toward `a`.
    pub fn through(center: Vector3<f64>, radius: f64, a: &Vector3<f64>, b: &Vector3<f64>) -> Result<Self> {
        let ua = a - center;
        let u = ua
            .try_normalize(1e-12)
            .ok_or_else(|| Error::InvalidInput("point coincides with center".into()))?;
        let w = ua.cross(&(b - center));
        let n = if w.norm() > 1e-12 * ua.norm() * (b - center).norm().max(1e-12) {
            w.normalize()
        } else {
            // collinear: any plane through the line works
            crate::geometry::Ray::new(center, u).direction.cross(&pick_perp(&u)).normalize()
        };
        Ok(CircleSection { center, radius, u, v: n.cross(&u) })
    }

    /// Parameter of the in-plane point `p`.
    pub fn param_of(&self, p: &Vector3<f64>) -> f64 {
        let d = p - self.center;
        d.dot(&self.v).atan2(d.dot(&self.u))
    }
}

fn pick_perp(n: &Vector3<f64>) -> Vector3<f64> {
    let cand = if n.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
    n.cross(&cand).normalize()
}

impl Mirror1d for CircleSection {
    fn point(&self, t: f64) -> Vector3<f64> {
        self.center + self.radius * (self.u * t.cos() + self.v * t.sin())
    }

    fn tangent(&self, t: f64) -> Vector3<f64> {
        -self.u * t.sin() + self.v * t.cos()
    }

    fn normal(&self, t: f64) -> Vector3<f64> {
        self.u * t.cos() + self.v * t.sin()
    }
}

/// Straight mirror: the planar degenerate case.
#[derive(Clone, Copy, Debug)]
pub struct LineSection {
    pub origin: Vector3<f64>,
    pub direction: Vector3<f64>,
    pub plane_normal: Vector3<f64>,
}

impl Mirror1d for LineSection {
    fn point(&self, t: f64) -> Vector3<f64> {
        self.origin + t * self.direction
    }

    fn tangent(&self, _t: f64) -> Vector3<f64> {
        self.direction
    }

    fn normal(&self, _t: f64) -> Vector3<f64> {
        self.plane_normal
    }
}

/// Light source: a point or a parallel-ray direction.
#[derive(Clone, Copy, Debug)]
pub enum SourceSpec {
    Point(Vector3<f64>),
    Direction(Vector3<f64>),
}

impl SourceSpec {
    fn incident_at(&self, s: &Vector3<f64>) -> Vector3<f64> {
        match self {
            SourceSpec::Point(p) => (s - p).normalize(),
            SourceSpec::Direction(d) => d.normalize(),
        }
    }
}

/// A point of the catacaustic at mirror parameter `t`.
#[derive(Clone, Copy, Debug)]
pub struct CatacausticSample {
    pub source: SourceSpec,
    pub t: f64,
    pub point: Vector3<f64>,
    /// Distance of `point` from the virtual rays it was intersected from.
    pub residual: f64,
}

/// Reflected (virtual) ray at mirror parameter `t`.
pub fn virtual_ray<M: Mirror1d>(mirror: &M, source: &SourceSpec, t: f64) -> (Vector3<f64>, Vector3<f64>) {
    let s = mirror.point(t);
    let i = source.incident_at(&s);
    (s, reflect_dir(&i, &mirror.normal(t)).normalize())
}

/// Closest-approach midpoint of two lines; errors when near-parallel.
fn line_intersect(
    p1: &Vector3<f64>,
    d1: &Vector3<f64>,
    p2: &Vector3<f64>,
    d2: &Vector3<f64>,
) -> Result<Vector3<f64>> {
    let b = d1.dot(d2);
    let denom = 1.0 - b * b;
    if denom < 1e-16 {
        return Err(Error::Numerical("virtual rays are parallel (caustic at infinity)".into()));
    }
    let w = p1 - p2;
    let d = d1.dot(&w);
    let e = d2.dot(&w);
    let s = (b * e - d) / denom;
    let u = (e - b * d) / denom;
    Ok(0.5 * ((p1 + s * d1) + (p2 + u * d2)))
}

fn dist_to_line(p: &Vector3<f64>, origin: &Vector3<f64>, dir: &Vector3<f64>) -> f64 {
    let w = p - origin;
    (w - w.dot(dir) * dir).norm()
}

/// Envelope point at `t`: pairwise intersection of the virtual rays at
/// `t - delta` and `t + delta`, Richardson-extrapolated toward `delta = 0`.
pub fn envelope_point_at<M: Mirror1d>(
    mirror: &M,
    source: &SourceSpec,
    t: f64,
    delta: f64,
) -> Result<CatacausticSample> {
    let pair = |d: f64| -> Result<Vector3<f64>> {
        let (pa, da) = virtual_ray(mirror, source, t - d);
        let (pb, db) = virtual_ray(mirror, source, t + d);
        line_intersect(&pa, &da, &pb, &db)
    };
    let coarse = pair(delta)?;
    let fine = pair(delta / 2.0)?;
    let point = (4.0 * fine - coarse) / 3.0;
    let (p0, d0) = virtual_ray(mirror, source, t);
    let (pa, da) = virtual_ray(mirror, source, t - delta / 2.0);
    let (pb, db) = virtual_ray(mirror, source, t + delta / 2.0);
    let residual = dist_to_line(&point, &p0, &d0)
        .max(dist_to_line(&point, &pa, &da))
        .max(dist_to_line(&point, &pb, &db));
    Ok(CatacausticSample { source: *source, t, point, residual })
}

const ENVELOPE_DELTA: f64 = 1e-4;

/// Sample the catacaustic over a parameter range; parallel-ray failures are
/// reported per sample.
pub fn envelope_points<M: Mirror1d>(
    mirror: &M,
    source: &SourceSpec,
    t_range: (f64, f64),
    n: usize,
) -> Vec<Result<CatacausticSample>> {
    assert!(n >= 3);
    (0..n)
        .map(|i| {
            let t = t_range.0 + (t_range.1 - t_range.0) * i as f64 / (n - 1) as f64;
            envelope_point_at(mirror, source, t, ENVELOPE_DELTA)
        })
        .collect()
}

/// Specular point on a sphere for source `p` and observer `eye`.
///
/// The point lies in the plane through the sphere center, `p` and `eye`;
/// the Fermat condition (path-length gradient along the circle vanishes) is
/// root-found there, then candidates are validated against the mirror law
/// and self-occlusion, keeping the shortest light path.
pub fn solve_specular_point(
    center: &Vector3<f64>,
    radius: f64,
    p: &Vector3<f64>,
    eye: &Vector3<f64>,
) -> Result<Vector3<f64>> {
    let circle = CircleSection::through(*center, radius, p, eye)?;
    let fermat = |t: f64| -> f64 {
        let s = circle.point(t);
        let g = (s - p).normalize() + (s - eye).normalize();
        g.dot(&circle.tangent(t))
    };
    let n_grid = 2048;
    let mut roots: Vec<f64> = Vec::new();
    let mut prev_t = 0.0;
    let mut prev_f = fermat(0.0);
    for i in 1..=n_grid {
        let t = i as f64 / n_grid as f64 * std::f64::consts::TAU;
        let f = fermat(t);
        if prev_f == 0.0 {
            roots.push(prev_t);
        } else if prev_f * f < 0.0 {
            let (mut lo, mut hi) = (prev_t, t);
            let (mut flo, _) = (prev_f, f);
            for _ in 0..90 {
                let mid = 0.5 * (lo + hi);
                let fm = fermat(mid);
                if flo * fm <= 0.0 {
                    hi = mid;
                } else {
                    lo = mid;
                    flo = fm;
                }
            }
            roots.push(0.5 * (lo + hi));
        }
        prev_t = t;
        prev_f = f;
    }
    let mut best: Option<(f64, Vector3<f64>)> = None;
    for t in roots {
        let s = circle.point(t);
        let n = (s - center) / radius;
        let to_eye = eye - s;
        if to_eye.norm() < 1e-12 || (p - s).norm() < 1e-12 {
            continue;
        }
        // normal must face the eye for the surface to be seen
        let nf = if n.dot(&to_eye) > 0.0 { n } else { -n };
        let reflected = reflect_dir(&(s - eye).normalize(), &nf);
        if (reflected - (p - s).normalize()).norm() > 1e-6 {
            continue;
        }
        // the eye ray must reach s without hitting the sphere earlier
        let ray = crate::geometry::Ray::new(*eye, s - eye);
        let oc = ray.origin - center;
        let b = oc.dot(&ray.direction);
        let c = oc.norm_squared() - radius * radius;
        let disc = b * b - c;
        if disc > 0.0 {
            let t_first = -b - disc.sqrt();
            let t_s = (s - eye).norm();
            if t_first > 1e-9 && t_first < t_s - 1e-7 {
                continue;
            }
        }
        let path = (s - p).norm() + (s - eye).norm();
        if best.map_or(true, |(bp, _)| path < bp) {
            best = Some((path, s));
        }
    }
    best.map(|(_, s)| s)
        .ok_or_else(|| Error::Numerical("no specular solution: reflection not visible".into()))
}

/// Virtual image of `p` seen from `eye` in a curved or planar reflector:
/// the tangency point of the specular virtual ray with the catacaustic.
pub fn virtual_point_on_catacaustic(
    reflector: &Reflector,
    p: &Vector3<f64>,
    eye: &Vector3<f64>,
) -> Result<Vector3<f64>> {
    match reflector {
        Reflector::Plane { point, normal, .. } => Ok(planar_virtual_point(point, normal, p)),
        Reflector::Sphere { center, radius } => {
            let s = solve_specular_point(center, *radius, p, eye)?;
            caustic_point_for(center, *radius, p, eye, &s)
        }
        Reflector::Cap { center, radius, axis, angle } => {
            let s = solve_specular_point(center, *radius, p, eye)?;
            if ((s - center) / *radius).dot(&axis.normalize()) < angle.cos() {
                return Err(Error::Numerical("specular point outside the cap".into()));
            }
            caustic_point_for(center, *radius, p, eye, &s)
        }
    }
}

fn caustic_point_for(
    center: &Vector3<f64>,
    radius: f64,
    p: &Vector3<f64>,
    eye: &Vector3<f64>,
    s: &Vector3<f64>,
) -> Result<Vector3<f64>> {
    let circle = CircleSection::through(*center, radius, p, eye)?;
    let t = circle.param_of(s);
    let sample = envelope_point_at(&circle, &SourceSpec::Point(*p), t, ENVELOPE_DELTA)?;
    Ok(sample.point)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit_circle() -> CircleSection {
        CircleSection { center: Vector3::zeros(), radius: 1.0, u: Vector3::x(), v: Vector3::y() }
    }

    #[test]
    fn planar_virtual_point_trivial() {
        let q = Vector3::zeros();
        let n = Vector3::z();
        assert!(
            (planar_virtual_point(&q, &n, &Vector3::new(0.0, 0.0, 1.0))
                - Vector3::new(0.0, 0.0, -1.0))
            .norm()
                < 1e-12
        );
        assert!(
            (planar_virtual_point(&q, &n, &Vector3::new(3.0, -2.0, 5.0))
                - Vector3::new(3.0, -2.0, -5.0))
            .norm()
                < 1e-12
        );
    }

    #[test]
    fn planar_virtual_point_properties() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..100 {
            let q = Vector3::new(rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0));
            let n = Vector3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            );
            if n.norm() < 0.1 {
                continue;
            }
            let n = n.normalize();
            let p = Vector3::new(rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0));
            let img = planar_virtual_point(&q, &n, &p);
            let mid = 0.5 * (p + img);
            assert!((mid - q).dot(&n).abs() < 1e-9, "midpoint off plane");
            let seg = img - p;
            assert!(seg.cross(&n).norm() < 1e-9 * seg.norm().max(1e-9), "segment not along normal");
        }
    }

    #[test]
    fn rim_source_caustic_is_a_cardioid() {
        let circle = unit_circle();
        let source = SourceSpec::Point(Vector3::new(1.0, 0.0, 0.0));
        let cusp = Vector3::new(-1.0 / 3.0, 0.0, 0.0);
        let samples = envelope_points(&circle, &source, (0.05, std::f64::consts::TAU - 0.05), 400);
        let mut worst: f64 = 0.0;
        for s in samples {
            let s = s.unwrap();
            let expect = cusp
                + (2.0 / 3.0)
                    * (1.0 + s.t.cos())
                    * Vector3::new(s.t.cos(), s.t.sin(), 0.0);
            worst = worst.max((s.point - expect).norm());
            assert!(s.residual < 1e-6, "tangency residual {}", s.residual);
        }
        assert!(worst < 1e-4, "cardioid deviation {worst}");
    }

    #[test]
    fn parallel_source_caustic_is_delta_stable() {
        let circle = unit_circle();
        let source = SourceSpec::Direction(Vector3::new(1.0, 0.0, 0.0));
        // illuminated half: normals facing the incoming rays
        for i in 0..60 {
            let t = std::f64::consts::PI * (0.55 + 0.9 * i as f64 / 59.0);
            let a = envelope_point_at(&circle, &source, t, 1e-4).unwrap();
            let b = envelope_point_at(&circle, &source, t, 5e-5).unwrap();
            assert!((a.point - b.point).norm() < 1e-6, "delta halving moved point");
            // nephroid lives inside the circle at half radius scale
            assert!((a.point - circle.center).norm() < 1.0);
        }
    }

    #[test]
    fn straight_mirror_recovers_planar_virtual_point() {
        let line = LineSection {
            origin: Vector3::new(0.2, -0.1, 0.0),
            direction: Vector3::new(1.0, 0.4, 0.0).normalize(),
            plane_normal: Vector3::new(-0.4, 1.0, 0.0).normalize(),
        };
        let p = Vector3::new(0.3, 1.2, 0.0);
        let expect = planar_virtual_point(&line.origin, &line.plane_normal, &p);
        let source = SourceSpec::Point(p);
        // for a straight mirror the pairwise intersection is exact at any delta
        for t in [-1.5, -0.4, 0.3, 0.9, 2.0] {
            for delta in [1e-1, 1e-2] {
                let s = envelope_point_at(&line, &source, t, delta).unwrap();
                assert!(
                    (s.point - expect).norm() < 1e-9,
                    "t={t} delta={delta}: {:?} vs {expect:?}",
                    s.point
                );
            }
        }
    }

    #[test]
    fn specular_point_symmetric_configuration() {
        let p = Vector3::new(2.0, 1.0, 0.0);
        let eye = Vector3::new(2.0, -1.0, 0.0);
        let s = solve_specular_point(&Vector3::zeros(), 1.0, &p, &eye).unwrap();
        assert!(s.y.abs() < 1e-9, "not on the symmetry diameter: {s:?}");
        assert!(s.x > 0.0);
        assert!((s.norm() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn specular_condition_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let center = Vector3::new(0.1, -0.2, 0.3);
        let radius = 0.7;
        let mut solved = 0;
        for _ in 0..80 {
            let dir = Vector3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            );
            if dir.norm() < 0.1 {
                continue;
            }
            let p = center + dir.normalize() * rng.gen_range(1.5..4.0);
            let dir2 = Vector3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            );
            // keep the source and the eye on broadly the same side so the
            // reflection is actually visible
            if dir2.norm() < 0.1 || dir.normalize().dot(&dir2.normalize()) < -0.3 {
                continue;
            }
            let eye = center + dir2.normalize() * rng.gen_range(1.5..4.0);
            let s = solve_specular_point(&center, radius, &p, &eye).unwrap();
            solved += 1;
            let n = ((s - center) / radius).normalize();
            let cos_in = n.dot(&(p - s).normalize());
            let cos_out = n.dot(&(eye - s).normalize());
            assert!((cos_in - cos_out).abs() < 1e-8, "angle residual {}", (cos_in - cos_out).abs());
        }
        assert!(solved >= 30, "only {solved} configurations solved");
    }

    #[test]
    fn no_specular_solution_for_interior_source() {
        let p = Vector3::new(0.2, 0.0, 0.0);
        let eye = Vector3::new(3.0, 0.5, 0.0);
        assert!(solve_specular_point(&Vector3::zeros(), 1.0, &p, &eye).is_err());
    }

    #[test]
    fn virtual_point_lies_on_envelope() {
        let center = Vector3::zeros();
        let radius = 1.0;
        let p = Vector3::new(2.2, 0.4, 0.0);
        let eye = Vector3::new(0.5, -2.5, 0.0);
        let reflector = Reflector::Sphere { center, radius };
        let vp = virtual_point_on_catacaustic(&reflector, &p, &eye).unwrap();
        let circle = CircleSection::through(center, radius, &p, &eye).unwrap();
        let source = SourceSpec::Point(p);
        let coarse = envelope_points(&circle, &source, (0.0, std::f64::consts::TAU), 4000);
        let mut best = f64::INFINITY;
        let mut best_t = 0.0;
        for s in coarse.into_iter().flatten() {
            let d = (s.point - vp).norm();
            if d < best {
                best = d;
                best_t = s.t;
            }
        }
        // refine around the nearest coarse sample
        let span = std::f64::consts::TAU / 4000.0 * 2.0;
        let fine = envelope_points(&circle, &source, (best_t - span, best_t + span), 2000);
        for s in fine.into_iter().flatten() {
            best = best.min((s.point - vp).norm());
        }
        assert!(best < 1e-4, "virtual point off envelope by {best}");
    }

    #[test]
    fn virtual_point_planar_matches_for_any_camera() {
        let reflector = Reflector::Plane {
            point: Vector3::new(0.0, 0.0, 1.0),
            normal: Vector3::new(0.1, 0.2, -1.0),
            extent: 2.0,
        };
        let p = Vector3::new(0.4, -0.3, -1.0);
        let expect =
            planar_virtual_point(&Vector3::new(0.0, 0.0, 1.0), &Vector3::new(0.1, 0.2, -1.0), &p);
        for eye in [Vector3::new(0.0, 0.0, -2.0), Vector3::new(1.5, 0.8, -1.2)] {
            let vp = virtual_point_on_catacaustic(&reflector, &p, &eye).unwrap();
            assert!((vp - expect).norm() < 1e-12);
        }
    }

    #[test]
    fn caustic_point_is_second_order_tangent() {
        let circle = unit_circle();
        let source = SourceSpec::Point(Vector3::new(1.8, 0.3, 0.0));
        let t = 2.1;
        let e = envelope_point_at(&circle, &source, t, 1e-4).unwrap();
        for delta in [1e-2, 1e-3] {
            let (o, d) = virtual_ray(&circle, &source, t + delta);
            let dist = dist_to_line(&e.point, &o, &d);
            assert!(dist < 20.0 * delta * delta, "delta {delta}: distance {dist}");
        }
    }
}
