//! Differentiable elliptical splat rasterizer.
//!
//! Points are projected to screen-space Gaussians `Sigma = f M M^T + nu I`
//! with `M` the Jacobian of the disk-plane-to-pixel map, then composited
//! front to back: `out = sum_i c_i a_i prod_{j<i} (1 - a_j)` with
//! accumulated transmittance `obar = prod_j (1 - a_j)`. The backward pass
//! is exact for every contributor and linear in the contributor count: a
//! forward sweep stores prefix transmittances, a back-to-front sweep
//! maintains the suffix sums that close the product-rule recursion.

use std::collections::HashMap;

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3};
use rayon::prelude::*;

use crate::error::Result;
use crate::geometry::{project, Camera};
use crate::img::FeatureImage;
use crate::neural::EnvironmentMap;
use crate::ply::PointRecords;

/// Low-pass floor added to every screen-space covariance.
pub const NU: f64 = 0.3;
/// Compositing opacity clamp keeping transmittance strictly positive.
pub const ALPHA_MAX: f64 = 0.999;
/// Mahalanobis cutoff (3 sigma): contributions beyond it are dropped.
pub const CUTOFF_Q: f64 = 9.0;
const TILE: usize = 16;

pub const FEATURE_DIM: usize = 6;

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn inverse_sigmoid(y: f64) -> f64 {
    if y <= 0.0 {
        -1000.0
    } else if y >= 1.0 {
        1000.0
    } else {
        (y / (1.0 - y)).ln()
    }
}

fn inverse_softplus(y: f64) -> f64 {
    if y <= 0.0 {
        -1000.0
    } else if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

/// One splat: geometry plus raw (unconstrained) appearance parameters.
///
/// Opacity and rho live behind a sigmoid, the footprint behind a softplus,
/// so any raw value yields a valid splat. Reflection points carry no rho
/// and get a camera-facing normal assigned per view.
#[derive(Clone, Debug, PartialEq)]
pub struct SplatPoint {
    pub position: Vector3<f64>,
    pub normal: Vector3<f64>,
    pub raw_footprint: f64,
    pub raw_opacity: f64,
    pub features: [f64; FEATURE_DIM],
    pub raw_rho: Option<f64>,
}

impl SplatPoint {
    /// Build from effective (constrained) values.
    pub fn new(
        position: Vector3<f64>,
        normal: Vector3<f64>,
        footprint: f64,
        opacity: f64,
        features: [f64; FEATURE_DIM],
        rho: Option<f64>,
    ) -> Self {
        SplatPoint {
            position,
            normal,
            raw_footprint: inverse_softplus(footprint),
            raw_opacity: inverse_sigmoid(opacity),
            features,
            raw_rho: rho.map(inverse_sigmoid),
        }
    }

    /// Squared disk radius, world units squared.
    #[inline]
    pub fn footprint(&self) -> f64 {
        softplus(self.raw_footprint)
    }

    #[inline]
    pub fn opacity(&self) -> f64 {
        sigmoid(self.raw_opacity)
    }

    #[inline]
    pub fn rho(&self) -> Option<f64> {
        self.raw_rho.map(sigmoid)
    }
}

/// A set of splats sharing one rasterization pass.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<SplatPoint>,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn aabb(&self) -> Option<crate::geometry::Aabb> {
        crate::geometry::Aabb::from_points(self.points.iter().map(|p| &p.position))
    }

    /// Binary PLY with effective-value properties (f, o, optional rho,
    /// six feature channels).
    pub fn save_ply(&self, path: &std::path::Path) -> Result<()> {
        let has_rho = self.points.first().map_or(false, |p| p.raw_rho.is_some());
        let mut names: Vec<String> = ["x", "y", "z", "nx", "ny", "nz", "f", "o"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        if has_rho {
            names.push("rho".into());
        }
        for c in 0..FEATURE_DIM {
            names.push(format!("feat_{c}"));
        }
        let rows = self
            .points
            .iter()
            .map(|p| {
                let mut row = vec![
                    p.position.x,
                    p.position.y,
                    p.position.z,
                    p.normal.x,
                    p.normal.y,
                    p.normal.z,
                    p.footprint(),
                    p.opacity(),
                ];
                if has_rho {
                    row.push(p.rho().unwrap_or(0.5));
                }
                row.extend_from_slice(&p.features);
                row
            })
            .collect();
        crate::ply::save_binary_points(path, &PointRecords { names, rows })
    }

    pub fn load_ply(path: &std::path::Path) -> Result<Self> {
        let rec = crate::ply::load_binary_points(path)?;
        let (xi, yi, zi) = (rec.column("x")?, rec.column("y")?, rec.column("z")?);
        let (nxi, nyi, nzi) = (rec.column("nx")?, rec.column("ny")?, rec.column("nz")?);
        let fi = rec.column("f")?;
        let oi = rec.column("o")?;
        let rhoi = rec.column("rho").ok();
        let feat_idx: Vec<usize> = (0..FEATURE_DIM)
            .map(|c| rec.column(&format!("feat_{c}")))
            .collect::<Result<_>>()?;
        let points = rec
            .rows
            .iter()
            .map(|row| {
                let mut features = [0.0; FEATURE_DIM];
                for (c, &fi) in feat_idx.iter().enumerate() {
                    features[c] = row[fi];
                }
                SplatPoint::new(
                    Vector3::new(row[xi], row[yi], row[zi]),
                    Vector3::new(row[nxi], row[nyi], row[nzi]),
                    row[fi],
                    row[oi],
                    features,
                    rhoi.map(|ri| row[ri]),
                )
            })
            .collect();
        Ok(PointCloud { points })
    }
}

/// Unit normal pointing from `p` toward the camera center.
pub fn camera_facing_normal(camera: &Camera, p: &Vector3<f64>) -> Vector3<f64> {
    (camera.position - p).normalize()
}

/// Screen-space Gaussian of one splat.
#[derive(Clone, Copy, Debug)]
pub struct Splat2D {
    pub center: Vector2<f64>,
    pub cov: Matrix2<f64>,
    pub depth: f64,
    pub index: usize,
}

/// 2x3 Jacobian of the disk-plane-to-pixel map: `J_pix (I - n n^T)`.
fn disk_jacobian(camera: &Camera, position: &Vector3<f64>, normal: &Vector3<f64>) -> Option<Matrix2x3<f64>> {
    let j = crate::geometry::projection_jacobian(camera, position)?;
    let p = Matrix3::identity() - normal * normal.transpose();
    Some(j * p)
}

/// EWA screen-space covariance `Sigma = f M M^T + nu I` and center.
///
/// The in-plane variance is isotropic (`V = f I`), so the result does not
/// depend on a tangent basis; grazing orientations degrade gracefully to
/// the low-pass floor. Returns `None` behind the camera.
pub fn splat_covariance(
    camera: &Camera,
    position: &Vector3<f64>,
    normal: &Vector3<f64>,
    footprint: f64,
    index: usize,
) -> Option<Splat2D> {
    let (center, depth) = project(camera, position)?;
    let m = disk_jacobian(camera, position, normal)?;
    let cov = footprint * (m * m.transpose()) + Matrix2::identity() * NU;
    Some(Splat2D { center, cov, depth, index })
}

/// Pixel rectangle a pass is restricted to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RasterRegion {
    pub x0: usize,
    pub y0: usize,
    pub width: usize,
    pub height: usize,
}

impl RasterRegion {
    pub fn full(camera: &Camera) -> Self {
        RasterRegion { x0: 0, y0: 0, width: camera.width as usize, height: camera.height as usize }
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct RasterOptions<'a> {
    /// Composite the rho channel (primary pass).
    pub with_rho: bool,
    /// Restrict to a pixel rectangle; `None` renders the full image.
    pub region: Option<RasterRegion>,
    /// Rasterize only these point indices (warm-up subsets).
    pub subset: Option<&'a [usize]>,
}

/// Forward rasterization result with per-pixel contributor lists.
#[derive(Clone, Debug)]
pub struct RasterOutput {
    pub region: RasterRegion,
    pub features: FeatureImage,
    pub rho: Option<FeatureImage>,
    /// Accumulated transmittance obar per pixel.
    pub transmittance: FeatureImage,
    /// Per region pixel, front-to-back (point index, composited alpha).
    pub contributors: Vec<Vec<(u32, f64)>>,
}

impl RasterOutput {
    pub fn contributors_at(&self, x: usize, y: usize) -> &[(u32, f64)] {
        &self.contributors[y * self.region.width + x]
    }
}

struct ActiveSplat {
    splat: Splat2D,
    inv_cov: Matrix2<f64>,
    opacity: f64,
    rho: f64,
    features: [f64; FEATURE_DIM],
}

fn gather_active(cloud: &PointCloud, camera: &Camera, opts: &RasterOptions) -> Vec<ActiveSplat> {
    let indices: Vec<usize> = match opts.subset {
        Some(s) => s.to_vec(),
        None => (0..cloud.len()).collect(),
    };
    indices
        .into_iter()
        .filter_map(|i| {
            let p = &cloud.points[i];
            let opacity = p.opacity();
            if opacity <= 0.0 {
                return None;
            }
            let splat = splat_covariance(camera, &p.position, &p.normal, p.footprint(), i)?;
            let inv_cov = splat.cov.try_inverse()?;
            Some(ActiveSplat {
                splat,
                inv_cov,
                opacity,
                rho: p.rho().unwrap_or(0.0),
                features: p.features,
            })
        })
        .collect()
}

fn splat_bbox(s: &Splat2D, region: &RasterRegion) -> Option<(usize, usize, usize, usize)> {
    let rx = 3.0 * s.cov[(0, 0)].sqrt();
    let ry = 3.0 * s.cov[(1, 1)].sqrt();
    let x_lo = (s.center.x - rx - 0.5).floor().max(region.x0 as f64) as usize;
    let y_lo = (s.center.y - ry - 0.5).floor().max(region.y0 as f64) as usize;
    let x_hi = (s.center.x + rx + 0.5).ceil().min((region.x0 + region.width) as f64) as usize;
    let y_hi = (s.center.y + ry + 0.5).ceil().min((region.y0 + region.height) as f64) as usize;
    if (s.center.x + rx) < region.x0 as f64
        || (s.center.y + ry) < region.y0 as f64
        || x_lo >= x_hi
        || y_lo >= y_hi
    {
        return None;
    }
    Some((x_lo, y_lo, x_hi, y_hi))
}

/// Rasterize a cloud front to back.
///
/// Per pixel, contributors are splats whose Gaussian at the pixel center is
/// within the 3-sigma cutoff, sorted by depth with index as the tie-break;
/// `alpha_i = o_i exp(-q_i/2)` clamped to [`ALPHA_MAX`]. Empty pixels have
/// zero features and transmittance one.
pub fn rasterize(cloud: &PointCloud, camera: &Camera, opts: &RasterOptions) -> RasterOutput {
    let region = opts.region.unwrap_or_else(|| RasterRegion::full(camera));
    let active = gather_active(cloud, camera, opts);

    let tiles_x = region.width.div_ceil(TILE);
    let tiles_y = region.height.div_ceil(TILE);
    let mut bins: Vec<Vec<u32>> = vec![Vec::new(); tiles_x * tiles_y];
    for (ai, a) in active.iter().enumerate() {
        if let Some((x_lo, y_lo, x_hi, y_hi)) = splat_bbox(&a.splat, &region) {
            let tx0 = (x_lo - region.x0) / TILE;
            let ty0 = (y_lo - region.y0) / TILE;
            let tx1 = (x_hi - 1 - region.x0) / TILE;
            let ty1 = (y_hi - 1 - region.y0) / TILE;
            for ty in ty0..=ty1 {
                for tx in tx0..=tx1 {
                    bins[ty * tiles_x + tx].push(ai as u32);
                }
            }
        }
    }

    struct TilePixel {
        features: [f64; FEATURE_DIM],
        rho: f64,
        trans: f64,
        list: Vec<(u32, f64)>,
    }

    let tile_results: Vec<Vec<TilePixel>> = (0..tiles_x * tiles_y)
        .into_par_iter()
        .map(|t| {
            let (tx, ty) = (t % tiles_x, t / tiles_x);
            let x_lo = region.x0 + tx * TILE;
            let y_lo = region.y0 + ty * TILE;
            let x_hi = (x_lo + TILE).min(region.x0 + region.width);
            let y_hi = (y_lo + TILE).min(region.y0 + region.height);
            let candidates = &bins[t];
            let mut out = Vec::with_capacity((x_hi - x_lo) * (y_hi - y_lo));
            let mut gathered: Vec<(f64, u32, f64)> = Vec::new();
            for y in y_lo..y_hi {
                for x in x_lo..x_hi {
                    let px = Vector2::new(x as f64 + 0.5, y as f64 + 0.5);
                    gathered.clear();
                    for &ai in candidates {
                        let a = &active[ai as usize];
                        let d = px - a.splat.center;
                        let q = d.dot(&(a.inv_cov * d));
                        if q > CUTOFF_Q {
                            continue;
                        }
                        let alpha = (a.opacity * (-0.5 * q).exp()).min(ALPHA_MAX);
                        if alpha <= 0.0 {
                            continue;
                        }
                        gathered.push((a.splat.depth, ai, alpha));
                    }
                    gathered.sort_by(|l, r| {
                        l.0.partial_cmp(&r.0)
                            .unwrap()
                            .then(active[l.1 as usize].splat.index.cmp(&active[r.1 as usize].splat.index))
                    });
                    let mut features = [0.0; FEATURE_DIM];
                    let mut rho = 0.0;
                    let mut trans = 1.0;
                    let mut list = Vec::with_capacity(gathered.len());
                    for &(_, ai, alpha) in gathered.iter() {
                        let a = &active[ai as usize];
                        let w = alpha * trans;
                        for c in 0..FEATURE_DIM {
                            features[c] += w * a.features[c];
                        }
                        rho += w * a.rho;
                        trans *= 1.0 - alpha;
                        list.push((a.splat.index as u32, alpha));
                    }
                    out.push(TilePixel { features, rho, trans, list });
                }
            }
            out
        })
        .collect();

    let mut features = FeatureImage::new(region.width, region.height, FEATURE_DIM);
    let mut rho =
        if opts.with_rho { Some(FeatureImage::new(region.width, region.height, 1)) } else { None };
    let mut transmittance = FeatureImage::new(region.width, region.height, 1);
    for v in transmittance.data.iter_mut() {
        *v = 1.0;
    }
    let mut contributors: Vec<Vec<(u32, f64)>> = vec![Vec::new(); region.width * region.height];
    for (t, tile) in tile_results.into_iter().enumerate() {
        let (tx, ty) = (t % tiles_x, t / tiles_x);
        let x_lo = tx * TILE;
        let y_lo = ty * TILE;
        let x_hi = (x_lo + TILE).min(region.width);
        let mut it = tile.into_iter();
        for y in y_lo..((y_lo + TILE).min(region.height)) {
            for x in x_lo..x_hi {
                let px = it.next().expect("tile pixel");
                for c in 0..FEATURE_DIM {
                    features.set(x, y, c, px.features[c]);
                }
                if let Some(r) = rho.as_mut() {
                    r.set(x, y, 0, px.rho);
                }
                transmittance.set(x, y, 0, px.trans);
                contributors[y * region.width + x] = px.list;
            }
        }
    }
    RasterOutput { region, features, rho, transmittance, contributors }
}

/// Cotangents flowing back into a [`RasterOutput`].
pub struct RasterCotangents<'a> {
    pub d_features: &'a FeatureImage,
    pub d_rho: Option<&'a FeatureImage>,
    pub d_transmittance: &'a FeatureImage,
}

/// Per-point gradients of a rasterization pass.
#[derive(Clone, Debug)]
pub struct RasterGrads {
    pub d_position: Vec<Vector3<f64>>,
    pub d_normal: Vec<Vector3<f64>>,
    pub d_footprint: Vec<f64>,
    pub d_opacity: Vec<f64>,
    pub d_features: Vec<[f64; FEATURE_DIM]>,
    pub d_rho: Vec<f64>,
    /// Accumulated screen-space center gradient (densification signal).
    pub d_center: Vec<Vector2<f64>>,
}

impl RasterGrads {
    fn zeros(n: usize) -> Self {
        RasterGrads {
            d_position: vec![Vector3::zeros(); n],
            d_normal: vec![Vector3::zeros(); n],
            d_footprint: vec![0.0; n],
            d_opacity: vec![0.0; n],
            d_features: vec![[0.0; FEATURE_DIM]; n],
            d_rho: vec![0.0; n],
            d_center: vec![Vector2::zeros(); n],
        }
    }
}

#[derive(Clone, Copy)]
struct GradSlot {
    d_mu: Vector2<f64>,
    d_sigma: Matrix2<f64>,
    d_opacity: f64,
    d_rho: f64,
    d_features: [f64; FEATURE_DIM],
}

impl Default for GradSlot {
    fn default() -> Self {
        GradSlot {
            d_mu: Vector2::zeros(),
            d_sigma: Matrix2::zeros(),
            d_opacity: 0.0,
            d_rho: 0.0,
            d_features: [0.0; FEATURE_DIM],
        }
    }
}

/// Chain `(d_mu, d_sigma)` through the covariance construction to
/// `(d_position, d_normal, d_footprint)`.
fn covariance_backward(
    camera: &Camera,
    position: &Vector3<f64>,
    normal: &Vector3<f64>,
    footprint: f64,
    d_mu: &Vector2<f64>,
    d_sigma: &Matrix2<f64>,
) -> (Vector3<f64>, Vector3<f64>, f64) {
    let r = camera.rotation;
    let pv = camera.to_view(position);
    let j = crate::geometry::projection_jacobian(camera, position).expect("visible in backward");
    let p_mat = Matrix3::identity() - normal * normal.transpose();
    let m = j * p_mat;
    let d_sigma_sym = 0.5 * (d_sigma + d_sigma.transpose());

    let d_footprint = (d_sigma_sym.component_mul(&(m * m.transpose()))).sum();
    let d_m = 2.0 * footprint * d_sigma_sym * m;
    let d_j = d_m * p_mat;
    let d_p = j.transpose() * d_m;
    let d_normal = -(d_p + d_p.transpose()) * normal;
    let d_a = d_j * r.transpose();

    let (x, y, z) = (pv.x, pv.y, pv.z);
    let z2 = z * z;
    let z3 = z2 * z;
    let mut d_pv = Vector3::zeros();
    d_pv.x = d_a[(0, 2)] * (-camera.fx / z2);
    d_pv.y = d_a[(1, 2)] * (-camera.fy / z2);
    d_pv.z = d_a[(0, 0)] * (-camera.fx / z2)
        + d_a[(1, 1)] * (-camera.fy / z2)
        + d_a[(0, 2)] * (2.0 * camera.fx * x / z3)
        + d_a[(1, 2)] * (2.0 * camera.fy * y / z3);

    let d_position = r.transpose() * d_pv + j.transpose() * d_mu;
    (d_position, d_normal, d_footprint)
}

/// Exact two-pass backward over all contributors.
///
/// Pass one re-derives the prefix transmittances `T_i`; pass two walks back
/// to front keeping per-channel suffix sums `S_c = sum_{i>j} c_i a_i T_i`,
/// which gives `d out / d a_j = c_j T_j - S_c / (1 - a_j)` and
/// `d obar / d a_j = -obar / (1 - a_j)` in O(contributors).
pub fn rasterize_backward(
    cloud: &PointCloud,
    camera: &Camera,
    opts: &RasterOptions,
    output: &RasterOutput,
    cot: &RasterCotangents,
) -> RasterGrads {
    let region = output.region;
    assert_eq!(cot.d_features.width, region.width);
    assert_eq!(cot.d_features.height, region.height);

    // cache geometry for every contributing point
    let mut cache: HashMap<u32, (Splat2D, Matrix2<f64>, f64, f64)> = HashMap::new();
    for list in &output.contributors {
        for &(idx, _) in list {
            cache.entry(idx).or_insert_with(|| {
                let p = &cloud.points[idx as usize];
                let s = splat_covariance(camera, &p.position, &p.normal, p.footprint(), idx as usize)
                    .expect("contributor visible");
                let inv = s.cov.try_inverse().expect("covariance invertible");
                (s, inv, p.opacity(), p.rho().unwrap_or(0.0))
            });
        }
    }

    let tiles_x = region.width.div_ceil(TILE);
    let tiles_y = region.height.div_ceil(TILE);
    let with_rho = opts.with_rho;

    let tile_slots: Vec<Vec<(u32, GradSlot)>> = (0..tiles_x * tiles_y)
        .into_par_iter()
        .map(|t| {
            let (tx, ty) = (t % tiles_x, t / tiles_x);
            let x_hi = ((tx + 1) * TILE).min(region.width);
            let y_hi = ((ty + 1) * TILE).min(region.height);
            let mut slots: HashMap<u32, GradSlot> = HashMap::new();
            let mut prefix: Vec<f64> = Vec::new();
            for y in ty * TILE..y_hi {
                for x in tx * TILE..x_hi {
                    let list = &output.contributors[y * region.width + x];
                    if list.is_empty() {
                        continue;
                    }
                    let mut g_feat = [0.0; FEATURE_DIM];
                    for (c, g) in g_feat.iter_mut().enumerate() {
                        *g = cot.d_features.get(x, y, c);
                    }
                    let g_rho = cot.d_rho.map_or(0.0, |im| im.get(x, y, 0));
                    let g_trans = cot.d_transmittance.get(x, y, 0);

                    prefix.clear();
                    let mut t_run = 1.0;
                    for &(_, alpha) in list {
                        prefix.push(t_run);
                        t_run *= 1.0 - alpha;
                    }
                    let obar = t_run;

                    let px = Vector2::new(
                        (region.x0 + x) as f64 + 0.5,
                        (region.y0 + y) as f64 + 0.5,
                    );
                    let mut suffix = [0.0; FEATURE_DIM];
                    let mut suffix_rho = 0.0;
                    for i in (0..list.len()).rev() {
                        let (idx, alpha) = list[i];
                        let t_i = prefix[i];
                        let (splat, inv_cov, opacity, rho) = cache[&idx];
                        let p = &cloud.points[idx as usize];
                        let one_minus = 1.0 - alpha;
                        let w = alpha * t_i;

                        let mut d_alpha = -g_trans * obar / one_minus;
                        let slot = slots.entry(idx).or_default();
                        for c in 0..FEATURE_DIM {
                            d_alpha += g_feat[c] * (p.features[c] * t_i - suffix[c] / one_minus);
                            slot.d_features[c] += g_feat[c] * w;
                        }
                        if with_rho {
                            d_alpha += g_rho * (rho * t_i - suffix_rho / one_minus);
                            slot.d_rho += g_rho * w;
                        }
                        for c in 0..FEATURE_DIM {
                            suffix[c] += p.features[c] * w;
                        }
                        suffix_rho += rho * w;

                        let d = px - splat.center;
                        let q = d.dot(&(inv_cov * d));
                        let gauss = (-0.5 * q).exp();
                        if opacity * gauss < ALPHA_MAX {
                            slot.d_opacity += d_alpha * gauss;
                            let g_q = d_alpha * opacity * gauss * (-0.5);
                            let icd = inv_cov * d;
                            slot.d_mu += g_q * (-2.0 * icd);
                            slot.d_sigma += g_q * (-(icd * icd.transpose()));
                        }
                    }
                }
            }
            let mut out: Vec<(u32, GradSlot)> = slots.into_iter().collect();
            out.sort_by_key(|(idx, _)| *idx);
            out
        })
        .collect();

    let mut merged: HashMap<u32, GradSlot> = HashMap::new();
    for tile in tile_slots {
        for (idx, slot) in tile {
            let m = merged.entry(idx).or_default();
            m.d_mu += slot.d_mu;
            m.d_sigma += slot.d_sigma;
            m.d_opacity += slot.d_opacity;
            m.d_rho += slot.d_rho;
            for c in 0..FEATURE_DIM {
                m.d_features[c] += slot.d_features[c];
            }
        }
    }

    let mut grads = RasterGrads::zeros(cloud.len());
    let mut keys: Vec<u32> = merged.keys().copied().collect();
    keys.sort_unstable();
    for idx in keys {
        let slot = &merged[&idx];
        let i = idx as usize;
        let p = &cloud.points[i];
        let (d_pos, d_norm, d_f) = covariance_backward(
            camera,
            &p.position,
            &p.normal,
            p.footprint(),
            &slot.d_mu,
            &slot.d_sigma,
        );
        grads.d_position[i] = d_pos;
        grads.d_normal[i] = d_norm;
        grads.d_footprint[i] = d_f;
        grads.d_opacity[i] = slot.d_opacity;
        grads.d_rho[i] = slot.d_rho;
        grads.d_features[i] = slot.d_features;
        grads.d_center[i] = slot.d_mu;
    }
    grads
}

/// `features + obar * envmap(pixel ray)` over the raster region.
pub fn blend_environment(
    raster: &RasterOutput,
    env: &EnvironmentMap,
    camera: &Camera,
) -> FeatureImage {
    let region = raster.region;
    let mut out = raster.features.clone();
    let mut env_val = vec![0.0; out.channels];
    for y in 0..region.height {
        for x in 0..region.width {
            let ray = camera
                .pixel_ray((region.x0 + x) as f64 + 0.5, (region.y0 + y) as f64 + 0.5);
            env.lookup(&ray.direction, &mut env_val);
            let obar = raster.transmittance.get(x, y, 0);
            for c in 0..out.channels {
                let v = out.get(x, y, c) + obar * env_val[c];
                out.set(x, y, c, v);
            }
        }
    }
    out
}

/// Backward of [`blend_environment`]: returns the transmittance cotangent
/// and accumulates texel gradients into `d_env`.
pub fn blend_environment_backward(
    raster: &RasterOutput,
    env: &EnvironmentMap,
    camera: &Camera,
    d_out: &FeatureImage,
    d_env: &mut crate::neural::EnvironmentMapGrads,
) -> FeatureImage {
    let region = raster.region;
    let mut d_trans = FeatureImage::new(region.width, region.height, 1);
    let mut env_val = vec![0.0; d_out.channels];
    let mut d_pixel = vec![0.0; d_out.channels];
    for y in 0..region.height {
        for x in 0..region.width {
            let ray = camera
                .pixel_ray((region.x0 + x) as f64 + 0.5, (region.y0 + y) as f64 + 0.5);
            env.lookup(&ray.direction, &mut env_val);
            let obar = raster.transmittance.get(x, y, 0);
            let mut g_obar = 0.0;
            for c in 0..d_out.channels {
                let g = d_out.get(x, y, c);
                g_obar += g * env_val[c];
                d_pixel[c] = g * obar;
            }
            env.lookup_backward(&ray.direction, &d_pixel, d_env);
            d_trans.set(x, y, 0, g_obar);
        }
    }
    d_trans
}
