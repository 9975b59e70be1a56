//! Application-level operations on a trained model: batch path rendering,
//! reflection-point correspondences, reflector cloning, stereo pairs with a
//! decoupled warp eye, and the analytic-vs-learned catacaustic report.

use nalgebra::{Vector2, Vector3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{project, Aabb, Camera};
use crate::img::FeatureImage;
use crate::oracle::caustic::virtual_point_on_catacaustic;
use crate::oracle::scene::Reflector;
use crate::pipeline::{render_view, ModelState, RenderOptions};
use crate::raster::{rasterize, RasterOptions};

/// Render a camera path. `warp_cameras`, when given, overrides the position
/// fed to the warp field per frame (reflection editing); the default is the
/// raster camera itself, which reproduces standard rendering exactly.
pub fn render_path(
    model: &ModelState,
    cameras: &[Camera],
    warp_cameras: Option<&[Vector3<f64>]>,
) -> Result<Vec<FeatureImage>> {
    if cameras.is_empty() {
        return Err(Error::InvalidInput("camera path is empty".into()));
    }
    if let Some(w) = warp_cameras {
        if w.len() != cameras.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} warp cameras for {} frames",
                w.len(),
                cameras.len()
            )));
        }
    }
    cameras
        .par_iter()
        .enumerate()
        .map(|(i, cam)| {
            let opts = RenderOptions {
                warp_camera: warp_cameras.map(|w| w[i]),
                ..RenderOptions::default()
            };
            Ok(render_view(model, cam, &opts)?.rgb)
        })
        .collect()
}

/// One reflection point observed by one camera.
#[derive(Clone, Copy, Debug)]
pub struct TrackSample {
    /// Projection of the warped point; `None` behind the camera.
    pub pixel: Option<Vector2<f64>>,
    /// View-space depth of the warped point (meaningless when behind).
    pub depth: f64,
    /// On screen and in front of the composited primary surface.
    pub visible: bool,
}

/// Projected trajectories of selected reflection points across cameras;
/// `tracks[k][j]` is point `indices[k]` seen by `cameras[j]`.
///
/// A warped point counts as visible when its depth is at most the median
/// composited contributor depth of the primary pass at its pixel, plus 1% of
/// the primary cloud extent as slack.
pub fn correspond(
    model: &ModelState,
    indices: &[usize],
    cameras: &[Camera],
) -> Result<Vec<Vec<TrackSample>>> {
    for &i in indices {
        if i >= model.reflection.len() {
            return Err(Error::InvalidInput(format!(
                "reflection point {i} out of range ({} points)",
                model.reflection.len()
            )));
        }
    }
    let slack = 0.01
        * Aabb::from_points(model.primary.points.iter().map(|p| &p.position))
            .map(|b| b.extent().norm())
            .unwrap_or(1.0);
    let bases: Vec<Vector3<f64>> =
        indices.iter().map(|&i| model.reflection.points[i].position).collect();

    let per_camera: Vec<Vec<TrackSample>> = cameras
        .par_iter()
        .map(|cam| {
            let (warped, _) = model.warp.warp(&bases, &cam.position)?;
            let opts = RasterOptions::default();
            let prim = rasterize(&model.primary, cam, &opts);
            let samples = warped
                .iter()
                .map(|w| match project(cam, w) {
                    None => TrackSample { pixel: None, depth: 0.0, visible: false },
                    Some((px, depth)) => {
                        let x = px.x.floor() as i64;
                        let y = px.y.floor() as i64;
                        let on_screen = x >= 0
                            && y >= 0
                            && (x as usize) < cam.width as usize
                            && (y as usize) < cam.height as usize;
                        let visible = on_screen
                            && match median_contributor_depth(
                                model,
                                cam,
                                prim.contributors_at(x as usize, y as usize),
                            ) {
                                Some(front) => depth <= front + slack,
                                None => true,
                            };
                        TrackSample { pixel: Some(px), depth, visible }
                    }
                })
                .collect();
            Ok(samples)
        })
        .collect::<Result<_>>()?;

    // transpose to per-point tracks
    Ok((0..indices.len())
        .map(|k| per_camera.iter().map(|cams| cams[k]).collect())
        .collect())
}

/// Depth at which half the composited alpha at this pixel has accumulated.
fn median_contributor_depth(
    model: &ModelState,
    camera: &Camera,
    contributors: &[(u32, f64)],
) -> Option<f64> {
    if contributors.is_empty() {
        return None;
    }
    let mut dw: Vec<(f64, f64)> = contributors
        .iter()
        .map(|&(i, a)| (camera.to_view(&model.primary.points[i as usize].position).z, a))
        .collect();
    dw.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    let half = 0.5 * dw.iter().map(|x| x.1).sum::<f64>();
    let mut acc = 0.0;
    for &(d, a) in &dw {
        acc += a;
        if acc >= half {
            return Some(d);
        }
    }
    Some(dw.last().unwrap().0)
}

/// Duplicate the primary points inside `selection` shifted by `t` and tag the
/// model with a reflection-cloud instance that renders warped as seen from
/// `camera - t`, then translated by `t`. Only translations are expressible;
/// `t = 0` returns the model unchanged.
pub fn clone_region(
    model: &ModelState,
    selection: &Aabb,
    t: &Vector3<f64>,
) -> Result<ModelState> {
    let mut out = model.clone();
    if t.norm() == 0.0 {
        return Ok(out);
    }
    let mut copies: Vec<_> = model
        .primary
        .points
        .iter()
        .filter(|p| selection.contains(&p.position))
        .cloned()
        .collect();
    if copies.is_empty() {
        return Err(Error::InvalidInput("clone selection contains no primary points".into()));
    }
    for p in &mut copies {
        p.position += t;
    }
    out.primary.points.extend(copies);
    out.clone_offsets.push(*t);
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct StereoPair {
    pub left: FeatureImage,
    pub right: FeatureImage,
}

/// Stereo pairs along a path of cyclopean cameras. Raster eyes sit
/// `eye_separation` apart on the camera's right axis; the warp field sees
/// eyes `warp_separation` apart instead, so 0 feeds both eyes one cyclopean
/// warp camera and the reflections fuse at a single world position.
pub fn stereo_render(
    model: &ModelState,
    cameras: &[Camera],
    eye_separation: f64,
    warp_separation: f64,
) -> Result<Vec<StereoPair>> {
    if cameras.is_empty() {
        return Err(Error::InvalidInput("camera path is empty".into()));
    }
    if eye_separation < 0.0 || warp_separation < 0.0 {
        return Err(Error::InvalidInput("eye separations must be >= 0".into()));
    }
    cameras
        .par_iter()
        .map(|cam| {
            let right = cam.rotation.row(0).transpose();
            let mut eyes = [None, None];
            for (slot, sign) in [-1.0, 1.0].iter().enumerate() {
                let mut eye_cam = cam.clone();
                eye_cam.position += 0.5 * eye_separation * sign * right;
                let opts = RenderOptions {
                    warp_camera: Some(cam.position + 0.5 * warp_separation * sign * right),
                    ..RenderOptions::default()
                };
                eyes[slot] = Some(render_view(model, &eye_cam, &opts)?.rgb);
            }
            let [left, right] = eyes;
            Ok(StereoPair { left: left.unwrap(), right: right.unwrap() })
        })
        .collect()
}

/// Side-by-side record of where geometric optics and the learned warp place
/// the virtual image of one scene point, over sampled camera positions.
#[derive(Clone, Debug, PartialEq)]
pub struct CausticReport {
    /// Accepted camera samples (those with a visible analytic reflection).
    pub eyes: Vec<Vector3<f64>>,
    /// Analytic virtual points on the catacaustic, one per eye.
    pub analytic: Vec<Vector3<f64>>,
    /// Warp-field output for the chosen reflection point, one per eye.
    pub warped: Vec<Vector3<f64>>,
    /// Symmetric Chamfer distance between the two sets (reported, the sets
    /// are expected to differ qualitatively).
    pub chamfer: f64,
    /// Distance of each warped point to the eye's virtual sight line.
    pub ray_residuals: Vec<f64>,
    pub median_residual: f64,
}

/// Sample cameras in the model's training volume and compare the analytic
/// catacaustic of `source` in `reflector` against the warp-field trajectory
/// of reflection point `point_index`.
pub fn compare_catacaustic(
    model: &ModelState,
    reflector: &Reflector,
    source: &Vector3<f64>,
    point_index: usize,
    n_samples: usize,
    seed: u64,
) -> Result<CausticReport> {
    if point_index >= model.reflection.len() {
        return Err(Error::InvalidInput(format!(
            "reflection point {point_index} out of range ({} points)",
            model.reflection.len()
        )));
    }
    if n_samples == 0 {
        return Err(Error::InvalidInput("need at least one camera sample".into()));
    }
    let base = model.reflection.points[point_index].position;
    let b = model.warp.camera_box;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut eyes = Vec::new();
    let mut analytic = Vec::new();
    let mut warped = Vec::new();
    let mut residuals = Vec::new();
    for _ in 0..20 * n_samples {
        if eyes.len() == n_samples {
            break;
        }
        let eye = Vector3::new(
            rng.gen_range(b.min.x..=b.max.x),
            rng.gen_range(b.min.y..=b.max.y),
            rng.gen_range(b.min.z..=b.max.z),
        );
        // cap edges and grazing geometry legitimately have no visible
        // reflection; those draws are discarded
        let Ok(v) = virtual_point_on_catacaustic(reflector, source, &eye) else {
            continue;
        };
        let (w, _) = model.warp.warp(&[base], &eye)?;
        let sight = (v - eye)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::Numerical("virtual point coincides with the eye".into()))?;
        let off = w[0] - eye;
        residuals.push((off - off.dot(&sight) * sight).norm());
        eyes.push(eye);
        analytic.push(v);
        warped.push(w[0]);
    }
    if eyes.is_empty() {
        return Err(Error::Numerical(
            "no camera sample sees a reflection of the source".into(),
        ));
    }
    let chamfer = chamfer_distance(&analytic, &warped);
    let mut sorted = residuals.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median_residual = sorted[sorted.len() / 2];
    Ok(CausticReport { eyes, analytic, warped, chamfer, ray_residuals: residuals, median_residual })
}

/// Symmetric mean nearest-neighbour distance.
fn chamfer_distance(a: &[Vector3<f64>], b: &[Vector3<f64>]) -> f64 {
    let one_way = |xs: &[Vector3<f64>], ys: &[Vector3<f64>]| -> f64 {
        xs.iter()
            .map(|x| ys.iter().map(|y| (x - y).norm()).fold(f64::INFINITY, f64::min))
            .sum::<f64>()
            / xs.len() as f64
    };
    one_way(a, b) + one_way(b, a)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::{EnvironmentMap, NeuralRenderer, WarpField};
    use crate::raster::{PointCloud, SplatPoint, FEATURE_DIM};
    use nalgebra::Matrix3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn test_camera() -> Camera {
        Camera::new(
            Vector3::new(0.0, 0.0, -3.0),
            Matrix3::identity(),
            12.0,
            12.0,
            6.0,
            6.0,
            12,
            12,
        )
        .unwrap()
    }

    fn random_point(rng: &mut ChaCha8Rng, depth: f64, rho: Option<f64>) -> SplatPoint {
        let pos = Vector3::new(rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5), depth);
        let normal =
            Vector3::new(rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3), -1.0).normalize();
        let mut features = [0.0; FEATURE_DIM];
        for f in features.iter_mut() {
            *f = rng.gen_range(-0.8..0.8);
        }
        SplatPoint::new(
            pos,
            normal,
            rng.gen_range(0.1..0.25),
            rng.gen_range(0.35..0.7),
            features,
            rho,
        )
    }

    /// Small model with live heads; `live_warp` randomizes the warp output
    /// layer too, otherwise the warp is the identity.
    fn test_model(rng: &mut ChaCha8Rng, live_warp: bool) -> ModelState {
        let mut primary = PointCloud::default();
        for k in 0..6 {
            let rho = rng.gen_range(0.2..0.8);
            primary.points.push(random_point(rng, 1.3 + 0.2 * k as f64, Some(rho)));
        }
        let mut reflection = PointCloud::default();
        for k in 0..6 {
            reflection.points.push(random_point(rng, 1.45 + 0.2 * k as f64, None));
        }
        let point_box = Aabb::new(Vector3::new(-1.0, -1.0, 0.5), Vector3::new(1.0, 1.0, 3.0));
        let camera_box = Aabb::new(Vector3::new(-1.0, -1.0, -4.0), Vector3::new(1.0, 1.0, -2.0));
        let mut warp = WarpField::new(point_box, camera_box, rng);
        if live_warp {
            let last = warp.mlp.layers.last_mut().unwrap();
            for v in last.w.iter_mut() {
                *v = rng.gen_range(-0.5..0.5);
            }
        }
        let renderer = NeuralRenderer::new(rng);
        let mut envmap = EnvironmentMap::new(8, 4, FEATURE_DIM);
        for v in envmap.texels.iter_mut() {
            *v = rng.gen_range(-0.5..0.5);
        }
        ModelState { primary, reflection, clone_offsets: Vec::new(), warp, renderer, envmap }
    }

    fn shifted_camera(d: Vector3<f64>) -> Camera {
        let mut cam = test_camera();
        cam.position += d;
        cam
    }

    #[test]
    fn identity_decoupling_is_a_bitwise_noop() {
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let model = test_model(&mut rng, true);
        let cams = vec![test_camera(), shifted_camera(Vector3::new(0.4, 0.1, 0.0))];
        let positions: Vec<_> = cams.iter().map(|c| c.position).collect();
        let plain = render_path(&model, &cams, None).unwrap();
        let decoupled = render_path(&model, &cams, Some(&positions)).unwrap();
        assert_eq!(plain, decoupled);
    }

    #[test]
    fn repeated_frames_render_identically() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let model = test_model(&mut rng, true);
        let cams = vec![test_camera(), test_camera()];
        let frames = render_path(&model, &cams, None).unwrap();
        assert_eq!(frames[0], frames[1]);
    }

    #[test]
    fn warp_override_changes_reflections_only_through_the_warp() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let model = test_model(&mut rng, true);
        let cams = vec![test_camera()];
        let plain = render_path(&model, &cams, None).unwrap();
        let moved = render_path(&model, &cams, Some(&[Vector3::new(0.8, 0.6, -2.2)])).unwrap();
        assert_ne!(plain, moved, "a live warp must react to the override");
    }

    #[test]
    fn zero_warp_tracks_reproject_the_static_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let model = test_model(&mut rng, false);
        let cams = vec![test_camera(), shifted_camera(Vector3::new(0.5, -0.2, 0.3))];
        let indices = [0usize, 2, 4];
        let tracks = correspond(&model, &indices, &cams).unwrap();
        assert_eq!(tracks.len(), indices.len());
        for (k, &i) in indices.iter().enumerate() {
            assert_eq!(tracks[k].len(), cams.len());
            for (j, cam) in cams.iter().enumerate() {
                let (expect, depth) = project(cam, &model.reflection.points[i].position).unwrap();
                let got = tracks[k][j];
                assert!((got.pixel.unwrap() - expect).norm() < 1e-12);
                assert!((got.depth - depth).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn occluded_points_are_flagged() {
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        let mut model = test_model(&mut rng, false);
        // a reflection point far behind the primary splats, on the axis
        model.reflection.points[0].position = Vector3::new(0.0, 0.0, 40.0);
        // and one well in front of them
        model.reflection.points[1].position = Vector3::new(0.0, 0.0, 0.2);
        let cams = vec![test_camera()];
        let tracks = correspond(&model, &[0, 1], &cams).unwrap();
        assert!(!tracks[0][0].visible, "point behind the splat wall should be occluded");
        assert!(tracks[1][0].visible, "point in front should be visible");
    }

    #[test]
    fn correspond_rejects_out_of_range_indices() {
        let mut rng = ChaCha8Rng::seed_from_u64(45);
        let model = test_model(&mut rng, false);
        let err = correspond(&model, &[99], &[test_camera()]).unwrap_err();
        assert!(matches!(err, Error::InvalidInput(_)));
    }

    #[test]
    fn clone_zero_translation_leaves_renders_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(46);
        let model = test_model(&mut rng, true);
        let sel = Aabb::new(Vector3::new(-1.0, -1.0, 0.0), Vector3::new(1.0, 1.0, 3.0));
        let cloned = clone_region(&model, &sel, &Vector3::zeros()).unwrap();
        assert_eq!(cloned.primary.points.len(), model.primary.points.len());
        assert!(cloned.clone_offsets.is_empty());
        let cam = test_camera();
        let a = render_view(&model, &cam, &RenderOptions::default()).unwrap();
        let b = render_view(&cloned, &cam, &RenderOptions::default()).unwrap();
        assert_eq!(a.rgb, b.rgb);
    }

    #[test]
    fn clone_duplicates_the_selection_and_tags_the_offset() {
        let mut rng = ChaCha8Rng::seed_from_u64(47);
        let model = test_model(&mut rng, true);
        let n = model.primary.points.len();
        // split the cloud by depth: the selection covers the near half
        let sel = Aabb::new(Vector3::new(-1.0, -1.0, 0.0), Vector3::new(1.0, 1.0, 1.7));
        let inside: Vec<usize> = (0..n)
            .filter(|&i| sel.contains(&model.primary.points[i].position))
            .collect();
        assert!(!inside.is_empty() && inside.len() < n);
        let t = Vector3::new(0.6, 0.0, 0.1);
        let cloned = clone_region(&model, &sel, &t).unwrap();
        assert_eq!(cloned.primary.points.len(), n + inside.len());
        assert_eq!(cloned.clone_offsets, vec![t]);
        // originals untouched, copies shifted
        for i in 0..n {
            assert_eq!(cloned.primary.points[i], model.primary.points[i]);
        }
        for (k, &i) in inside.iter().enumerate() {
            let copy = &cloned.primary.points[n + k];
            assert_eq!(copy.position, model.primary.points[i].position + t);
            assert_eq!(copy.features, model.primary.points[i].features);
        }
    }

    #[test]
    fn clone_of_an_empty_selection_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(48);
        let model = test_model(&mut rng, true);
        let sel = Aabb::new(Vector3::new(50.0, 50.0, 50.0), Vector3::new(51.0, 51.0, 51.0));
        let err = clone_region(&model, &sel, &Vector3::new(1.0, 0.0, 0.0)).unwrap_err();
        assert!(matches!(err, Error::InvalidInput(_)));
    }

    #[test]
    fn cyclopean_stereo_feeds_both_eyes_one_warp_camera() {
        let mut rng = ChaCha8Rng::seed_from_u64(49);
        let model = test_model(&mut rng, true);
        let cam = test_camera();
        let pairs = stereo_render(&model, &[cam.clone()], 0.4, 0.0).unwrap();
        let right_axis = cam.rotation.row(0).transpose();
        for sign in [-1.0, 1.0] {
            let mut eye_cam = cam.clone();
            eye_cam.position += 0.2 * sign * right_axis;
            let opts = RenderOptions {
                warp_camera: Some(cam.position),
                ..RenderOptions::default()
            };
            let expect = render_view(&model, &eye_cam, &opts).unwrap();
            let got = if sign < 0.0 { &pairs[0].left } else { &pairs[0].right };
            assert_eq!(got, &expect.rgb);
            // both eyes warp from the cyclopean camera, so the warped
            // reflection cloud is the same world-space set
            let again = render_view(&model, &eye_cam, &opts).unwrap();
            assert_eq!(expect.warped, again.warped);
        }
    }

    #[test]
    fn full_warp_separation_equals_independent_renders() {
        let mut rng = ChaCha8Rng::seed_from_u64(50);
        let model = test_model(&mut rng, true);
        let cam = test_camera();
        let sep = 0.3;
        let pairs = stereo_render(&model, &[cam.clone()], sep, sep).unwrap();
        let right_axis = cam.rotation.row(0).transpose();
        let mut eye_cams = Vec::new();
        for sign in [-1.0, 1.0] {
            let mut c = cam.clone();
            c.position += 0.5 * sep * sign * right_axis;
            eye_cams.push(c);
        }
        let frames = render_path(&model, &eye_cams, None).unwrap();
        assert_eq!(pairs[0].left, frames[0]);
        assert_eq!(pairs[0].right, frames[1]);
    }

    #[test]
    fn caustic_report_collapses_to_the_static_point_under_zero_warp() {
        let mut rng = ChaCha8Rng::seed_from_u64(51);
        let model = test_model(&mut rng, false);
        let reflector = Reflector::Sphere { center: Vector3::new(0.0, 0.0, 0.0), radius: 0.45 };
        let source = Vector3::new(0.6, 0.4, -1.2);
        let report = compare_catacaustic(&model, &reflector, &source, 1, 24, 9).unwrap();
        assert_eq!(report.eyes.len(), 24);
        let base = model.reflection.points[1].position;
        for w in &report.warped {
            assert_eq!(*w, base);
        }
        assert!(report.chamfer.is_finite());
        assert!(report.median_residual.is_finite());
    }

    #[test]
    fn caustic_report_regenerates_bit_identically() {
        let mut rng = ChaCha8Rng::seed_from_u64(52);
        let model = test_model(&mut rng, true);
        let reflector = Reflector::Sphere { center: Vector3::new(0.0, 0.0, 0.0), radius: 0.45 };
        let source = Vector3::new(0.6, 0.4, -1.2);
        let a = compare_catacaustic(&model, &reflector, &source, 0, 16, 3).unwrap();
        let b = compare_catacaustic(&model, &reflector, &source, 0, 16, 3).unwrap();
        assert_eq!(a, b);
    }
}
