//! End-to-end differentiable render path.
//!
//! One view goes through four stages: the reflection cloud is displaced by
//! the camera-conditioned warp field, both clouds are rasterized, the
//! environment map is blended behind the reflection pass, and the neural
//! renderer decodes the feature images to RGB. `render_view` keeps every
//! intermediate needed for the exact backward in `render_backward`.

use nalgebra::Vector3;

use crate::error::Result;
use crate::geometry::Camera;
use crate::img::FeatureImage;
use crate::neural::{
    shade, shade_backward, EnvironmentMap, EnvironmentMapGrads, MlpGrads, NeuralRenderer,
    ShadeCache, ShadeInputs, WarpCache, WarpField,
};
use crate::raster::{
    blend_environment, blend_environment_backward, camera_facing_normal, rasterize,
    rasterize_backward, PointCloud, RasterCotangents, RasterGrads, RasterOptions, RasterOutput,
    RasterRegion,
};

/// Everything the method optimizes, in one place.
#[derive(Clone, Debug)]
pub struct ModelState {
    /// Diffuse scene splats; these carry the reflectiveness channel rho.
    pub primary: PointCloud,
    /// Reflection splats. Positions stored here are warp-field inputs and
    /// are never rasterized directly; normals are reassigned per view.
    pub reflection: PointCloud,
    /// Reflector clones: each offset `t` renders the reflection cloud once
    /// more, warped as seen from `camera - t` and translated by `t`.
    pub clone_offsets: Vec<Vector3<f64>>,
    pub warp: WarpField,
    pub renderer: NeuralRenderer,
    pub envmap: EnvironmentMap,
}

#[derive(Clone, Debug, Default)]
pub struct RenderOptions {
    /// Restrict all passes to a pixel window (training patches).
    pub region: Option<RasterRegion>,
    /// Rasterize only these primary points (warm-up subsets).
    pub primary_subset: Option<Vec<usize>>,
    /// Warp and rasterize only these reflection points.
    pub reflection_subset: Option<Vec<usize>>,
    /// Camera position fed to the warp field. Defaults to the raster
    /// camera; novel-view manipulations decouple the two.
    pub warp_camera: Option<Vector3<f64>>,
}

/// One warped instance of the reflection cloud.
struct Segment {
    cache: WarpCache,
    /// Row in `ForwardBundle::warped` for each warped point.
    rows: Vec<usize>,
}

/// Forward pass outputs plus the caches the backward pass consumes.
pub struct ForwardBundle {
    pub rgb: FeatureImage,
    pub primary: RasterOutput,
    pub reflection: RasterOutput,
    /// Reflection features after environment blending.
    pub blended: FeatureImage,
    /// Unit world ray direction per pixel.
    pub view_dirs: FeatureImage,
    /// Reflection cloud as rasterized: warped, clone instances appended.
    pub warped: PointCloud,
    segments: Vec<Segment>,
    active: Option<Vec<usize>>,
    shade_cache: ShadeCache,
}

/// Gradient of a scalar loss with respect to every trainable parameter.
pub struct PipelineGrads {
    pub primary: RasterGrads,
    /// Indexed like `ForwardBundle::warped`; position rows have already
    /// been folded into `warp`.
    pub reflection: RasterGrads,
    pub warp: MlpGrads,
    pub renderer: crate::neural::RendererGrads,
    pub envmap: EnvironmentMapGrads,
}

/// Loss cotangents entering the backward pass.
#[derive(Clone, Copy)]
pub struct PipelineCotangents<'a> {
    /// dL / d rgb over the rendered region.
    pub d_rgb: &'a FeatureImage,
    /// dL / d reflection-pass transmittance (volume loss), if any.
    pub d_transmittance: Option<&'a FeatureImage>,
    /// dL / d composited rho beyond the shading path (mask losses), if any.
    pub d_rho: Option<&'a FeatureImage>,
}

impl ModelState {
    /// Reflection point count of one instance.
    pub fn reflection_len(&self) -> usize {
        self.reflection.len()
    }
}

pub fn render_view(
    model: &ModelState,
    camera: &Camera,
    opts: &RenderOptions,
) -> Result<ForwardBundle> {
    let n = model.reflection.len();
    let indices: Vec<usize> = match &opts.reflection_subset {
        Some(s) => s.clone(),
        None => (0..n).collect(),
    };
    let warp_cam = opts.warp_camera.unwrap_or(camera.position);

    let bases: Vec<Vector3<f64>> =
        indices.iter().map(|&i| model.reflection.points[i].position).collect();

    let mut warped = model.reflection.clone();
    let mut segments = Vec::new();
    let mut active: Vec<usize> = Vec::with_capacity(indices.len());

    let (pos, cache) = model.warp.warp(&bases, &warp_cam)?;
    for ((&i, p), b) in indices.iter().zip(&pos).zip(&bases) {
        warped.points[i].position = *p;
        warped.points[i].normal = camera_facing_normal(camera, b);
    }
    segments.push(Segment { cache, rows: indices.clone() });
    active.extend(indices.iter().copied());

    for t in &model.clone_offsets {
        let (pos, cache) = model.warp.warp(&bases, &(warp_cam - t))?;
        let mut rows = Vec::with_capacity(indices.len());
        for ((&i, p), b) in indices.iter().zip(&pos).zip(&bases) {
            let mut pt = model.reflection.points[i].clone();
            pt.position = p + t;
            pt.normal = camera_facing_normal(camera, &(b + t));
            rows.push(warped.points.len());
            warped.points.push(pt);
        }
        active.extend(rows.iter().copied());
        segments.push(Segment { cache, rows });
    }

    let restrict = opts.reflection_subset.is_some() || !model.clone_offsets.is_empty();
    let active = restrict.then_some(active);

    let refl_opts = RasterOptions {
        with_rho: false,
        region: opts.region,
        subset: active.as_deref(),
    };
    let reflection = rasterize(&warped, camera, &refl_opts);

    let prim_opts = RasterOptions {
        with_rho: true,
        region: opts.region,
        subset: opts.primary_subset.as_deref(),
    };
    let primary = rasterize(&model.primary, camera, &prim_opts);

    let blended = blend_environment(&reflection, &model.envmap, camera);

    let region = primary.region;
    let mut view_dirs = FeatureImage::new(region.width, region.height, 3);
    for y in 0..region.height {
        for x in 0..region.width {
            let ray = camera
                .pixel_ray((region.x0 + x) as f64 + 0.5, (region.y0 + y) as f64 + 0.5);
            for c in 0..3 {
                view_dirs.set(x, y, c, ray.direction[c]);
            }
        }
    }

    let rho = primary.rho.clone().expect("primary pass composites rho");
    let inputs = ShadeInputs {
        primary: &primary.features,
        rho: &rho,
        reflection: &blended,
        view_dirs: &view_dirs,
    };
    let (rgb, shade_cache) = shade(&model.renderer, &inputs)?;

    Ok(ForwardBundle {
        rgb,
        primary,
        reflection,
        blended,
        view_dirs,
        warped,
        segments,
        active,
        shade_cache,
    })
}

pub fn render_backward(
    model: &ModelState,
    camera: &Camera,
    opts: &RenderOptions,
    bundle: &ForwardBundle,
    cot: &PipelineCotangents,
) -> PipelineGrads {
    let region = bundle.primary.region;
    let sg = shade_backward(&model.renderer, &bundle.shade_cache, cot.d_rgb);

    let mut d_rho = sg.d_rho;
    if let Some(extra) = cot.d_rho {
        for (a, b) in d_rho.data.iter_mut().zip(&extra.data) {
            *a += b;
        }
    }

    let mut envmap = EnvironmentMapGrads::zeros_like(&model.envmap);
    let mut d_trans = blend_environment_backward(
        &bundle.reflection,
        &model.envmap,
        camera,
        &sg.d_reflection,
        &mut envmap,
    );
    if let Some(extra) = cot.d_transmittance {
        for (a, b) in d_trans.data.iter_mut().zip(&extra.data) {
            *a += b;
        }
    }

    let refl_opts = RasterOptions {
        with_rho: false,
        region: opts.region,
        subset: bundle.active.as_deref(),
    };
    let refl_cot = RasterCotangents {
        d_features: &sg.d_reflection,
        d_rho: None,
        d_transmittance: &d_trans,
    };
    let reflection =
        rasterize_backward(&bundle.warped, camera, &refl_opts, &bundle.reflection, &refl_cot);

    let mut warp = MlpGrads::zeros_like(&model.warp.mlp);
    for seg in &bundle.segments {
        let d_warped: Vec<Vector3<f64>> =
            seg.rows.iter().map(|&r| reflection.d_position[r]).collect();
        warp.accumulate(&model.warp.warp_backward(&seg.cache, &d_warped));
    }

    let zero_trans = FeatureImage::new(region.width, region.height, 1);
    let prim_opts = RasterOptions {
        with_rho: true,
        region: opts.region,
        subset: opts.primary_subset.as_deref(),
    };
    let prim_cot = RasterCotangents {
        d_features: &sg.d_primary,
        d_rho: Some(&d_rho),
        d_transmittance: &zero_trans,
    };
    let primary =
        rasterize_backward(&model.primary, camera, &prim_opts, &bundle.primary, &prim_cot);

    PipelineGrads { primary, reflection, warp, renderer: sg.params, envmap }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Aabb;
    use crate::raster::{sigmoid, SplatPoint, FEATURE_DIM};
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
        let mut normal =
            Vector3::new(rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3), -1.0).normalize();
        if rng.gen_bool(0.5) {
            normal = -normal;
        }
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

    /// Small but fully live model: every head gets a nonzero final layer so
    /// gradients reach hidden weights too.
    fn test_model(rng: &mut ChaCha8Rng) -> ModelState {
        let mut primary = PointCloud::default();
        for k in 0..5 {
            let rho = rng.gen_range(0.2..0.8);
            primary.points.push(random_point(rng, 1.3 + 0.25 * k as f64, Some(rho)));
        }
        let mut reflection = PointCloud::default();
        for k in 0..5 {
            reflection.points.push(random_point(rng, 1.45 + 0.25 * k as f64, None));
        }

        let point_box = Aabb::new(Vector3::new(-1.0, -1.0, 0.5), Vector3::new(1.0, 1.0, 3.0));
        let camera_box = Aabb::new(Vector3::new(-1.0, -1.0, -4.0), Vector3::new(1.0, 1.0, -2.0));
        let mut warp = WarpField::new(point_box, camera_box, rng);
        let mut renderer = NeuralRenderer::new(rng);
        for mlp in [
            &mut warp.mlp,
            &mut renderer.head_primary,
            &mut renderer.head_reflection,
            &mut renderer.decoder,
        ] {
            let last = mlp.layers.last_mut().unwrap();
            for v in last.w.iter_mut() {
                *v = rng.gen_range(-0.2..0.2);
            }
            for v in last.b.iter_mut() {
                *v = rng.gen_range(-0.1..0.1);
            }
        }

        let mut envmap = EnvironmentMap::new(8, 4, FEATURE_DIM);
        for v in envmap.texels.iter_mut() {
            *v = rng.gen_range(-0.5..0.5);
        }

        ModelState {
            primary,
            reflection,
            clone_offsets: Vec::new(),
            warp,
            renderer,
            envmap,
        }
    }

    fn probe_image(w: usize, h: usize, ch: usize, seed: u64) -> FeatureImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FeatureImage::from_fn(w, h, ch, |_, _, _| rng.gen_range(-1.0..1.0))
    }

    /// Scalar probe loss over every pipeline output the trainer touches.
    fn probe_loss(model: &ModelState, camera: &Camera, opts: &RenderOptions) -> f64 {
        let b = render_view(model, camera, opts).unwrap();
        let w = b.rgb.width;
        let h = b.rgb.height;
        let p_rgb = probe_image(w, h, 3, 11);
        let p_trans = probe_image(w, h, 1, 12);
        let p_rho = probe_image(w, h, 1, 13);
        let rho = b.primary.rho.as_ref().unwrap();
        let mut loss = 0.0;
        for (a, g) in b.rgb.data.iter().zip(&p_rgb.data) {
            loss += a * g;
        }
        for (a, g) in b.reflection.transmittance.data.iter().zip(&p_trans.data) {
            loss += a * g;
        }
        for (a, g) in rho.data.iter().zip(&p_rho.data) {
            loss += a * g;
        }
        loss
    }

    fn probe_grads(model: &ModelState, camera: &Camera, opts: &RenderOptions) -> PipelineGrads {
        let b = render_view(model, camera, opts).unwrap();
        let w = b.rgb.width;
        let h = b.rgb.height;
        let p_rgb = probe_image(w, h, 3, 11);
        let p_trans = probe_image(w, h, 1, 12);
        let p_rho = probe_image(w, h, 1, 13);
        let cot = PipelineCotangents {
            d_rgb: &p_rgb,
            d_transmittance: Some(&p_trans),
            d_rho: Some(&p_rho),
        };
        render_backward(model, camera, opts, &b, &cot)
    }

    fn assert_close(analytic: f64, fd: f64, label: &str) {
        let denom = analytic.abs().max(fd.abs()).max(1e-3);
        assert!(
            (analytic - fd).abs() / denom < 1e-4,
            "{label}: analytic {analytic} vs fd {fd}"
        );
    }

    fn central_diff(
        model: &mut ModelState,
        camera: &Camera,
        opts: &RenderOptions,
        h: f64,
        set: impl Fn(&mut ModelState, f64),
        base: f64,
    ) -> f64 {
        set(model, base + h);
        let hi = probe_loss(model, camera, opts);
        set(model, base - h);
        let lo = probe_loss(model, camera, opts);
        set(model, base);
        (hi - lo) / (2.0 * h)
    }

    #[test]
    fn full_graph_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let camera = test_camera();
        let mut model = test_model(&mut rng);
        let opts = RenderOptions::default();
        let grads = probe_grads(&model, &camera, &opts);
        let mut checked = 0usize;

        // primary splat attributes, chained through the squashes
        for pi in [0usize, 2, 4] {
            let pt = model.primary.points[pi].clone();
            for k in 0..3 {
                let an = grads.primary.d_position[pi][k];
                let fd = central_diff(
                    &mut model,
                    &camera,
                    &opts,
                    1e-6,
                    |m, v| m.primary.points[pi].position[k] = v,
                    pt.position[k],
                );
                assert_close(an, fd, &format!("primary {pi} position {k}"));
                checked += 1;
            }
            let an = grads.primary.d_footprint[pi] * sigmoid(pt.raw_footprint);
            let fd = central_diff(
                &mut model,
                &camera,
                &opts,
                1e-6,
                |m, v| m.primary.points[pi].raw_footprint = v,
                pt.raw_footprint,
            );
            assert_close(an, fd, &format!("primary {pi} raw footprint"));
            checked += 1;

            let o = sigmoid(pt.raw_opacity);
            let an = grads.primary.d_opacity[pi] * o * (1.0 - o);
            let fd = central_diff(
                &mut model,
                &camera,
                &opts,
                1e-6,
                |m, v| m.primary.points[pi].raw_opacity = v,
                pt.raw_opacity,
            );
            assert_close(an, fd, &format!("primary {pi} raw opacity"));
            checked += 1;

            let an = grads.primary.d_features[pi][1];
            let fd = central_diff(
                &mut model,
                &camera,
                &opts,
                1e-6,
                |m, v| m.primary.points[pi].features[1] = v,
                pt.features[1],
            );
            assert_close(an, fd, &format!("primary {pi} feature 1"));
            checked += 1;

            let raw_rho = pt.raw_rho.unwrap();
            let r = sigmoid(raw_rho);
            let an = grads.primary.d_rho[pi] * r * (1.0 - r);
            let fd = central_diff(
                &mut model,
                &camera,
                &opts,
                1e-6,
                |m, v| m.primary.points[pi].raw_rho = Some(v),
                raw_rho,
            );
            assert_close(an, fd, &format!("primary {pi} raw rho"));
            checked += 1;
        }

        // reflection splat attributes
        for ri in [1usize, 3] {
            let pt = model.reflection.points[ri].clone();
            let o = sigmoid(pt.raw_opacity);
            let an = grads.reflection.d_opacity[ri] * o * (1.0 - o);
            let fd = central_diff(
                &mut model,
                &camera,
                &opts,
                1e-6,
                |m, v| m.reflection.points[ri].raw_opacity = v,
                pt.raw_opacity,
            );
            assert_close(an, fd, &format!("reflection {ri} raw opacity"));
            checked += 1;

            let an = grads.reflection.d_features[ri][4];
            let fd = central_diff(
                &mut model,
                &camera,
                &opts,
                1e-6,
                |m, v| m.reflection.points[ri].features[4] = v,
                pt.features[4],
            );
            assert_close(an, fd, &format!("reflection {ri} feature 4"));
            checked += 1;
        }

        // warp network, including a hidden layer
        for (l, r, c) in [(3usize, 5usize, 0usize), (3, 17, 2), (1, 40, 33), (0, 2, 100)] {
            let base = model.warp.mlp.layers[l].w[(r, c)];
            let an = grads.warp.d_w[l][(r, c)];
            let fd = central_diff(
                &mut model,
                &camera,
                &opts,
                1e-5,
                |m, v| m.warp.mlp.layers[l].w[(r, c)] = v,
                base,
            );
            assert_close(an, fd, &format!("warp w[{l}][{r},{c}]"));
            checked += 1;
        }

        // renderer heads and decoder
        {
            let base = model.renderer.head_primary.layers[0].w[(4, 7)];
            let an = grads.renderer.head_primary.d_w[0][(4, 7)];
            let fd = central_diff(
                &mut model,
                &camera,
                &opts,
                1e-5,
                |m, v| m.renderer.head_primary.layers[0].w[(4, 7)] = v,
                base,
            );
            assert_close(an, fd, "head_primary w[0][4,7]");
            checked += 1;
        }
        {
            let base = model.renderer.head_reflection.layers[2].w[(10, 3)];
            let an = grads.renderer.head_reflection.d_w[2][(10, 3)];
            let fd = central_diff(
                &mut model,
                &camera,
                &opts,
                1e-5,
                |m, v| m.renderer.head_reflection.layers[2].w[(10, 3)] = v,
                base,
            );
            assert_close(an, fd, "head_reflection w[2][10,3]");
            checked += 1;
        }
        {
            let n_dec = model.renderer.decoder.layers.len();
            let base = model.renderer.decoder.layers[n_dec - 1].w[(20, 1)];
            let an = grads.renderer.decoder.d_w[n_dec - 1][(20, 1)];
            let fd = central_diff(
                &mut model,
                &camera,
                &opts,
                1e-5,
                |m, v| m.renderer.decoder.layers[n_dec - 1].w[(20, 1)] = v,
                base,
            );
            assert_close(an, fd, "decoder final w[20,1]");
            checked += 1;
        }
        {
            let base = model.renderer.decoder.layers[0].b[12];
            let an = grads.renderer.decoder.d_b[0][12];
            let fd = central_diff(
                &mut model,
                &camera,
                &opts,
                1e-5,
                |m, v| m.renderer.decoder.layers[0].b[12] = v,
                base,
            );
            assert_close(an, fd, "decoder b[0][12]");
            checked += 1;
        }

        // environment texels actually touched by the view
        let touched: Vec<usize> = grads
            .envmap
            .d_texels
            .iter()
            .enumerate()
            .filter(|(_, g)| g.abs() > 1e-9)
            .map(|(i, _)| i)
            .collect();
        assert!(touched.len() >= 2, "view should touch several env texels");
        for &ti in touched.iter().take(3) {
            let base = model.envmap.texels[ti];
            let an = grads.envmap.d_texels[ti];
            let fd = central_diff(
                &mut model,
                &camera,
                &opts,
                1e-5,
                |m, v| m.envmap.texels[ti] = v,
                base,
            );
            assert_close(an, fd, &format!("env texel {ti}"));
            checked += 1;
        }

        assert!(checked >= 20, "spot-checked {checked} parameters");
    }

    #[test]
    fn warp_camera_defaults_to_raster_camera() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let camera = test_camera();
        let model = test_model(&mut rng);
        let a = render_view(&model, &camera, &RenderOptions::default()).unwrap();
        let b = render_view(
            &model,
            &camera,
            &RenderOptions { warp_camera: Some(camera.position), ..Default::default() },
        )
        .unwrap();
        assert_eq!(a.rgb.data, b.rgb.data);

        let c = render_view(
            &model,
            &camera,
            &RenderOptions {
                warp_camera: Some(camera.position + Vector3::new(0.8, 0.0, 0.0)),
                ..Default::default()
            },
        )
        .unwrap();
        assert_ne!(a.rgb.data, c.rgb.data, "moving the warp camera must change the view");
    }

    #[test]
    fn rendering_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let camera = test_camera();
        let model = test_model(&mut rng);
        let opts = RenderOptions::default();
        let a = render_view(&model, &camera, &opts).unwrap();
        let b = render_view(&model, &camera, &opts).unwrap();
        assert_eq!(a.rgb.data, b.rgb.data);

        let ga = probe_grads(&model, &camera, &opts);
        let gb = probe_grads(&model, &camera, &opts);
        assert_eq!(ga.primary.d_position, gb.primary.d_position);
        assert_eq!(ga.warp.d_w[0].as_slice(), gb.warp.d_w[0].as_slice());
        assert_eq!(ga.envmap.d_texels, gb.envmap.d_texels);
    }

    #[test]
    fn zero_warp_weights_give_static_reflection_shell() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let camera = test_camera();
        let mut model = test_model(&mut rng);
        for l in &mut model.warp.mlp.layers {
            l.w.fill(0.0);
            l.b.fill(0.0);
        }
        let bundle = render_view(&model, &camera, &RenderOptions::default()).unwrap();
        for (w, b) in bundle.warped.points.iter().zip(&model.reflection.points) {
            assert_eq!(w.position, b.position);
        }

        // with no camera dependence the warp camera cannot matter
        let other = render_view(
            &model,
            &camera,
            &RenderOptions {
                warp_camera: Some(camera.position + Vector3::new(1.0, 0.5, 0.0)),
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(bundle.rgb.data, other.rgb.data);
    }

    #[test]
    fn clone_instances_append_translated_copies() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let camera = test_camera();
        let mut model = test_model(&mut rng);
        for l in &mut model.warp.mlp.layers {
            l.w.fill(0.0);
            l.b.fill(0.0);
        }
        let t = Vector3::new(0.4, 0.1, 0.0);
        model.clone_offsets.push(t);

        let n = model.reflection.len();
        let bundle = render_view(&model, &camera, &RenderOptions::default()).unwrap();
        assert_eq!(bundle.warped.len(), 2 * n);
        for i in 0..n {
            let base = model.reflection.points[i].position;
            assert_eq!(bundle.warped.points[i].position, base);
            assert_eq!(bundle.warped.points[n + i].position, base + t);
        }

        // gradients flow through both instances into one warp field
        let grads = probe_grads(&model, &camera, &RenderOptions::default());
        assert!(grads.warp.d_w.iter().all(|w| w.iter().all(|v| v.is_finite())));
        assert_eq!(grads.reflection.d_position.len(), 2 * n);
    }

    #[test]
    fn subset_restricts_both_passes() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let camera = test_camera();
        let model = test_model(&mut rng);
        let opts = RenderOptions {
            primary_subset: Some(vec![0, 1]),
            reflection_subset: Some(vec![2]),
            ..Default::default()
        };
        let bundle = render_view(&model, &camera, &opts).unwrap();
        for list in &bundle.primary.contributors {
            for &(idx, _) in list {
                assert!(idx <= 1);
            }
        }
        for list in &bundle.reflection.contributors {
            for &(idx, _) in list {
                assert_eq!(idx, 2);
            }
        }
        // backward stays consistent with the forward subset
        let p_rgb = probe_image(bundle.rgb.width, bundle.rgb.height, 3, 20);
        let cot = PipelineCotangents { d_rgb: &p_rgb, d_transmittance: None, d_rho: None };
        let grads = render_backward(&model, &camera, &opts, &bundle, &cot);
        assert_eq!(grads.primary.d_position[2], Vector3::zeros());
        assert_eq!(grads.reflection.d_opacity[0], 0.0);
    }
}
