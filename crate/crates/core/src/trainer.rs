//! Optimization loop: coarse-to-fine warm-up, patch sampling, loss
//! accumulation, grouped Adam updates and gradient-driven densification.
//!
//! Determinism contract: given one config, one dataset and one volume, the
//! loss log is bit-identical across runs, and resuming from a checkpoint
//! reproduces the uninterrupted run exactly. Everything random flows from
//! a single counter-based generator whose position is checkpointed.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use nalgebra::{Vector2, Vector3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Aabb, Camera};
use crate::img::{FeatureImage, MaskImage};
use crate::losses::{
    dssim_loss, l1_loss, mask_loss, mask_tv_loss, reflection_volume_loss, LossReport,
    LossWeights, SSIM_WINDOW,
};
use crate::neural::{
    adam_step, AdamState, EnvironmentMap, Mlp, NeuralRenderer, WarpField,
};
use crate::oracle::scene::Dataset;
use crate::pipeline::{render_backward, render_view, ModelState, PipelineCotangents, RenderOptions};
use crate::raster::{sigmoid, PointCloud, RasterRegion, SplatPoint, FEATURE_DIM};
use crate::volume::{rasterize_volume_mask, sample_surface, ReflectionVolume};

/// Flat training configuration; any field may come from a TOML or JSON file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub iterations: usize,
    /// Square patch edge in pixels.
    pub patch: usize,
    /// Optimizer steps are taken every this many iterations.
    pub accumulation: usize,
    /// Densify every this many iterations once past warm-up.
    pub densify_period: usize,
    /// Fractions of `iterations` spent at quarter and half resolution.
    pub warmup: [f64; 2],
    pub lr_start: f64,
    pub lr_end: f64,
    /// Decoupled weight decay, applied to the warp network only.
    pub weight_decay: f64,
    pub n_reflection_points: usize,
    pub env_width: usize,
    pub env_height: usize,
    pub seed: u64,
    pub weights: LossWeights,
    /// Checkpoint cadence in iterations; 0 disables periodic checkpoints.
    pub checkpoint_every: usize,
    /// Ablation: drop the reflection cloud and freeze warp + environment.
    pub primary_only: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::desk()
    }
}

impl TrainConfig {
    /// Desk-scale profile used throughout the tests.
    pub fn desk() -> Self {
        TrainConfig {
            iterations: 2000,
            patch: 64,
            accumulation: 20,
            densify_period: 2000,
            warmup: [0.05, 0.10],
            lr_start: 1e-3,
            lr_end: 1e-4,
            weight_decay: 1e-4,
            n_reflection_points: 4000,
            env_width: 256,
            env_height: 128,
            seed: 7,
            weights: LossWeights::default(),
            checkpoint_every: 0,
            primary_only: false,
        }
    }

    /// Full-scale profile matching the published training recipe.
    pub fn paper() -> Self {
        TrainConfig {
            iterations: 30_000,
            patch: 150,
            n_reflection_points: 100_000,
            env_width: 1000,
            env_height: 400,
            ..TrainConfig::desk()
        }
    }

    /// Parse from a `.toml` or `.json` file.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: TrainConfig = match path.extension().and_then(|e| e.to_str()) {
            Some("json") => serde_json::from_str(&text)?,
            _ => toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?,
        };
        cfg.validated()
    }

    /// Check ranges and align the periodic events to optimizer boundaries.
    pub fn validated(mut self) -> Result<Self> {
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be positive".into()));
        }
        if self.patch == 0 || self.accumulation == 0 || self.densify_period == 0 {
            return Err(Error::Config("patch, accumulation and densify_period must be positive".into()));
        }
        if !(self.lr_start > 0.0 && self.lr_end > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.warmup.iter().any(|&f| f < 0.0) || self.warmup[0] + self.warmup[1] > 1.0 {
            return Err(Error::Config("warm-up fractions must be nonnegative and sum to at most 1".into()));
        }
        if self.env_width < 2 || self.env_height < 2 {
            return Err(Error::Config("environment map must be at least 2x2".into()));
        }
        let align = |v: usize, q: usize| v.div_ceil(q) * q;
        self.densify_period = align(self.densify_period, self.accumulation);
        if self.checkpoint_every > 0 {
            self.checkpoint_every = align(self.checkpoint_every, self.accumulation);
        }
        Ok(self)
    }
}

/// Learning rate at `iter`: exponential interpolation from start to end.
pub fn lr_at(cfg: &TrainConfig, iter: usize) -> f64 {
    let t = (iter as f64 / cfg.iterations as f64).clamp(0.0, 1.0);
    cfg.lr_start * (cfg.lr_end / cfg.lr_start).powf(t)
}

/// One stage of the coarse-to-fine warm-up.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Phase {
    /// Pyramid level: 0 = quarter, 1 = half, 2 = full resolution.
    pub level: usize,
    /// Image scale of the level.
    pub scale: f64,
    /// Fraction of points rasterized.
    pub points: f64,
    /// Iteration range `[start, end)`.
    pub start: usize,
    pub end: usize,
}

/// Quarter resolution with 1/32 of the points, then half with 1/8, then
/// everything. The first two spans come from `config.warmup`.
pub fn warmup_schedule(cfg: &TrainConfig) -> Vec<Phase> {
    let total = cfg.iterations;
    let e1 = ((total as f64) * cfg.warmup[0]).round() as usize;
    let e2 = (e1 + ((total as f64) * cfg.warmup[1]).round() as usize).min(total);
    let e1 = e1.min(e2);
    vec![
        Phase { level: 0, scale: 0.25, points: 1.0 / 32.0, start: 0, end: e1 },
        Phase { level: 1, scale: 0.5, points: 0.125, start: e1, end: e2 },
        Phase { level: 2, scale: 1.0, points: 1.0, start: e2, end: total },
    ]
}

fn phase_at(schedule: &[Phase], iter: usize) -> Phase {
    for p in schedule {
        if iter >= p.start && iter < p.end {
            return *p;
        }
    }
    *schedule.last().unwrap()
}

/// One pyramid level of a training view.
#[derive(Clone, Debug)]
pub struct LevelData {
    pub camera: Camera,
    pub image: FeatureImage,
    pub mask: MaskImage,
}

/// Quarter / half / full resolution copies of one view, with the
/// reflection-volume mask rasterized at each scale.
#[derive(Clone, Debug)]
pub struct ViewPyramid {
    pub levels: Vec<LevelData>,
}

pub fn build_pyramids(dataset: &Dataset, volume: &ReflectionVolume) -> Result<Vec<ViewPyramid>> {
    if dataset.views.is_empty() {
        return Err(Error::InvalidInput("dataset has no views".into()));
    }
    dataset
        .views
        .iter()
        .map(|view| {
            let half_img = view.image.downsample_half();
            let quarter_img = half_img.downsample_half();
            let half_cam = view.camera.scaled(0.5);
            let quarter_cam = view.camera.scaled(0.25);
            let levels = vec![
                LevelData {
                    mask: rasterize_volume_mask(volume, &quarter_cam),
                    camera: quarter_cam,
                    image: quarter_img,
                },
                LevelData {
                    mask: rasterize_volume_mask(volume, &half_cam),
                    camera: half_cam,
                    image: half_img,
                },
                LevelData {
                    mask: rasterize_volume_mask(volume, &view.camera),
                    camera: view.camera.clone(),
                    image: view.image.clone(),
                },
            ];
            Ok(ViewPyramid { levels })
        })
        .collect()
}

/// Median nearest-neighbor distance over up to 256 probe points.
fn estimate_spacing(points: &[Vector3<f64>], rng: &mut ChaCha8Rng) -> f64 {
    if points.len() < 2 {
        return 0.05;
    }
    let probes = points.len().min(256);
    let mut dists = Vec::with_capacity(probes);
    for _ in 0..probes {
        let i = rng.gen_range(0..points.len());
        let mut best = f64::INFINITY;
        for (j, q) in points.iter().enumerate() {
            if j != i {
                best = best.min((points[i] - q).norm_squared());
            }
        }
        dists.push(best.sqrt());
    }
    dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
    dists[dists.len() / 2].max(1e-6)
}

fn dilated(b: &Aabb, frac: f64) -> Aabb {
    let pad = (b.max - b.min) * frac;
    Aabb::new(b.min - pad, b.max + pad)
}

// flat parameter layouts

const PRIMARY_STRIDE: usize = 9 + FEATURE_DIM; // pos 3, normal 3, raw f, raw o, feats, raw rho
const REFLECTION_STRIDE: usize = 2 + FEATURE_DIM; // raw f, raw o, feats

fn primary_flat(cloud: &PointCloud) -> Vec<f64> {
    let mut out = Vec::with_capacity(cloud.len() * PRIMARY_STRIDE);
    for p in &cloud.points {
        out.extend_from_slice(&[
            p.position.x, p.position.y, p.position.z,
            p.normal.x, p.normal.y, p.normal.z,
            p.raw_footprint, p.raw_opacity,
        ]);
        out.extend_from_slice(&p.features);
        out.push(p.raw_rho.unwrap_or(0.0));
    }
    out
}

fn set_primary_flat(cloud: &mut PointCloud, flat: &[f64], renormalize: bool) {
    assert_eq!(flat.len(), cloud.len() * PRIMARY_STRIDE);
    for (p, row) in cloud.points.iter_mut().zip(flat.chunks_exact(PRIMARY_STRIDE)) {
        p.position = Vector3::new(row[0], row[1], row[2]);
        let mut n = Vector3::new(row[3], row[4], row[5]);
        if renormalize {
            let len = n.norm();
            if len > 1e-12 {
                n /= len;
            }
        }
        p.normal = n;
        p.raw_footprint = row[6];
        p.raw_opacity = row[7];
        p.features.copy_from_slice(&row[8..8 + FEATURE_DIM]);
        p.raw_rho = Some(row[8 + FEATURE_DIM]);
    }
}

fn reflection_flat(cloud: &PointCloud) -> Vec<f64> {
    let mut out = Vec::with_capacity(cloud.len() * REFLECTION_STRIDE);
    for p in &cloud.points {
        out.push(p.raw_footprint);
        out.push(p.raw_opacity);
        out.extend_from_slice(&p.features);
    }
    out
}

fn set_reflection_flat(cloud: &mut PointCloud, flat: &[f64]) {
    assert_eq!(flat.len(), cloud.len() * REFLECTION_STRIDE);
    for (p, row) in cloud.points.iter_mut().zip(flat.chunks_exact(REFLECTION_STRIDE)) {
        p.raw_footprint = row[0];
        p.raw_opacity = row[1];
        p.features.copy_from_slice(&row[2..2 + FEATURE_DIM]);
    }
}

fn renderer_flat(r: &NeuralRenderer) -> Vec<f64> {
    let mut out = vec![0.0; r.num_params()];
    let (a, b) = (r.head_primary.num_params(), r.head_reflection.num_params());
    r.head_primary.copy_params_to(&mut out[..a]);
    r.head_reflection.copy_params_to(&mut out[a..a + b]);
    r.decoder.copy_params_to(&mut out[a + b..]);
    out
}

fn set_renderer_flat(r: &mut NeuralRenderer, flat: &[f64]) {
    let (a, b) = (r.head_primary.num_params(), r.head_reflection.num_params());
    r.head_primary.set_params_from(&flat[..a]);
    r.head_reflection.set_params_from(&flat[a..a + b]);
    r.decoder.set_params_from(&flat[a + b..]);
}

/// Raw-parameter gradient of one primary point row, chaining the effective
/// gradients through the sigmoid and softplus squashes. Geometry entries
/// (position, normal, footprint) are zeroed while locked.
fn primary_grads_flat(
    cloud: &PointCloud,
    g: &crate::raster::RasterGrads,
    geometry: bool,
    out: &mut [f64],
) {
    for (i, p) in cloud.points.iter().enumerate() {
        let row = &mut out[i * PRIMARY_STRIDE..(i + 1) * PRIMARY_STRIDE];
        if geometry {
            for k in 0..3 {
                row[k] += g.d_position[i][k];
                row[3 + k] += g.d_normal[i][k];
            }
            row[6] += g.d_footprint[i] * sigmoid(p.raw_footprint);
        }
        let o = sigmoid(p.raw_opacity);
        row[7] += g.d_opacity[i] * o * (1.0 - o);
        for c in 0..FEATURE_DIM {
            row[8 + c] += g.d_features[i][c];
        }
        if let Some(raw) = p.raw_rho {
            let r = sigmoid(raw);
            row[8 + FEATURE_DIM] += g.d_rho[i] * r * (1.0 - r);
        }
    }
}

fn reflection_grads_flat(
    cloud: &PointCloud,
    g: &crate::raster::RasterGrads,
    geometry: bool,
    out: &mut [f64],
) {
    for (i, p) in cloud.points.iter().enumerate() {
        let row = &mut out[i * REFLECTION_STRIDE..(i + 1) * REFLECTION_STRIDE];
        if geometry {
            row[0] += g.d_footprint[i] * sigmoid(p.raw_footprint);
        }
        let o = sigmoid(p.raw_opacity);
        row[1] += g.d_opacity[i] * o * (1.0 - o);
        for c in 0..FEATURE_DIM {
            row[2 + c] += g.d_features[i][c];
        }
    }
}

#[derive(Clone, Debug)]
struct Optim {
    primary: AdamState,
    reflection: AdamState,
    warp: AdamState,
    renderer: AdamState,
    env: AdamState,
}

#[derive(Clone, Debug)]
struct GradAccum {
    primary: Vec<f64>,
    reflection: Vec<f64>,
    warp: Vec<f64>,
    renderer: Vec<f64>,
    env: Vec<f64>,
    count: usize,
}

impl GradAccum {
    fn new(model: &ModelState) -> Self {
        GradAccum {
            primary: vec![0.0; model.primary.len() * PRIMARY_STRIDE],
            reflection: vec![0.0; model.reflection.len() * REFLECTION_STRIDE],
            warp: vec![0.0; model.warp.mlp.num_params()],
            renderer: vec![0.0; model.renderer.num_params()],
            env: vec![0.0; model.envmap.texels.len()],
            count: 0,
        }
    }

    fn clear(&mut self) {
        for buf in [
            &mut self.primary,
            &mut self.reflection,
            &mut self.warp,
            &mut self.renderer,
            &mut self.env,
        ] {
            buf.fill(0.0);
        }
        self.count = 0;
    }
}

/// Per-point gradient statistics driving densification.
#[derive(Clone, Debug)]
struct DensifyStats {
    /// Accumulated screen-space center gradient norms.
    norm: Vec<f64>,
    /// Accumulated world-space position gradients.
    dir: Vec<Vector3<f64>>,
    count: Vec<u32>,
    spawned_total: usize,
}

impl DensifyStats {
    fn new(n: usize) -> Self {
        DensifyStats {
            norm: vec![0.0; n],
            dir: vec![Vector3::zeros(); n],
            count: vec![0; n],
            spawned_total: 0,
        }
    }

    fn reset(&mut self, n: usize) {
        self.norm = vec![0.0; n];
        self.dir = vec![Vector3::zeros(); n];
        self.count = vec![0; n];
    }
}

/// Per-iteration record; `csv_row` lines make up the loss log.
#[derive(Clone, Copy, Debug)]
pub struct StepReport {
    pub iter: usize,
    pub view: usize,
    pub report: LossReport,
    pub lr: f64,
    /// An optimizer step ran at the end of this iteration.
    pub applied: bool,
    /// The loss was non-finite; the gradient was dropped.
    pub skipped: bool,
    pub points_spawned: usize,
}

impl StepReport {
    pub fn csv_header() -> &'static str {
        "iter,view,l1,dssim,volume,mask,mask_tv,total,lr,spawned"
    }

    pub fn csv_row(&self) -> String {
        let r = &self.report;
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.iter, self.view, r.l1, r.dssim, r.volume, r.mask, r.mask_tv, r.total, self.lr,
            self.points_spawned
        )
    }
}

/// Complete mutable training state; everything here is checkpointed.
pub struct TrainState {
    pub config: TrainConfig,
    pub model: ModelState,
    pub iter: usize,
    pub schedule: Vec<Phase>,
    rng: ChaCha8Rng,
    optim: Optim,
    accum: GradAccum,
    densify: DensifyStats,
    perm_primary: Vec<usize>,
    perm_reflection: Vec<usize>,
}

impl TrainState {
    pub fn new(dataset: &Dataset, volume: &ReflectionVolume, config: TrainConfig) -> Result<TrainState> {
        let config = config.validated()?;
        if dataset.views.is_empty() {
            return Err(Error::InvalidInput("dataset has no views".into()));
        }
        if dataset.points.is_empty() {
            return Err(Error::InvalidInput("dataset has no seed points".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

        let positions: Vec<Vector3<f64>> = dataset.points.iter().map(|p| p.position).collect();
        let spacing = estimate_spacing(&positions, &mut rng);
        let footprint = (0.8 * spacing).powi(2);
        let mut primary = PointCloud::default();
        for p in &dataset.points {
            let n = if p.normal.norm() > 1e-9 { p.normal.normalize() } else { Vector3::z() };
            let mut features = [0.0; FEATURE_DIM];
            features[..3].copy_from_slice(p.color.as_slice());
            primary
                .points
                .push(SplatPoint::new(p.position, n, footprint, 0.5, features, Some(0.5)));
        }

        let n_reflection = if config.primary_only { 0 } else { config.n_reflection_points };
        let rpos = sample_surface(volume, n_reflection, config.seed);
        let rspacing = estimate_spacing(&rpos, &mut rng);
        let mut reflection = PointCloud::default();
        for p in &rpos {
            let mut features = [0.0; FEATURE_DIM];
            for f in features.iter_mut() {
                *f = rng.gen_range(-0.1..0.1);
            }
            reflection.points.push(SplatPoint::new(
                *p,
                Vector3::y(),
                rspacing * rspacing,
                0.3,
                features,
                None,
            ));
        }

        let point_box = dilated(&volume.aabb(), 0.25);
        let camera_box = Aabb::from_points(dataset.views.iter().map(|v| &v.camera.position))
            .map(|b| dilated(&b, 0.1))
            .ok_or_else(|| Error::InvalidInput("dataset has no cameras".into()))?;
        let warp = WarpField::new(point_box, camera_box, &mut rng);
        let renderer = NeuralRenderer::new(&mut rng);
        let envmap = EnvironmentMap::new(config.env_width, config.env_height, FEATURE_DIM);

        let mut perm_primary: Vec<usize> = (0..primary.len()).collect();
        perm_primary.shuffle(&mut rng);
        let mut perm_reflection: Vec<usize> = (0..reflection.len()).collect();
        perm_reflection.shuffle(&mut rng);

        let model = ModelState {
            primary,
            reflection,
            clone_offsets: Vec::new(),
            warp,
            renderer,
            envmap,
        };
        let optim = Optim {
            primary: AdamState::new(model.primary.len() * PRIMARY_STRIDE),
            reflection: AdamState::new(model.reflection.len() * REFLECTION_STRIDE),
            warp: AdamState::new(model.warp.mlp.num_params()),
            renderer: AdamState::new(model.renderer.num_params()),
            env: AdamState::new(model.envmap.texels.len()),
        };
        let accum = GradAccum::new(&model);
        let densify = DensifyStats::new(model.primary.len());
        let schedule = warmup_schedule(&config);

        Ok(TrainState {
            config,
            model,
            iter: 0,
            schedule,
            rng,
            optim,
            accum,
            densify,
            perm_primary,
            perm_reflection,
        })
    }

    fn subset(perm: &[usize], fraction: f64) -> Option<Vec<usize>> {
        if fraction >= 1.0 || perm.is_empty() {
            return None;
        }
        let n = ((perm.len() as f64 * fraction).ceil() as usize).clamp(1, perm.len());
        Some(perm[..n].to_vec())
    }

    /// End of the warm-up in iterations.
    fn warmup_end(&self) -> usize {
        self.schedule.last().unwrap().start
    }

    /// One training iteration: sample a view and patch at the current
    /// phase, render, evaluate the five losses, accumulate the gradient,
    /// and at every accumulation boundary run Adam and maybe densify.
    pub fn train_step(&mut self, data: &[ViewPyramid]) -> Result<StepReport> {
        if self.iter >= self.config.iterations {
            return Err(Error::InvalidInput("training already finished".into()));
        }
        if !self.model.clone_offsets.is_empty() {
            return Err(Error::InvalidInput("cannot train an edited (cloned) model".into()));
        }
        if data.is_empty() {
            return Err(Error::InvalidInput("no training views".into()));
        }

        let phase = phase_at(&self.schedule, self.iter);
        let full = phase.level + 1 == self.schedule.len();

        // fixed draw order: view index, then patch x, then patch y
        let view = self.rng.gen_range(0..data.len());
        let level = &data[view].levels[phase.level];
        let (w, h) = (level.camera.width as usize, level.camera.height as usize);
        let pw = self.config.patch.min(w);
        let ph = self.config.patch.min(h);
        let x0 = if w > pw { self.rng.gen_range(0..=w - pw) } else { 0 };
        let y0 = if h > ph { self.rng.gen_range(0..=h - ph) } else { 0 };
        let region = RasterRegion { x0, y0, width: pw, height: ph };

        let opts = RenderOptions {
            region: Some(region),
            primary_subset: Self::subset(&self.perm_primary, phase.points),
            reflection_subset: Self::subset(&self.perm_reflection, phase.points),
            warp_camera: None,
        };
        let bundle = render_view(&self.model, &level.camera, &opts)?;

        let gt = level.image.crop(x0, y0, pw, ph);
        let mask = level.mask.crop(x0, y0, pw, ph);
        let rho = bundle.primary.rho.clone().expect("primary pass composites rho");

        let (l1, g_l1) = l1_loss(&bundle.rgb, &gt)?;
        let (dssim, g_ds) = if pw >= SSIM_WINDOW && ph >= SSIM_WINDOW {
            dssim_loss(&bundle.rgb, &gt)?
        } else {
            (0.0, FeatureImage::new(pw, ph, bundle.rgb.channels))
        };
        let (volume_l, g_obar) = reflection_volume_loss(&bundle.reflection.transmittance, &mask)?;
        let (mask_l, g_rho_m) = mask_loss(&rho, &mask)?;
        let (tv, g_rho_tv) = mask_tv_loss(&rho);
        let report = LossReport::new(&self.config.weights, l1, dssim, volume_l, mask_l, tv);

        let lw = self.config.weights;
        let mut spawned = 0usize;
        let skipped = !report.is_finite();
        if !skipped {
            let mut d_rgb = g_l1;
            for (a, b) in d_rgb.data.iter_mut().zip(&g_ds.data) {
                *a = lw.l1 * *a + lw.dssim * b;
            }
            let mut d_trans = g_obar;
            for v in d_trans.data.iter_mut() {
                *v *= lw.volume;
            }
            let mut d_rho = g_rho_m;
            for (a, b) in d_rho.data.iter_mut().zip(&g_rho_tv.data) {
                *a = lw.mask * *a + lw.mask_tv * b;
            }
            let cot = PipelineCotangents {
                d_rgb: &d_rgb,
                d_transmittance: Some(&d_trans),
                d_rho: Some(&d_rho),
            };
            let grads = render_backward(&self.model, &level.camera, &opts, &bundle, &cot);

            if full {
                for i in 0..self.model.primary.len() {
                    let c: Vector2<f64> = grads.primary.d_center[i];
                    let n2 = c.norm();
                    if n2 > 0.0 {
                        self.densify.norm[i] += n2;
                        self.densify.dir[i] += grads.primary.d_position[i];
                        self.densify.count[i] += 1;
                    }
                }
            }

            primary_grads_flat(&self.model.primary, &grads.primary, full, &mut self.accum.primary);
            reflection_grads_flat(
                &self.model.reflection,
                &grads.reflection,
                full,
                &mut self.accum.reflection,
            );
            if full && !self.config.primary_only {
                let mut buf = vec![0.0; self.accum.warp.len()];
                grads.warp.copy_to(&mut buf);
                for (a, b) in self.accum.warp.iter_mut().zip(&buf) {
                    *a += b;
                }
            }
            {
                let mut buf = vec![0.0; self.accum.renderer.len()];
                let (na, nb) = (
                    self.model.renderer.head_primary.num_params(),
                    self.model.renderer.head_reflection.num_params(),
                );
                grads.renderer.head_primary.copy_to(&mut buf[..na]);
                grads.renderer.head_reflection.copy_to(&mut buf[na..na + nb]);
                grads.renderer.decoder.copy_to(&mut buf[na + nb..]);
                for (a, b) in self.accum.renderer.iter_mut().zip(&buf) {
                    *a += b;
                }
            }
            if !self.config.primary_only {
                for (a, b) in self.accum.env.iter_mut().zip(&grads.envmap.d_texels) {
                    *a += b;
                }
            }
        }
        self.accum.count += 1;
        self.iter += 1;

        let boundary =
            self.iter % self.config.accumulation == 0 || self.iter == self.config.iterations;
        let lr = lr_at(&self.config, self.iter);
        let mut applied = false;
        if boundary {
            applied = true;
            self.apply_updates(lr, full)?;
            let past_warmup = self.iter > self.warmup_end();
            if full
                && past_warmup
                && self.iter % self.config.densify_period == 0
                && self.iter < self.config.iterations
            {
                spawned = self.densify_points();
            }
        }

        Ok(StepReport {
            iter: self.iter,
            view,
            report,
            lr,
            applied,
            skipped,
            points_spawned: spawned,
        })
    }

    /// Divide the accumulated gradient by the window length and take one
    /// Adam step per parameter group.
    fn apply_updates(&mut self, lr: f64, geometry: bool) -> Result<()> {
        let scale = 1.0 / self.accum.count.max(1) as f64;
        let scaled = |buf: &[f64]| -> Vec<f64> { buf.iter().map(|g| g * scale).collect() };

        let mut primary = primary_flat(&self.model.primary);
        adam_step(&mut self.optim.primary, &mut primary, &scaled(&self.accum.primary), lr, 0.0)?;
        set_primary_flat(&mut self.model.primary, &primary, geometry);

        if !self.model.reflection.is_empty() {
            let mut refl = reflection_flat(&self.model.reflection);
            adam_step(
                &mut self.optim.reflection,
                &mut refl,
                &scaled(&self.accum.reflection),
                lr,
                0.0,
            )?;
            set_reflection_flat(&mut self.model.reflection, &refl);
        }

        if geometry && !self.config.primary_only {
            let mut warp = vec![0.0; self.model.warp.mlp.num_params()];
            self.model.warp.mlp.copy_params_to(&mut warp);
            adam_step(
                &mut self.optim.warp,
                &mut warp,
                &scaled(&self.accum.warp),
                lr,
                self.config.weight_decay,
            )?;
            self.model.warp.mlp.set_params_from(&warp);
        }

        let mut renderer = renderer_flat(&self.model.renderer);
        adam_step(&mut self.optim.renderer, &mut renderer, &scaled(&self.accum.renderer), lr, 0.0)?;
        set_renderer_flat(&mut self.model.renderer, &renderer);

        if !self.config.primary_only {
            let mut env = self.model.envmap.texels.clone();
            adam_step(&mut self.optim.env, &mut env, &scaled(&self.accum.env), lr, 0.0)?;
            self.model.envmap.texels = env;
        }

        self.accum.clear();
        Ok(())
    }

    /// Spawn a copy of every point whose accumulated screen-space gradient
    /// norm exceeds the 90th percentile, displaced along its accumulated
    /// world-space gradient direction by half its footprint radius.
    fn densify_points(&mut self) -> usize {
        let scores: Vec<f64> = (0..self.model.primary.len())
            .filter(|&i| self.densify.count[i] > 0 && self.densify.norm[i].is_finite())
            .map(|i| self.densify.norm[i])
            .collect();
        if scores.len() < 8 {
            self.densify.reset(self.model.primary.len());
            return 0;
        }
        let mut sorted = scores.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let threshold = sorted[((sorted.len() - 1) as f64 * 0.9).ceil() as usize];

        let n = self.model.primary.len();
        let mut spawned = 0usize;
        for i in 0..n {
            if self.densify.count[i] == 0 || !(self.densify.norm[i] > threshold) {
                continue;
            }
            let dir = self.densify.dir[i];
            let len = dir.norm();
            if len < 1e-12 {
                continue;
            }
            let parent = self.model.primary.points[i].clone();
            let delta = 0.5 * parent.footprint().sqrt();
            let mut child = parent;
            child.position += delta * (dir / len);
            self.model.primary.points.push(child);
            spawned += 1;
        }
        if spawned > 0 {
            let added = spawned * PRIMARY_STRIDE;
            self.optim.primary.m.extend(std::iter::repeat(0.0).take(added));
            self.optim.primary.v.extend(std::iter::repeat(0.0).take(added));
            self.accum.primary.extend(std::iter::repeat(0.0).take(added));
            self.perm_primary.extend(n..n + spawned);
        }
        self.densify.spawned_total += spawned;
        self.densify.reset(self.model.primary.len());
        spawned
    }

    pub fn spawned_total(&self) -> usize {
        self.densify.spawned_total
    }

    pub fn finished(&self) -> bool {
        self.iter >= self.config.iterations
    }

    /// Clone the primary points inside `selection` shifted by `t` and tag a
    /// reflector instance (see [`crate::apps::clone_region`]). Optimizer and
    /// accumulator slots for the copies are zero-filled so the edited state
    /// still checkpoints cleanly; it renders but refuses further training.
    pub fn apply_clone(&mut self, selection: &Aabb, t: &Vector3<f64>) -> Result<()> {
        if self.accum.count != 0 {
            return Err(Error::Checkpoint(
                "clone only at accumulation boundaries".into(),
            ));
        }
        let n = self.model.primary.len();
        self.model = crate::apps::clone_region(&self.model, selection, t)?;
        let added_pts = self.model.primary.len() - n;
        if added_pts > 0 {
            let added = added_pts * PRIMARY_STRIDE;
            self.optim.primary.m.extend(std::iter::repeat(0.0).take(added));
            self.optim.primary.v.extend(std::iter::repeat(0.0).take(added));
            self.accum.primary.extend(std::iter::repeat(0.0).take(added));
            self.perm_primary.extend(n..n + added_pts);
        }
        Ok(())
    }
}

/// Run to completion, reporting every step and writing periodic
/// checkpoints (`ckpt_######.bin` plus a final `ckpt_final.bin`).
pub fn train_loop<F: FnMut(&StepReport)>(
    state: &mut TrainState,
    data: &[ViewPyramid],
    checkpoint_dir: Option<&Path>,
    mut on_step: F,
) -> Result<()> {
    if let Some(dir) = checkpoint_dir {
        std::fs::create_dir_all(dir)?;
    }
    while !state.finished() {
        let rep = state.train_step(data)?;
        on_step(&rep);
        if let Some(dir) = checkpoint_dir {
            let every = state.config.checkpoint_every;
            if every > 0 && rep.applied && state.iter % every == 0 && !state.finished() {
                state.save_checkpoint(&dir.join(format!("ckpt_{:06}.bin", state.iter)))?;
            }
        }
    }
    if let Some(dir) = checkpoint_dir {
        state.save_checkpoint(&dir.join("ckpt_final.bin"))?;
    }
    Ok(())
}

// checkpoint container

const CKPT_MAGIC: &[u8; 8] = b"CATASPLT";
const CKPT_VERSION: u32 = 1;

fn write_f64s<W: Write>(w: &mut W, xs: &[f64]) -> std::io::Result<()> {
    for &x in xs {
        w.write_f64::<LE>(x)?;
    }
    Ok(())
}

fn read_f64s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f64>> {
    let mut v = vec![0.0; n];
    r.read_f64_into::<LE>(&mut v)?;
    Ok(v)
}

fn write_cloud<W: Write>(w: &mut W, cloud: &PointCloud, with_rho: bool) -> std::io::Result<()> {
    w.write_u64::<LE>(cloud.len() as u64)?;
    w.write_u8(with_rho as u8)?;
    for p in &cloud.points {
        write_f64s(w, &[
            p.position.x, p.position.y, p.position.z,
            p.normal.x, p.normal.y, p.normal.z,
            p.raw_footprint, p.raw_opacity,
        ])?;
        write_f64s(w, &p.features)?;
        if with_rho {
            w.write_f64::<LE>(p.raw_rho.unwrap_or(0.0))?;
        }
    }
    Ok(())
}

fn read_cloud<R: Read>(r: &mut R) -> Result<PointCloud> {
    let n = r.read_u64::<LE>()? as usize;
    let with_rho = r.read_u8()? != 0;
    let stride = 8 + FEATURE_DIM + usize::from(with_rho);
    let mut points = Vec::with_capacity(n);
    for _ in 0..n {
        let row = read_f64s(r, stride)?;
        let mut features = [0.0; FEATURE_DIM];
        features.copy_from_slice(&row[8..8 + FEATURE_DIM]);
        points.push(SplatPoint {
            position: Vector3::new(row[0], row[1], row[2]),
            normal: Vector3::new(row[3], row[4], row[5]),
            raw_footprint: row[6],
            raw_opacity: row[7],
            features,
            raw_rho: with_rho.then(|| row[8 + FEATURE_DIM]),
        });
    }
    Ok(PointCloud { points })
}

fn write_mlp<W: Write>(w: &mut W, mlp: &Mlp) -> std::io::Result<()> {
    let widths = mlp.widths();
    w.write_u64::<LE>(widths.len() as u64)?;
    for &x in &widths {
        w.write_u64::<LE>(x as u64)?;
    }
    w.write_u64::<LE>(mlp.residual_period as u64)?;
    let mut buf = vec![0.0; mlp.num_params()];
    mlp.copy_params_to(&mut buf);
    write_f64s(w, &buf)
}

fn read_mlp<R: Read>(r: &mut R) -> Result<Mlp> {
    let nw = r.read_u64::<LE>()? as usize;
    if nw < 2 || nw > 64 {
        return Err(Error::Checkpoint(format!("implausible mlp width count {nw}")));
    }
    let mut widths = Vec::with_capacity(nw);
    for _ in 0..nw {
        widths.push(r.read_u64::<LE>()? as usize);
    }
    let period = r.read_u64::<LE>()? as usize;
    let mut mlp = Mlp::new(&widths, period);
    let params = read_f64s(r, mlp.num_params())?;
    mlp.set_params_from(&params);
    Ok(mlp)
}

fn write_adam<W: Write>(w: &mut W, s: &AdamState) -> std::io::Result<()> {
    w.write_u64::<LE>(s.step)?;
    w.write_u64::<LE>(s.m.len() as u64)?;
    write_f64s(w, &s.m)?;
    write_f64s(w, &s.v)
}

fn read_adam<R: Read>(r: &mut R) -> Result<AdamState> {
    let step = r.read_u64::<LE>()?;
    let n = r.read_u64::<LE>()? as usize;
    let m = read_f64s(r, n)?;
    let v = read_f64s(r, n)?;
    Ok(AdamState { m, v, step })
}

fn write_aabb<W: Write>(w: &mut W, b: &Aabb) -> std::io::Result<()> {
    write_f64s(w, &[b.min.x, b.min.y, b.min.z, b.max.x, b.max.y, b.max.z])
}

fn read_aabb<R: Read>(r: &mut R) -> Result<Aabb> {
    let v = read_f64s(r, 6)?;
    Ok(Aabb::new(Vector3::new(v[0], v[1], v[2]), Vector3::new(v[3], v[4], v[5])))
}

fn write_usizes<W: Write>(w: &mut W, xs: &[usize]) -> std::io::Result<()> {
    w.write_u64::<LE>(xs.len() as u64)?;
    for &x in xs {
        w.write_u64::<LE>(x as u64)?;
    }
    Ok(())
}

fn read_usizes<R: Read>(r: &mut R) -> Result<Vec<usize>> {
    let n = r.read_u64::<LE>()? as usize;
    (0..n).map(|_| Ok(r.read_u64::<LE>()? as usize)).collect()
}

impl TrainState {
    /// Binary checkpoint with exact raw tensors: model, optimizer moments,
    /// generator position and densification statistics. Interchange copies
    /// of the two clouds are written as sibling PLY files.
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        if self.accum.count != 0 {
            return Err(Error::Checkpoint(
                "checkpoints are only valid at accumulation boundaries".into(),
            ));
        }
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        w.write_all(CKPT_MAGIC)?;
        w.write_u32::<LE>(CKPT_VERSION)?;

        let cfg = toml::to_string(&self.config).map_err(|e| Error::Config(e.to_string()))?;
        w.write_u64::<LE>(cfg.len() as u64)?;
        w.write_all(cfg.as_bytes())?;

        w.write_u64::<LE>(self.iter as u64)?;
        w.write_u64::<LE>(self.config.seed)?;
        let pos = self.rng.get_word_pos();
        w.write_u64::<LE>(pos as u64)?;
        w.write_u64::<LE>((pos >> 64) as u64)?;

        write_cloud(&mut w, &self.model.primary, true)?;
        write_cloud(&mut w, &self.model.reflection, false)?;
        w.write_u64::<LE>(self.model.clone_offsets.len() as u64)?;
        for t in &self.model.clone_offsets {
            write_f64s(&mut w, &[t.x, t.y, t.z])?;
        }

        w.write_f64::<LE>(self.model.warp.scale)?;
        write_aabb(&mut w, &self.model.warp.point_box)?;
        write_aabb(&mut w, &self.model.warp.camera_box)?;
        write_mlp(&mut w, &self.model.warp.mlp)?;
        write_mlp(&mut w, &self.model.renderer.head_primary)?;
        write_mlp(&mut w, &self.model.renderer.head_reflection)?;
        write_mlp(&mut w, &self.model.renderer.decoder)?;

        w.write_u64::<LE>(self.model.envmap.width as u64)?;
        w.write_u64::<LE>(self.model.envmap.height as u64)?;
        w.write_u64::<LE>(self.model.envmap.channels as u64)?;
        write_f64s(&mut w, &self.model.envmap.texels)?;

        for s in [
            &self.optim.primary,
            &self.optim.reflection,
            &self.optim.warp,
            &self.optim.renderer,
            &self.optim.env,
        ] {
            write_adam(&mut w, s)?;
        }

        write_usizes(&mut w, &self.perm_primary)?;
        write_usizes(&mut w, &self.perm_reflection)?;

        w.write_u64::<LE>(self.densify.norm.len() as u64)?;
        write_f64s(&mut w, &self.densify.norm)?;
        for d in &self.densify.dir {
            write_f64s(&mut w, &[d.x, d.y, d.z])?;
        }
        for &c in &self.densify.count {
            w.write_u64::<LE>(c as u64)?;
        }
        w.write_u64::<LE>(self.densify.spawned_total as u64)?;
        w.flush()?;

        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("ckpt");
        let dir = path.parent().unwrap_or_else(|| Path::new("."));
        self.model.primary.save_ply(&dir.join(format!("{stem}_primary.ply")))?;
        self.model.reflection.save_ply(&dir.join(format!("{stem}_reflection.ply")))?;
        Ok(())
    }

    pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
        let mut r = BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CKPT_MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.read_u32::<LE>()?;
        if version != CKPT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }

        let cfg_len = r.read_u64::<LE>()? as usize;
        let mut cfg_bytes = vec![0u8; cfg_len];
        r.read_exact(&mut cfg_bytes)?;
        let cfg_text = String::from_utf8(cfg_bytes)
            .map_err(|_| Error::Checkpoint("config is not utf-8".into()))?;
        let config: TrainConfig =
            toml::from_str(&cfg_text).map_err(|e| Error::Checkpoint(e.to_string()))?;

        let iter = r.read_u64::<LE>()? as usize;
        let seed = r.read_u64::<LE>()?;
        let pos_lo = r.read_u64::<LE>()? as u128;
        let pos_hi = r.read_u64::<LE>()? as u128;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_word_pos(pos_lo | (pos_hi << 64));

        let primary = read_cloud(&mut r)?;
        let reflection = read_cloud(&mut r)?;
        let n_clones = r.read_u64::<LE>()? as usize;
        let mut clone_offsets = Vec::with_capacity(n_clones);
        for _ in 0..n_clones {
            let v = read_f64s(&mut r, 3)?;
            clone_offsets.push(Vector3::new(v[0], v[1], v[2]));
        }

        let scale = r.read_f64::<LE>()?;
        let point_box = read_aabb(&mut r)?;
        let camera_box = read_aabb(&mut r)?;
        let warp_mlp = read_mlp(&mut r)?;
        let warp = WarpField { mlp: warp_mlp, scale, point_box, camera_box };
        let renderer = NeuralRenderer {
            head_primary: read_mlp(&mut r)?,
            head_reflection: read_mlp(&mut r)?,
            decoder: read_mlp(&mut r)?,
        };

        let env_w = r.read_u64::<LE>()? as usize;
        let env_h = r.read_u64::<LE>()? as usize;
        let env_c = r.read_u64::<LE>()? as usize;
        let texels = read_f64s(&mut r, env_w * env_h * env_c)?;
        let envmap = EnvironmentMap { width: env_w, height: env_h, channels: env_c, texels };

        let optim = Optim {
            primary: read_adam(&mut r)?,
            reflection: read_adam(&mut r)?,
            warp: read_adam(&mut r)?,
            renderer: read_adam(&mut r)?,
            env: read_adam(&mut r)?,
        };

        let perm_primary = read_usizes(&mut r)?;
        let perm_reflection = read_usizes(&mut r)?;

        let nd = r.read_u64::<LE>()? as usize;
        let norm = read_f64s(&mut r, nd)?;
        let mut dir = Vec::with_capacity(nd);
        for _ in 0..nd {
            let v = read_f64s(&mut r, 3)?;
            dir.push(Vector3::new(v[0], v[1], v[2]));
        }
        let mut count = Vec::with_capacity(nd);
        for _ in 0..nd {
            count.push(r.read_u64::<LE>()? as u32);
        }
        let spawned_total = r.read_u64::<LE>()? as usize;

        let model = ModelState { primary, reflection, clone_offsets, warp, renderer, envmap };
        if optim.primary.m.len() != model.primary.len() * PRIMARY_STRIDE
            || optim.reflection.m.len() != model.reflection.len() * REFLECTION_STRIDE
            || optim.renderer.m.len() != model.renderer.num_params()
            || optim.warp.m.len() != model.warp.mlp.num_params()
            || optim.env.m.len() != model.envmap.texels.len()
        {
            return Err(Error::Checkpoint("optimizer state does not match the model".into()));
        }
        let accum = GradAccum::new(&model);
        let schedule = warmup_schedule(&config);
        Ok(TrainState {
            config,
            model,
            iter,
            schedule,
            rng,
            optim,
            accum,
            densify: DensifyStats { norm, dir, count, spawned_total },
            perm_primary,
            perm_reflection,
        })
    }
}
