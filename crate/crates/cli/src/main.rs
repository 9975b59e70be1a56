//! `catasplat`: batch driver for the curved-reflector point renderer.
//!
//! Subcommands cover the full loop: `synth` ray-traces a synthetic dataset,
//! `volume` intersects mask frustums into the reflection volume, `train`
//! optimizes a model, and `render`, `metrics`, `correspond`, `clone`,
//! `stereo` and `caustic-compare` operate on checkpoints.
//!
//! Exit codes: 0 on success, 2 on bad input, 3 on numerical failure.

use std::fs::File;
use std::io::{BufWriter, Write as _};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nalgebra::Vector3;

use catasplat_core::apps;
use catasplat_core::geometry::load_cameras;
use catasplat_core::img::{save_pfm, save_png, MaskImage};
use catasplat_core::losses::{dssim_metric, psnr, ssim};
use catasplat_core::oracle::scene::{
    generate_dataset, load_dataset, load_masks, orbit_cameras, save_dataset, scene_by_name,
    DatasetParams, OrbitSpec, Reflector,
};
use catasplat_core::pipeline::{render_view, RenderOptions};
use catasplat_core::trainer::{build_pyramids, train_loop, StepReport, TrainConfig, TrainState};
use catasplat_core::volume::{
    intersect_halfspaces, lift_mask_to_halfspaces, mask_to_hull, rasterize_volume_mask,
    simplify_polyline, ReflectionVolume,
};
use catasplat_core::{Aabb, Camera, Error, Result};

#[derive(Parser)]
#[command(name = "catasplat", version, about = "Point-based rendering of curved-reflector scenes")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Ray-trace a synthetic dataset: images, reflector masks, seed points
    Synth(SynthArgs),
    /// Intersect per-view mask frustums into the convex reflection volume
    Volume(VolumeArgs),
    /// Train a model on a dataset directory
    Train(TrainArgs),
    /// Render a camera path from a checkpoint
    Render(RenderArgs),
    /// Per-view PSNR/SSIM/DSSIM, full frame and reflector region
    Metrics(MetricsArgs),
    /// Track reflection points across cameras
    Correspond(CorrespondArgs),
    /// Duplicate the reflector in a box under a translation
    Clone(CloneArgs),
    /// Stereo pairs with a decoupled warp-eye separation
    Stereo(StereoArgs),
    /// Compare the learned warp against the analytic catacaustic
    CausticCompare(CausticArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Numerical(_) => 3,
                _ => 2,
            })
        }
    }
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Synth(a) => run_synth(a),
        Cmd::Volume(a) => run_volume(a),
        Cmd::Train(a) => run_train(a),
        Cmd::Render(a) => run_render(a),
        Cmd::Metrics(a) => run_metrics(a),
        Cmd::Correspond(a) => run_correspond(a),
        Cmd::Clone(a) => run_clone(a),
        Cmd::Stereo(a) => run_stereo(a),
        Cmd::CausticCompare(a) => run_caustic(a),
    }
}

// argument parsing helpers

fn parse_vec3(s: &str) -> std::result::Result<Vector3<f64>, String> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 3 {
        return Err(format!("expected x,y,z, got {s:?}"));
    }
    let mut v = [0.0; 3];
    for (slot, p) in v.iter_mut().zip(&parts) {
        *slot = p.trim().parse::<f64>().map_err(|e| format!("{p:?}: {e}"))?;
    }
    Ok(Vector3::new(v[0], v[1], v[2]))
}

fn parse_size(s: &str) -> std::result::Result<(u32, u32), String> {
    let (w, h) = s.split_once(['x', 'X']).ok_or_else(|| format!("expected WxH, got {s:?}"))?;
    let w = w.trim().parse::<u32>().map_err(|e| format!("width {w:?}: {e}"))?;
    let h = h.trim().parse::<u32>().map_err(|e| format!("height {h:?}: {e}"))?;
    if w == 0 || h == 0 {
        return Err("image must be at least 1x1".into());
    }
    Ok((w, h))
}

/// `ring:radius,height,n` -> (radius, height, n)
fn parse_orbit(s: &str) -> Result<(f64, f64, usize)> {
    let bad = || Error::InvalidInput(format!("expected ring:radius,height,n, got {s:?}"));
    let rest = s.strip_prefix("ring:").ok_or_else(bad)?;
    let parts: Vec<&str> = rest.split(',').collect();
    if parts.len() != 3 {
        return Err(bad());
    }
    let radius: f64 = parts[0].trim().parse().map_err(|_| bad())?;
    let height: f64 = parts[1].trim().parse().map_err(|_| bad())?;
    let n: usize = parts[2].trim().parse().map_err(|_| bad())?;
    if !(radius > 0.0) || n == 0 {
        return Err(Error::InvalidInput("orbit needs radius > 0 and n >= 1".into()));
    }
    Ok((radius, height, n))
}

/// Camera path source shared by render, correspond and stereo.
#[derive(Args, Debug)]
struct PathArgs {
    /// Camera list JSON (as written by `synth` in cameras.json)
    #[arg(long)]
    cameras: Option<PathBuf>,
    /// Generated path, e.g. ring:2.4,0.8,24
    #[arg(long, conflicts_with = "cameras")]
    orbit: Option<String>,
    /// Orbit aim point
    #[arg(long, default_value = "0,0,0", value_parser = parse_vec3, allow_hyphen_values = true)]
    center: Vector3<f64>,
    /// Orbit image size
    #[arg(long, default_value = "64x64", value_parser = parse_size)]
    size: (u32, u32),
    /// Orbit focal length in pixels
    #[arg(long, default_value_t = 70.0)]
    focal: f64,
}

impl PathArgs {
    fn resolve(&self) -> Result<Vec<Camera>> {
        if let Some(file) = &self.cameras {
            return load_cameras(file);
        }
        let spec = self
            .orbit
            .as_deref()
            .ok_or_else(|| Error::InvalidInput("need --cameras or --orbit".into()))?;
        let (radius, height, n) = parse_orbit(spec)?;
        let orbit = OrbitSpec {
            center: self.center,
            radius,
            height,
            sweep: std::f64::consts::TAU,
            start_angle: 0.0,
        };
        let params = DatasetParams {
            n_views: n,
            width: self.size.0,
            height: self.size.1,
            focal: self.focal,
            ..DatasetParams::default()
        };
        Ok(orbit_cameras(&orbit, &params))
    }
}

fn load_model(path: &Path) -> Result<TrainState> {
    TrainState::load_checkpoint(path)
}

fn save_frame(dir: &Path, name: &str, img: &catasplat_core::FeatureImage) -> Result<()> {
    save_png(&dir.join(format!("{name}.png")), img)?;
    save_pfm(&dir.join(format!("{name}.pfm")), img)
}

// synth

#[derive(Args)]
struct SynthArgs {
    /// Preset scene: sphere_room, mirror_wall or concave_bowl
    #[arg(long)]
    scene: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 40)]
    views: usize,
    /// Image size, e.g. 64x64
    #[arg(long, default_value = "64x64", value_parser = parse_size)]
    size: (u32, u32),
    #[arg(long, default_value_t = 70.0)]
    focal: f64,
    /// Ray samples per pixel
    #[arg(long, default_value_t = 4)]
    spp: u32,
    /// Diffuse surface samples seeding the primary cloud
    #[arg(long, default_value_t = 6000)]
    points: usize,
    /// Dropout holes carved out of the seed points
    #[arg(long, default_value_t = 0)]
    holes: usize,
    #[arg(long, default_value_t = 0.15)]
    hole_radius: f64,
    /// Gaussian position noise on the seed points
    #[arg(long, default_value_t = 0.0)]
    jitter: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Camera orbit radius around the aim point
    #[arg(long, default_value_t = 2.4)]
    radius: f64,
    /// Camera height above the aim point
    #[arg(long, default_value_t = 0.8)]
    height: f64,
    /// Swept arc in degrees
    #[arg(long, default_value_t = 360.0)]
    sweep: f64,
    /// Arc start angle in degrees
    #[arg(long, default_value_t = 0.0)]
    start: f64,
    /// Orbit aim point; defaults to the scene's reflector
    #[arg(long, value_parser = parse_vec3, allow_hyphen_values = true)]
    center: Option<Vector3<f64>>,
}

fn reflector_aim(reflector: &Option<Reflector>) -> Vector3<f64> {
    match reflector {
        Some(Reflector::Sphere { center, .. }) => *center,
        Some(Reflector::Plane { point, .. }) => *point,
        Some(Reflector::Cap { center, radius, axis, .. }) => center + *radius * axis.normalize(),
        None => Vector3::zeros(),
    }
}

fn run_synth(a: SynthArgs) -> Result<()> {
    let scene = scene_by_name(&a.scene)?;
    let orbit = OrbitSpec {
        center: a.center.unwrap_or_else(|| reflector_aim(&scene.reflector)),
        radius: a.radius,
        height: a.height,
        sweep: a.sweep.to_radians(),
        start_angle: a.start.to_radians(),
    };
    let params = DatasetParams {
        n_views: a.views,
        width: a.size.0,
        height: a.size.1,
        focal: a.focal,
        spp: a.spp,
        n_points: a.points,
        dropout_holes: a.holes,
        hole_radius: a.hole_radius,
        jitter: a.jitter,
        seed: a.seed,
    };
    let dataset = generate_dataset(&scene, &orbit, &params);
    save_dataset(&a.out, &dataset)?;
    println!(
        "wrote {} views at {}x{} and {} seed points to {}",
        dataset.views.len(),
        a.size.0,
        a.size.1,
        dataset.points.len(),
        a.out.display()
    );
    Ok(())
}

// volume

#[derive(Args)]
struct VolumeArgs {
    /// Dataset directory with cameras.json and masks/
    #[arg(long)]
    data: PathBuf,
    /// Output volume mesh (PLY)
    #[arg(long)]
    out: PathBuf,
    /// Douglas-Peucker hull tolerance in pixels
    #[arg(long, default_value_t = 1.5)]
    epsilon: f64,
    /// Clip box as two corners MIN MAX (x,y,z each); defaults to a box
    /// wrapping the cameras and their central view rays
    #[arg(long, num_args = 2, value_parser = parse_vec3, allow_hyphen_values = true, value_names = ["MIN", "MAX"])]
    clip: Option<Vec<Vector3<f64>>>,
}

fn run_volume(a: VolumeArgs) -> Result<()> {
    let cameras = load_cameras(&a.data.join("cameras.json"))?;
    let masks = load_masks(&a.data, cameras.len())?;
    let mut halfspaces = Vec::new();
    let mut used = 0;
    for (i, (camera, mask)) in cameras.iter().zip(&masks).enumerate() {
        let hull = match mask_to_hull(mask) {
            Ok(h) => h,
            Err(e) => {
                eprintln!("view {i}: skipped ({e})");
                continue;
            }
        };
        let simple = simplify_polyline(&hull, a.epsilon);
        halfspaces.extend(lift_mask_to_halfspaces(camera, &simple)?);
        used += 1;
    }
    if used == 0 {
        return Err(Error::InvalidInput("no usable reflector masks".into()));
    }
    let clip = match &a.clip {
        Some(c) => box_from_corners(&c[0], &c[1])?,
        None => default_clip(&cameras)?,
    };
    let volume = intersect_halfspaces(&halfspaces, &clip)?;
    volume.save_ply(&a.out)?;
    println!(
        "volume from {used} views: {} faces, volume {:.4}, area {:.4} -> {}",
        volume.to_mesh().faces.len(),
        volume.volume(),
        volume.surface_area(),
        a.out.display()
    );
    Ok(())
}

/// Wrap the camera positions plus a point down each central view ray, so
/// the box reaches the scene the cameras are aimed at.
fn default_clip(cameras: &[Camera]) -> Result<Aabb> {
    let mut points: Vec<Vector3<f64>> = cameras.iter().map(|c| c.position).collect();
    let mut spread: f64 = 0.0;
    for a in &points {
        for b in &points {
            spread = spread.max((a - b).norm());
        }
    }
    let reach = if spread > 0.0 { 1.5 * spread } else { 3.0 };
    for cam in cameras {
        points.push(cam.pixel_ray(cam.cx, cam.cy).at(reach));
    }
    Ok(Aabb::from_points(points.iter())
        .ok_or_else(|| Error::InvalidInput("no cameras".into()))?
        .dilated(0.25))
}

fn box_from_corners(min: &Vector3<f64>, max: &Vector3<f64>) -> Result<Aabb> {
    if !(min.x < max.x && min.y < max.y && min.z < max.z) {
        return Err(Error::InvalidInput("box min must be strictly below max".into()));
    }
    Ok(Aabb::new(*min, *max))
}

// train

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory from `synth`
    #[arg(long)]
    data: PathBuf,
    /// Reflection volume mesh from `volume`
    #[arg(long)]
    volume: PathBuf,
    /// Run directory (checkpoints/ and loss.csv)
    #[arg(long)]
    out: PathBuf,
    /// Training profile, TOML or JSON; desk-scale defaults when omitted
    #[arg(long)]
    config: Option<PathBuf>,
    /// Resume from a checkpoint (its embedded config wins)
    #[arg(long, conflicts_with = "config")]
    resume: Option<PathBuf>,
    /// Ablation: train the primary cloud only
    #[arg(long)]
    primary_only: bool,
    /// Progress line period, iterations
    #[arg(long, default_value_t = 100)]
    log_every: usize,
}

fn run_train(a: TrainArgs) -> Result<()> {
    let dataset = load_dataset(&a.data)?;
    let volume = ReflectionVolume::load_ply(&a.volume)?;
    let mut state = match &a.resume {
        Some(ckpt) => TrainState::load_checkpoint(ckpt)?,
        None => {
            let mut config = match &a.config {
                Some(path) => TrainConfig::from_file(path)?,
                None => TrainConfig::desk(),
            };
            if a.primary_only {
                config.primary_only = true;
            }
            TrainState::new(&dataset, &volume, config)?
        }
    };
    let data = build_pyramids(&dataset, &volume)?;
    std::fs::create_dir_all(&a.out)?;
    let log_path = a.out.join("loss.csv");
    let fresh = state.iter == 0 || !log_path.exists();
    let mut log = BufWriter::new(
        File::options().create(true).append(true).open(&log_path)?,
    );
    if fresh {
        writeln!(log, "{}", StepReport::csv_header())?;
    }
    let total = state.config.iterations;
    let mut spawned = 0usize;
    let mut io_err: Option<std::io::Error> = None;
    train_loop(&mut state, &data, Some(&a.out.join("checkpoints")), |rep| {
        if io_err.is_none() {
            if let Err(e) = writeln!(log, "{}", rep.csv_row()) {
                io_err = Some(e);
            }
        }
        spawned += rep.points_spawned;
        if rep.iter % a.log_every.max(1) == 0 || rep.iter == total {
            println!(
                "iter {:>6}/{} loss {:.5} lr {:.3e} spawned {}",
                rep.iter, total, rep.report.total, rep.lr, spawned
            );
        }
    })?;
    if let Some(e) = io_err {
        return Err(e.into());
    }
    log.flush()?;
    println!(
        "trained to iter {} ({} primary, {} reflection points) -> {}",
        state.iter,
        state.model.primary.len(),
        state.model.reflection.len(),
        a.out.join("checkpoints").join("ckpt_final.bin").display()
    );
    Ok(())
}

// render

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    path: PathArgs,
    #[arg(long)]
    out: PathBuf,
    /// Per-frame warp camera positions, JSON list of [x,y,z]
    #[arg(long)]
    warp_cameras: Option<PathBuf>,
}

fn run_render(a: RenderArgs) -> Result<()> {
    let state = load_model(&a.checkpoint)?;
    let cameras = a.path.resolve()?;
    let warp = match &a.warp_cameras {
        Some(file) => {
            let rows: Vec<[f64; 3]> = serde_json::from_str(&std::fs::read_to_string(file)?)?;
            Some(rows.into_iter().map(Vector3::from).collect::<Vec<_>>())
        }
        None => None,
    };
    let frames = apps::render_path(&state.model, &cameras, warp.as_deref())?;
    std::fs::create_dir_all(&a.out)?;
    for (i, frame) in frames.iter().enumerate() {
        save_frame(&a.out, &format!("frame_{i:04}"), frame)?;
    }
    println!("rendered {} frames to {}", frames.len(), a.out.display());
    Ok(())
}

// metrics

#[derive(Args)]
struct MetricsArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset directory with ground-truth views
    #[arg(long)]
    data: PathBuf,
    /// Reflection volume for the region columns; dataset masks when omitted
    #[arg(long)]
    volume: Option<PathBuf>,
    /// Output CSV
    #[arg(long)]
    out: PathBuf,
}

fn run_metrics(a: MetricsArgs) -> Result<()> {
    let state = load_model(&a.checkpoint)?;
    let dataset = load_dataset(&a.data)?;
    let volume = a.volume.as_deref().map(ReflectionVolume::load_ply).transpose()?;
    let masks: Vec<MaskImage> = match &volume {
        Some(vol) => dataset
            .views
            .iter()
            .map(|v| rasterize_volume_mask(vol, &v.camera))
            .collect(),
        None => load_masks(&a.data, dataset.views.len())?,
    };
    if let Some(dir) = a.out.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut csv = BufWriter::new(File::create(&a.out)?);
    writeln!(csv, "view,psnr,ssim,dssim,psnr_reflector,ssim_reflector,dssim_reflector")?;
    let mut mean_full = 0.0;
    let mut mean_refl = 0.0;
    let n = dataset.views.len();
    for (i, (view, mask)) in dataset.views.iter().zip(&masks).enumerate() {
        let rgb = render_view(&state.model, &view.camera, &RenderOptions::default())?.rgb;
        let p = psnr(&rgb, &view.image, None)?;
        let s = ssim(&rgb, &view.image, None)?;
        let d = dssim_metric(&rgb, &view.image, None)?;
        let pr = psnr(&rgb, &view.image, Some(mask))?;
        let sr = ssim(&rgb, &view.image, Some(mask))?;
        let dr = dssim_metric(&rgb, &view.image, Some(mask))?;
        writeln!(csv, "{i},{p},{s},{d},{pr},{sr},{dr}")?;
        mean_full += p / n as f64;
        mean_refl += pr / n as f64;
    }
    csv.flush()?;
    println!(
        "{n} views: mean PSNR {mean_full:.2} dB (full), {mean_refl:.2} dB (reflector) -> {}",
        a.out.display()
    );
    Ok(())
}

// correspond

#[derive(Args)]
struct CorrespondArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Reflection point indices, comma separated
    #[arg(long, value_delimiter = ',', required = true)]
    indices: Vec<usize>,
    #[command(flatten)]
    path: PathArgs,
    /// Output CSV of tracks
    #[arg(long)]
    out: PathBuf,
}

fn run_correspond(a: CorrespondArgs) -> Result<()> {
    let state = load_model(&a.checkpoint)?;
    let cameras = a.path.resolve()?;
    let tracks = apps::correspond(&state.model, &a.indices, &cameras)?;
    if let Some(dir) = a.out.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut csv = BufWriter::new(File::create(&a.out)?);
    writeln!(csv, "point,view,px,py,depth,visible")?;
    for (k, track) in tracks.iter().enumerate() {
        for (j, s) in track.iter().enumerate() {
            match s.pixel {
                Some(px) => writeln!(
                    csv,
                    "{},{},{},{},{},{}",
                    a.indices[k], j, px.x, px.y, s.depth, s.visible
                )?,
                None => writeln!(csv, "{},{},,,,false", a.indices[k], j)?,
            }
        }
    }
    csv.flush()?;
    println!(
        "tracked {} points over {} views -> {}",
        a.indices.len(),
        cameras.len(),
        a.out.display()
    );
    Ok(())
}

// clone

#[derive(Args)]
struct CloneArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Selection box corner x,y,z
    #[arg(long, value_parser = parse_vec3, allow_hyphen_values = true)]
    min: Vector3<f64>,
    /// Selection box corner x,y,z
    #[arg(long, value_parser = parse_vec3, allow_hyphen_values = true)]
    max: Vector3<f64>,
    /// Translation x,y,z (clones support translations only)
    #[arg(long, value_parser = parse_vec3, allow_hyphen_values = true)]
    translate: Vector3<f64>,
    /// Output checkpoint
    #[arg(long)]
    out: PathBuf,
}

fn run_clone(a: CloneArgs) -> Result<()> {
    let mut state = load_model(&a.checkpoint)?;
    let selection = box_from_corners(&a.min, &a.max)?;
    let before = state.model.primary.len();
    state.apply_clone(&selection, &a.translate)?;
    state.save_checkpoint(&a.out)?;
    println!(
        "cloned {} primary points under t = ({}, {}, {}) -> {}",
        state.model.primary.len() - before,
        a.translate.x,
        a.translate.y,
        a.translate.z,
        a.out.display()
    );
    Ok(())
}

// stereo

#[derive(Args)]
struct StereoArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    path: PathArgs,
    /// Raster eye separation (world units)
    #[arg(long, default_value_t = 0.065)]
    eye_sep: f64,
    /// Warp eye separation; 0 shares one cyclopean warp camera
    #[arg(long, default_value_t = 0.0)]
    warp_sep: f64,
    #[arg(long)]
    out: PathBuf,
}

fn run_stereo(a: StereoArgs) -> Result<()> {
    let state = load_model(&a.checkpoint)?;
    let cameras = a.path.resolve()?;
    let pairs = apps::stereo_render(&state.model, &cameras, a.eye_sep, a.warp_sep)?;
    std::fs::create_dir_all(&a.out)?;
    for (i, pair) in pairs.iter().enumerate() {
        save_frame(&a.out, &format!("left_{i:04}"), &pair.left)?;
        save_frame(&a.out, &format!("right_{i:04}"), &pair.right)?;
    }
    println!("rendered {} stereo pairs to {}", pairs.len(), a.out.display());
    Ok(())
}

// caustic-compare

#[derive(Args)]
struct CausticArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset directory whose scene.json defines the reflector
    #[arg(long)]
    data: PathBuf,
    /// Scene point whose virtual image is compared
    #[arg(long, value_parser = parse_vec3, allow_hyphen_values = true)]
    source: Vector3<f64>,
    /// Reflection point driven through the warp field
    #[arg(long, default_value_t = 0)]
    point_index: usize,
    /// Camera samples inside the training camera box
    #[arg(long, default_value_t = 256)]
    samples: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Output CSV (eye, analytic, warped, residual per row)
    #[arg(long)]
    out: PathBuf,
}

fn run_caustic(a: CausticArgs) -> Result<()> {
    let state = load_model(&a.checkpoint)?;
    let dataset = load_dataset(&a.data)?;
    let reflector = dataset
        .scene
        .as_ref()
        .and_then(|s| s.reflector.as_ref())
        .ok_or_else(|| Error::InvalidInput("dataset scene has no reflector".into()))?;
    let report = apps::compare_catacaustic(
        &state.model,
        reflector,
        &a.source,
        a.point_index,
        a.samples,
        a.seed,
    )?;
    if let Some(dir) = a.out.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut csv = BufWriter::new(File::create(&a.out)?);
    writeln!(csv, "ex,ey,ez,ax,ay,az,wx,wy,wz,residual")?;
    for i in 0..report.eyes.len() {
        let (e, v, w) = (&report.eyes[i], &report.analytic[i], &report.warped[i]);
        writeln!(
            csv,
            "{},{},{},{},{},{},{},{},{},{}",
            e.x, e.y, e.z, v.x, v.y, v.z, w.x, w.y, w.z, report.ray_residuals[i]
        )?;
    }
    csv.flush()?;
    println!(
        "{} samples: chamfer {:.6}, median ray residual {:.6} -> {}",
        report.eyes.len(),
        report.chamfer,
        report.median_residual,
        a.out.display()
    );
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn vec3_and_size_parsers() {
        assert_eq!(parse_vec3("1,2.5,-3").unwrap(), Vector3::new(1.0, 2.5, -3.0));
        assert!(parse_vec3("1,2").is_err());
        assert!(parse_vec3("a,b,c").is_err());
        assert_eq!(parse_size("64x48").unwrap(), (64, 48));
        assert!(parse_size("64").is_err());
        assert!(parse_size("0x4").is_err());
    }

    #[test]
    fn orbit_parser_requires_the_ring_form() {
        assert_eq!(parse_orbit("ring:2.4,0.8,24").unwrap(), (2.4, 0.8, 24));
        assert!(parse_orbit("2.4,0.8,24").is_err());
        assert!(parse_orbit("ring:0,0.8,24").is_err());
        assert!(parse_orbit("ring:2.4,0.8").is_err());
    }
}
