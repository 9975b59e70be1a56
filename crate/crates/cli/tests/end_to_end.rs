//! Drives the `catasplat` binary through the full loop on a tiny scene:
//! synth -> volume -> train -> render / metrics / correspond / clone /
//! stereo / caustic-compare, checking outputs and exit codes.

use std::path::Path;
use std::process::{Command, Output};

fn catasplat(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_catasplat"))
        .args(args)
        .output()
        .expect("spawn catasplat")
}

fn run_ok(args: &[&str]) -> String {
    let out = catasplat(args);
    assert!(
        out.status.success(),
        "command {:?} failed:\nstdout: {}\nstderr: {}",
        args,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn count_lines(path: &Path) -> usize {
    std::fs::read_to_string(path).unwrap().lines().count()
}

#[test]
fn full_loop_on_a_tiny_scene() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let data = root.join("data");
    let vol = root.join("volume.ply");
    let run = root.join("run");

    run_ok(&[
        "synth",
        "--scene",
        "mirror_wall",
        "--out",
        data.to_str().unwrap(),
        "--views",
        "4",
        "--size",
        "32x32",
        "--focal",
        "35",
        "--spp",
        "1",
        "--points",
        "700",
        "--seed",
        "1",
        "--radius",
        "2.0",
        "--height",
        "0.2",
        "--sweep",
        "90",
        "--start",
        "225",
    ]);
    for file in ["cameras.json", "scene.json", "points_primary.ply"] {
        assert!(data.join(file).exists(), "missing {file}");
    }
    assert!(data.join("images/view_0003.png").exists());
    assert!(data.join("masks/view_0003.png").exists());

    run_ok(&[
        "volume",
        "--data",
        data.to_str().unwrap(),
        "--out",
        vol.to_str().unwrap(),
    ]);
    assert!(vol.exists());

    let cfg = root.join("smoke.toml");
    std::fs::write(
        &cfg,
        r#"
iterations = 6
patch = 16
accumulation = 2
densify_period = 1000
warmup = [0.2, 0.2]
n_reflection_points = 120
env_width = 8
env_height = 4
checkpoint_every = 4
seed = 3
"#,
    )
    .unwrap();
    let stdout = run_ok(&[
        "train",
        "--data",
        data.to_str().unwrap(),
        "--volume",
        vol.to_str().unwrap(),
        "--out",
        run.to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
        "--log-every",
        "2",
    ]);
    assert!(stdout.contains("trained to iter 6"), "stdout: {stdout}");
    let ckpt = run.join("checkpoints/ckpt_final.bin");
    assert!(ckpt.exists());
    assert!(run.join("checkpoints/ckpt_000004.bin").exists());
    assert_eq!(count_lines(&run.join("loss.csv")), 7, "header + 6 steps");

    // resume of a finished run rewrites the final checkpoint and adds no rows
    run_ok(&[
        "train",
        "--data",
        data.to_str().unwrap(),
        "--volume",
        vol.to_str().unwrap(),
        "--out",
        run.to_str().unwrap(),
        "--resume",
        ckpt.to_str().unwrap(),
    ]);
    assert_eq!(count_lines(&run.join("loss.csv")), 7);

    let frames = root.join("frames");
    run_ok(&[
        "render",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--orbit",
        "ring:2.0,0.5,2",
        "--center",
        "0,0.6,1.8",
        "--size",
        "32x32",
        "--focal",
        "35",
        "--out",
        frames.to_str().unwrap(),
    ]);
    assert!(frames.join("frame_0000.png").exists());
    assert!(frames.join("frame_0001.pfm").exists());

    let metrics = root.join("metrics.csv");
    let stdout = run_ok(&[
        "metrics",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--volume",
        vol.to_str().unwrap(),
        "--out",
        metrics.to_str().unwrap(),
    ]);
    assert!(stdout.contains("mean PSNR"), "stdout: {stdout}");
    assert_eq!(count_lines(&metrics), 5, "header + 4 views");

    let tracks = root.join("tracks.csv");
    run_ok(&[
        "correspond",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--indices",
        "0,5,9",
        "--cameras",
        data.join("cameras.json").to_str().unwrap(),
        "--out",
        tracks.to_str().unwrap(),
    ]);
    assert_eq!(count_lines(&tracks), 1 + 3 * 4, "header + points x views");

    let edited = root.join("edited.bin");
    run_ok(&[
        "clone",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--min",
        "-3,-3,-3",
        "--max",
        "3,3,3",
        "--translate",
        "0.4,0,0",
        "--out",
        edited.to_str().unwrap(),
    ]);
    let cloned_frames = root.join("cloned");
    run_ok(&[
        "render",
        "--checkpoint",
        edited.to_str().unwrap(),
        "--cameras",
        data.join("cameras.json").to_str().unwrap(),
        "--out",
        cloned_frames.to_str().unwrap(),
    ]);
    assert!(cloned_frames.join("frame_0003.png").exists());

    let stereo = root.join("stereo");
    run_ok(&[
        "stereo",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--orbit",
        "ring:2.0,0.5,1",
        "--center",
        "0,0.6,1.8",
        "--size",
        "32x32",
        "--focal",
        "35",
        "--eye-sep",
        "0.1",
        "--warp-sep",
        "0",
        "--out",
        stereo.to_str().unwrap(),
    ]);
    assert!(stereo.join("left_0000.png").exists());
    assert!(stereo.join("right_0000.png").exists());

    let report = root.join("caustic.csv");
    let stdout = run_ok(&[
        "caustic-compare",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--source",
        "0.5,0.5,-1.0",
        "--point-index",
        "0",
        "--samples",
        "16",
        "--seed",
        "2",
        "--out",
        report.to_str().unwrap(),
    ]);
    assert!(stdout.contains("chamfer"), "stdout: {stdout}");
    assert_eq!(count_lines(&report), 17, "header + 16 samples");
}

#[test]
fn bad_input_exits_with_2() {
    let tmp = tempfile::tempdir().unwrap();
    let out = catasplat(&[
        "volume",
        "--data",
        tmp.path().join("nope").to_str().unwrap(),
        "--out",
        tmp.path().join("v.ply").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));

    let out = catasplat(&[
        "render",
        "--checkpoint",
        tmp.path().join("missing.bin").to_str().unwrap(),
        "--orbit",
        "ring:2,0.5,1",
        "--out",
        tmp.path().join("frames").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));

    // clap usage errors share the bad-input code
    let out = catasplat(&["synth", "--scene"]);
    assert_eq!(out.status.code(), Some(2));
}
