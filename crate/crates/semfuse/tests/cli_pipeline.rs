//! End-to-end CLI runs: artifact determinism and format smoke checks.

use std::path::{Path, PathBuf};
use std::process::Command;

use semfuse::pipeline::scene_file::{save_scene, save_train_file, TrainFile};
use semfuse::simdata::{sample_scene_setup, RoomParams};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_semfuse")
}

fn run(args: &[&str]) {
    let out = Command::new(bin())
        .args(args)
        .output()
        .expect("binary runs");
    assert!(
        out.status.success(),
        "command {:?} failed:\n{}",
        args,
        String::from_utf8_lossy(&out.stderr)
    );
}

fn small_scene(dir: &Path) -> PathBuf {
    let params = RoomParams {
        room_size: [3.2, 3.2, 1.6],
        voxel_size: 0.1,
        shell_thickness: 0.3,
        n_clutter_boxes: 1,
        n_views: 6,
    };
    let setup = sample_scene_setup(11, &params);
    let path = dir.join("scene.toml");
    save_scene(&path, &setup).unwrap();
    path
}

fn write_train_config(dir: &Path, scene_dir: &Path) -> PathBuf {
    let tf = TrainFile {
        scenes: vec![scene_dir.to_path_buf()],
        epochs: 2,
        crop_dim: 12,
        solver_iterations: 5,
        batch_size: 2,
        learning_rate: 1e-3,
        seed: 3,
        ..Default::default()
    };
    let path = dir.join("train.toml");
    save_train_file(&path, &tf).unwrap();
    path
}

/// Runs the whole pipeline into `root` and returns the artifact paths.
fn run_pipeline(root: &Path, scene_path: &Path) -> Vec<PathBuf> {
    let sim = root.join("sim");
    run(&[
        "simulate",
        "--scene",
        scene_path.to_str().unwrap(),
        "--out",
        sim.to_str().unwrap(),
        "--seed",
        "5",
    ]);
    run(&["fuse", "--in", sim.to_str().unwrap(), "--seed", "5"]);
    let cfg = write_train_config(root, &sim);
    let train_out = root.join("train");
    run(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        train_out.to_str().unwrap(),
        "--epochs",
        "2",
        "--seed",
        "3",
    ]);
    let labels = root.join("labels.vol");
    run(&[
        "reconstruct",
        "--in",
        sim.to_str().unwrap(),
        "--checkpoint",
        train_out.join("checkpoint.json").to_str().unwrap(),
        "--out",
        labels.to_str().unwrap(),
        "--iterations",
        "20",
        "--dump-confidence",
        "--seed",
        "5",
    ]);
    let metrics = root.join("metrics.txt");
    run(&[
        "eval",
        "--pred",
        labels.to_str().unwrap(),
        "--gt",
        sim.join("gt.vol").to_str().unwrap(),
        "--out",
        metrics.to_str().unwrap(),
        "--seed",
        "5",
    ]);
    let ply = root.join("labels.ply");
    run(&[
        "export",
        "--in",
        labels.to_str().unwrap(),
        "--out",
        ply.to_str().unwrap(),
        "--seed",
        "5",
    ]);

    let mut artifacts = vec![
        sim.join("gt.vol"),
        sim.join("views_kinect.svw"),
        sim.join("views_kinect_noisy.svw"),
        sim.join("tsdf_kinect.vol"),
        sim.join("datacost_kinect.vol"),
        sim.join("features_kinect.vol"),
        sim.join("tsdf_kinect_noisy.vol"),
        sim.join("datacost_kinect_noisy.vol"),
        sim.join("features_kinect_noisy.vol"),
        sim.join("fused_tsdf_uniform.vol"),
        train_out.join("checkpoint.json"),
        train_out.join("loss_curve.txt"),
        labels.clone(),
        root.join("confidence_kinect.vol"),
        root.join("confidence_kinect_noisy.vol"),
        metrics,
        ply,
    ];
    artifacts.sort();
    artifacts
}

#[test]
fn pipeline_artifacts_are_byte_identical_across_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let scene_path = small_scene(tmp.path());

    let root_a = tmp.path().join("a");
    let root_b = tmp.path().join("b");
    let arts_a = run_pipeline(&root_a, &scene_path);
    let arts_b = run_pipeline(&root_b, &scene_path);
    assert_eq!(arts_a.len(), arts_b.len());
    for (a, b) in arts_a.iter().zip(arts_b.iter()) {
        let ba = std::fs::read(a).unwrap_or_else(|_| panic!("missing artifact {a:?}"));
        let bb = std::fs::read(b).unwrap_or_else(|_| panic!("missing artifact {b:?}"));
        assert_eq!(ba, bb, "artifact differs between runs: {a:?}");
    }
    // The metrics file parses and contains the fixed fields.
    let metrics = std::fs::read_to_string(root_a.join("metrics.txt")).unwrap();
    assert!(metrics.contains("semantic_accuracy = "));
    assert!(metrics.contains("free_space_accuracy = "));
    assert!(metrics.contains("completion_tp_rate = "));
    assert!(metrics.contains("mean_surface_distance_voxels = "));
}

#[test]
fn missing_input_gives_nonzero_exit() {
    let out = Command::new(bin())
        .args(["fuse", "--in", "/nonexistent-dir-xyz"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(!out.stderr.is_empty());
}

#[test]
fn unknown_flag_gives_nonzero_exit() {
    let out = Command::new(bin())
        .args(["simulate", "--bogus-flag"])
        .output()
        .unwrap();
    assert!(!out.status.success());
}

#[test]
fn eval_on_identical_volumes_is_perfect() {
    let tmp = tempfile::tempdir().unwrap();
    let scene_path = small_scene(tmp.path());
    let sim = tmp.path().join("sim");
    run(&[
        "simulate",
        "--scene",
        scene_path.to_str().unwrap(),
        "--out",
        sim.to_str().unwrap(),
        "--seed",
        "1",
    ]);
    let gt = sim.join("gt.vol");
    let out = Command::new(bin())
        .args(["eval", "--pred", gt.to_str().unwrap(), "--gt", gt.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("semantic_accuracy = 1.000000000"));
    assert!(text.contains("free_space_accuracy = 1.000000000"));
}
