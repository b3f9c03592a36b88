//! Implementations behind the CLI subcommands; callable as a library.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::features::extract_feature_volume;
use crate::fusion::{
    accumulate_semantic_datacost, fuse_weighted, integrate_depth_map, ConfidenceVolume,
    SemanticDatacost, TsdfVolume,
};
use crate::simdata::{capture_sensor, generate_trajectory, SceneSetup};
use crate::training::{
    confidence_volume, train_epoch, EpochStats, GroundTruthVolume, SceneAssets, TrainState,
    TrainingConfig,
};
use crate::varsolver::{extract_labels, solve, SolverConfig};

use super::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use super::metrics::evaluate;
use super::ply::{export_labels_ply, export_tsdf_ply};
use super::scene_file::{load_scene, load_train_file};
use super::views_file::{load_views, save_views};
use super::volume_file::{load_volume, save_volume, VolumeFile, VolumeKind};

fn sensor_capture_seed(base: u64, sensor_idx: usize) -> u64 {
    base ^ (sensor_idx as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

/// Renders ground truth and per-sensor view bundles into `out_dir`.
pub fn simulate(scene_path: &Path, out_dir: &Path, seed: u64) -> Result<()> {
    let setup = load_scene(scene_path)?;
    fs::create_dir_all(out_dir)?;
    // The scene file travels with the artifacts byte-for-byte.
    fs::copy(scene_path, out_dir.join("scene.toml"))?;

    let spec = setup.grid()?;
    let gt = setup.scene.ground_truth(spec)?;
    save_volume(
        &out_dir.join("gt.vol"),
        &VolumeFile::from_label_grid(&gt.gt, spec, setup.scene.labels.clone())?,
    )?;

    let intr = setup.intrinsics()?;
    let poses = generate_trajectory(&setup.scene, setup.n_views, setup.trajectory_seed)?;
    for (si, sensor) in setup.sensors.iter().enumerate() {
        let sensor_poses = setup.sensor_poses(&poses, si);
        let (views, _masks) = capture_sensor(
            &setup.scene,
            &intr,
            &sensor_poses,
            sensor,
            sensor_capture_seed(seed, si),
        )?;
        save_views(&out_dir.join(format!("views_{}.svw", sensor.name)), &views)?;
    }
    Ok(())
}

/// Integrates the simulated views into per-sensor TSDFs, datacosts and
/// feature volumes, plus a uniform-confidence fused TSDF.
pub fn fuse(in_dir: &Path, out_dir: &Path) -> Result<()> {
    let setup = load_scene(&in_dir.join("scene.toml"))?;
    fs::create_dir_all(out_dir)?;
    if out_dir != in_dir {
        fs::copy(in_dir.join("scene.toml"), out_dir.join("scene.toml"))?;
        if in_dir.join("gt.vol").exists() {
            fs::copy(in_dir.join("gt.vol"), out_dir.join("gt.vol"))?;
        }
    }
    let spec = setup.grid()?;
    let labels = setup.scene.label_set()?;
    let params = setup.fusion;

    let mut tsdfs = Vec::new();
    for sensor in &setup.sensors {
        let views = load_views(&in_dir.join(format!("views_{}.svw", sensor.name)))?;
        let mut tsdf = TsdfVolume::new(spec, params.trunc)?;
        let mut datacost = SemanticDatacost::zeros(spec, labels.clone());
        for view in &views.views {
            integrate_depth_map(&mut tsdf, &view.depth, &views.intrinsics, &view.pose)?;
            accumulate_semantic_datacost(
                &mut datacost,
                &view.depth,
                &view.semantics,
                &views.intrinsics,
                &view.pose,
                &params,
            )?;
        }
        let features = extract_feature_volume(&views, spec, params.trunc)?;
        save_volume(
            &out_dir.join(format!("tsdf_{}.vol", sensor.name)),
            &VolumeFile::from_tsdf(&tsdf)?,
        )?;
        save_volume(
            &out_dir.join(format!("datacost_{}.vol", sensor.name)),
            &VolumeFile::from_datacost(&datacost)?,
        )?;
        save_volume(
            &out_dir.join(format!("features_{}.vol", sensor.name)),
            &VolumeFile::from_features(&features)?,
        )?;
        tsdfs.push(tsdf);
    }
    let confs: Vec<ConfidenceVolume> = tsdfs
        .iter()
        .map(|_| ConfidenceVolume::uniform(spec, 1.0))
        .collect();
    let fused = fuse_weighted(&tsdfs, &confs)?;
    save_volume(
        &out_dir.join("fused_tsdf_uniform.vol"),
        &VolumeFile::from_tsdf(&fused)?,
    )?;
    Ok(())
}

/// Loads the fused artifacts of one scene directory.
pub fn load_scene_assets(dir: &Path) -> Result<(SceneSetup, SceneAssets)> {
    let setup = load_scene(&dir.join("scene.toml"))?;
    let labels = setup.scene.label_set()?;
    let gt_file = load_volume(&dir.join("gt.vol"))?;
    let gt = GroundTruthVolume {
        spec: gt_file.spec,
        labels: labels.clone(),
        gt: gt_file.to_label_grid()?,
    };
    let mut datacosts = Vec::new();
    let mut features = Vec::new();
    for sensor in &setup.sensors {
        let dc = load_volume(&dir.join(format!("datacost_{}.vol", sensor.name)))?;
        datacosts.push(dc.to_datacost()?);
        let fv = load_volume(&dir.join(format!("features_{}.vol", sensor.name)))?;
        features.push(fv.to_features()?);
    }
    Ok((
        setup,
        SceneAssets {
            datacosts,
            features,
            gt,
        },
    ))
}

/// Trains on the fused scene directories listed in the config file and
/// writes `checkpoint.json` plus `loss_curve.txt`.
pub fn train(
    config_path: &Path,
    out_dir: &Path,
    seed_override: Option<u64>,
    epochs_override: Option<usize>,
) -> Result<Vec<EpochStats>> {
    let tf = load_train_file(config_path)?;
    let mut cfg: TrainingConfig = tf.to_config();
    if let Some(s) = seed_override {
        cfg.seed = s;
    }
    if let Some(e) = epochs_override {
        cfg.epochs = e;
    }
    if tf.scenes.is_empty() {
        return Err(Error::contract("training config lists no scenes"));
    }
    let base = config_path.parent().unwrap_or(Path::new("."));
    let mut assets = Vec::new();
    let mut setups = Vec::new();
    for s in &tf.scenes {
        let dir = if s.is_absolute() {
            s.clone()
        } else {
            base.join(s)
        };
        let (setup, a) = load_scene_assets(&dir)?;
        setups.push(setup);
        assets.push(a);
    }
    let sensor_names: Vec<String> = setups[0].sensors.iter().map(|s| s.name.clone()).collect();
    for setup in &setups {
        let names: Vec<String> = setup.sensors.iter().map(|s| s.name.clone()).collect();
        if names != sensor_names {
            return Err(Error::contract("scenes disagree on sensor sets"));
        }
    }
    let feature_dims: Vec<usize> = assets[0].features.iter().map(|f| f.dim).collect();
    let n_labels = assets[0].gt.labels.len();
    let mut state = TrainState::init(&feature_dims, &sensor_names, n_labels, &cfg)?;

    fs::create_dir_all(out_dir)?;
    let mut curve = String::from("# epoch loss loss_s loss_f\n");
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut stats = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        let s = train_epoch(&assets, &mut state, &cfg, &mut rng)?;
        curve.push_str(&format!(
            "{} {:.12e} {:.12e} {:.12e}\n",
            s.epoch, s.loss, s.loss_s, s.loss_f
        ));
        stats.push(s);
    }
    let label_names = assets[0].gt.labels.names().to_vec();
    save_checkpoint(
        &out_dir.join("checkpoint.json"),
        &Checkpoint::from_state(&state, label_names),
    )?;
    fs::write(out_dir.join("loss_curve.txt"), curve)?;
    Ok(stats)
}

/// Combines per-sensor datacosts under learned (or uniform) confidences,
/// runs the solver and writes the argmax labeling.
#[allow(clippy::too_many_arguments)]
pub fn reconstruct(
    in_dir: &Path,
    checkpoint_path: Option<&Path>,
    out_path: &Path,
    iterations: usize,
    levels: usize,
    dump_confidence: bool,
) -> Result<()> {
    let (setup, assets) = load_scene_assets(in_dir)?;
    let spec = assets.gt.spec;
    let n_sensors = assets.datacosts.len();

    let (confs, w) = match checkpoint_path {
        Some(p) => {
            let ckpt = load_checkpoint(p)?;
            let state = ckpt.into_state();
            if state.mlps.len() != n_sensors {
                return Err(Error::contract(format!(
                    "checkpoint has {} sensors, scene has {n_sensors}",
                    state.mlps.len()
                )));
            }
            let mut confs = Vec::with_capacity(n_sensors);
            for (s, fv) in assets.features.iter().enumerate() {
                confs.push(confidence_volume(&state.mlps[s], fv)?);
            }
            (confs, state.regularizer())
        }
        None => {
            let confs = (0..n_sensors)
                .map(|_| ConfidenceVolume::uniform(spec, 1.0))
                .collect();
            let mut w = crate::varsolver::RegularizerW::tv(assets.gt.labels.len(), 0.1);
            w.sigma = 0.1;
            w.tau = 0.1;
            (confs, w)
        }
    };

    if dump_confidence {
        let parent = out_path.parent().unwrap_or(Path::new("."));
        for (sensor, conf) in setup.sensors.iter().zip(confs.iter()) {
            save_volume(
                &parent.join(format!("confidence_{}.vol", sensor.name)),
                &VolumeFile::from_confidence(conf)?,
            )?;
        }
    }

    let combined = crate::fusion::combine_datacosts(&assets.datacosts, &confs)?;
    let cfg = SolverConfig {
        iterations,
        levels,
        constraint_tol: 1e-2,
    };
    let u = solve(&combined, &w, &cfg)?;
    let labels = extract_labels(&u);
    save_volume(
        out_path,
        &VolumeFile::from_label_grid(&labels, spec, assets.gt.labels.names().to_vec())?,
    )?;
    Ok(())
}

/// Compares a predicted labeling against ground truth and writes (or
/// returns) the metrics report.
pub fn eval(pred_path: &Path, gt_path: &Path, out_path: Option<&Path>) -> Result<String> {
    let pred_file = load_volume(pred_path)?;
    let gt_file = load_volume(gt_path)?;
    if pred_file.spec != gt_file.spec {
        return Err(Error::contract("prediction and ground truth grids differ"));
    }
    let labels = crate::fusion::LabelSet::new(if gt_file.labels.is_empty() {
        pred_file.labels.clone()
    } else {
        gt_file.labels.clone()
    })?;
    let gt = GroundTruthVolume {
        spec: gt_file.spec,
        labels,
        gt: gt_file.to_label_grid()?,
    };
    let pred = pred_file.to_label_grid()?;
    let report = evaluate(&pred, &gt)?;
    let text = report.to_text();
    if let Some(p) = out_path {
        fs::write(p, &text)?;
    }
    Ok(text)
}

/// Exports a label or TSDF volume as colored cubes in ASCII PLY.
pub fn export(in_path: &Path, out_path: &Path) -> Result<()> {
    let vf = load_volume(in_path)?;
    let mut buf = Vec::new();
    match vf.kind {
        VolumeKind::Labels => {
            let labels = vf.to_label_grid()?;
            export_labels_ply(&mut buf, &labels, &vf.spec)?;
        }
        VolumeKind::Tsdf => {
            let tsdf = vf.to_tsdf(0.3)?;
            export_tsdf_ply(&mut buf, &tsdf)?;
        }
        _ => {
            return Err(Error::contract(
                "only label and tsdf volumes can be exported",
            ))
        }
    }
    let mut f = fs::File::create(out_path)?;
    f.write_all(&buf)?;
    Ok(())
}

/// Convenience used by tests: full scene directory path list.
pub fn scene_dirs(paths: &[&str]) -> Vec<PathBuf> {
    paths.iter().map(PathBuf::from).collect()
}
