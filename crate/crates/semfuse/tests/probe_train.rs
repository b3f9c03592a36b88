//! Scratch criterion-5 rehearsal (removed before final).
use semfuse::features::{contaminated_voxels, extract_feature_volume};
use semfuse::fusion::*;
use semfuse::pipeline::metrics::*;
use semfuse::simdata::*;
use semfuse::training::*;
use semfuse::varsolver::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

fn conf_ratio(b: &SceneBundle, state: &TrainState) -> f64 {
    let conf = state.confidences(1, &b.assets.features[1]).unwrap();
    let contaminated =
        contaminated_voxels(&b.views[1], &b.masks[1], b.spec, b.trunc).unwrap();
    let (mut mc, mut nc, mut ml, mut nl) = (0.0, 0.0, 0.0, 0.0);
    for v in 0..b.spec.n_voxels() {
        if b.assets.features[1].count[v] == 0.0 { continue; }
        if contaminated[v] { mc += conf.conf[v]; nc += 1.0; } else { ml += conf.conf[v]; nl += 1.0; }
    }
    (mc / nc) / (ml / nl)
}

struct SceneBundle {
    assets: SceneAssets,
    views: Vec<semfuse::imagery::SensorViews>,
    masks: Vec<Vec<Vec<bool>>>,
    spec: semfuse::geometry::VoxelGridSpec,
    trunc: f64,
}

fn build(seed: u64, run_seed: u64, params: &RoomParams) -> SceneBundle {
    let setup = sample_scene_setup(seed, params);
    let spec = setup.grid().unwrap();
    let intr = setup.intrinsics().unwrap();
    let gt = setup.scene.ground_truth(spec).unwrap();
    let poses = generate_trajectory(&setup.scene, setup.n_views, setup.trajectory_seed).unwrap();
    let labels = setup.scene.label_set().unwrap();
    let mut datacosts = Vec::new();
    let mut features = Vec::new();
    let mut views_all = Vec::new();
    let mut masks_all = Vec::new();
    for (si, sensor) in setup.sensors.iter().enumerate() {
        let cap_seed = run_seed ^ (seed * 131) ^ (si as u64 * 7919);
        let sensor_poses = setup.sensor_poses(&poses, si);
        let (views, masks) =
            capture_sensor(&setup.scene, &intr, &sensor_poses, sensor, cap_seed).unwrap();
        let mut dc = SemanticDatacost::zeros(spec, labels.clone());
        for v in &views.views {
            accumulate_semantic_datacost(&mut dc, &v.depth, &v.semantics, &intr, &v.pose, &setup.fusion).unwrap();
        }
        features.push(extract_feature_volume(&views, spec, setup.fusion.trunc).unwrap());
        datacosts.push(dc);
        views_all.push(views);
        masks_all.push(masks);
    }
    SceneBundle {
        assets: SceneAssets { datacosts, features, gt },
        views: views_all,
        masks: masks_all,
        spec,
        trunc: setup.fusion.trunc,
    }
}

fn eval_sa(bundle: &SceneBundle, state: &TrainState, uniform: bool, iters: usize) -> (f64, f64) {
    let confs: Vec<ConfidenceVolume> = if uniform {
        (0..2).map(|_| ConfidenceVolume::uniform(bundle.spec, 1.0)).collect()
    } else {
        (0..2).map(|s| state.confidences(s, &bundle.assets.features[s]).unwrap()).collect()
    };
    let combined = combine_datacosts(&bundle.assets.datacosts, &confs).unwrap();
    let w = state.regularizer();
    let cfg = SolverConfig { iterations: iters, levels: 1, constraint_tol: 1e-2 };
    let u = solve(&combined, &w, &cfg).unwrap();
    let labels = extract_labels(&u);
    (
        semantic_accuracy(&labels, &bundle.assets.gt).unwrap().unwrap(),
        free_space_accuracy(&labels, &bundle.assets.gt).unwrap().unwrap(),
    )
}

#[test]
fn probe_training_protocol() {
    let params = RoomParams::default();
    let run_seed = 1u64;
    let t0 = Instant::now();
    let train_bundles: Vec<SceneBundle> = (1..=4).map(|s| build(s, run_seed, &params)).collect();
    let held_out: Vec<SceneBundle> = (5..=6).map(|s| build(s, run_seed, &params)).collect();
    let held_out = &held_out;
    println!("assets: {:?}", t0.elapsed());

    let cfg_full = TrainingConfig {
        learning_rate: 5e-3,
        batch_size: 4,
        crop_dim: 24,
        lambda_f: 1.5,
        epochs: 200,
        seed: run_seed,
        solver_iterations: 10,
        eps_log: 1e-7,
        batches_per_epoch: 4,
        freeze_confidence: false,
        learn_step_sizes: true,
        w_init_tv: 0.1,
        w_init_noise: 0.01,
    };
    let train_assets: Vec<SceneAssets> = train_bundles.iter().map(|b| b.assets.clone()).collect();
    let feature_dims: Vec<usize> = train_assets[0].features.iter().map(|f| f.dim).collect();
    let names: Vec<String> = train_assets[0].features.iter().map(|f| f.sensor_name.clone()).collect();

    let train_run = |cfg: &TrainingConfig| -> TrainState {
        let mut state = TrainState::init(&feature_dims, &names, 6, cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let t = Instant::now();
        let mut first = None;
        let mut last = None;
        for e in 0..cfg.epochs {
            let s = train_epoch(&train_assets, &mut state, cfg, &mut rng).unwrap();
            if e == 0 { first = Some(s); }
            if (e + 1) % 25 == 0 {
                let zeros = vec![0.0; feature_dims[1]];
                let c1 = semfuse::confidence::forward(&state.mlps[1], &zeros).unwrap();
                let c0 = semfuse::confidence::forward(&state.mlps[0], &vec![0.0; feature_dims[0]]).unwrap();
                let ratio = if cfg.freeze_confidence { 1.0 } else { conf_ratio(&held_out[0], &state) };
                println!("  epoch {}: loss {:.4} c_clean(0)={:.3} c_noisy(0)={:.3} ratio={:.3} [{:?}]", e + 1, s.loss, c0, c1, ratio, t.elapsed());
            }
            last = Some(s);
        }
        println!(
            "train frozen={} took {:?}; loss {:.4} -> {:.4} (Ls {:.4}->{:.4}, Lf {:.5}->{:.5}), sigma {:.4}, tau {:.4}",
            cfg.freeze_confidence,
            t.elapsed(),
            first.unwrap().loss, last.unwrap().loss,
            first.unwrap().loss_s, last.unwrap().loss_s,
            first.unwrap().loss_f, last.unwrap().loss_f,
            state.log_sigma.exp(), state.log_tau.exp(),
        );
        state
    };

    let full = train_run(&cfg_full);
    let frozen = train_run(&TrainingConfig { freeze_confidence: true, ..cfg_full.clone() });

    // Confidence at the zero feature vector (unevidenced voxels).
    for (s, name) in names.iter().enumerate() {
        let zeros = vec![0.0; feature_dims[s]];
        let c = semfuse::confidence::forward(&full.mlps[s], &zeros).unwrap();
        println!("c_{name}(0-features) = {c:.4}");
    }

    for iters in [10usize, 50] {
        let mut sa_l = 0.0;
        let mut sa_f = 0.0;
        for b in held_out.iter() {
            let (l, _) = eval_sa(b, &full, false, iters);
            let (f, _) = eval_sa(b, &frozen, true, iters);
            sa_l += l / held_out.len() as f64;
            sa_f += f / held_out.len() as f64;
        }
        println!("K={iters}: held-out SA learned {sa_l:.4} vs frozen {sa_f:.4} (gap {:+.4})", sa_l - sa_f);
    }

    // Criterion (b): noisy-sensor confidence at contaminated vs clean voxels.
    let mut mean_cont = 0.0;
    let mut mean_clean = 0.0;
    let mut n_cont = 0.0;
    let mut n_clean = 0.0;
    for b in held_out.iter() {
        let conf = full.confidences(1, &b.assets.features[1]).unwrap();
        let contaminated = contaminated_voxels(&b.views[1], &b.masks[1], b.spec, b.trunc).unwrap();
        for v in 0..b.spec.n_voxels() {
            if b.assets.features[1].count[v] == 0.0 { continue; }
            if contaminated[v] {
                mean_cont += conf.conf[v];
                n_cont += 1.0;
            } else {
                mean_clean += conf.conf[v];
                n_clean += 1.0;
            }
        }
    }
    mean_cont /= n_cont;
    mean_clean /= n_clean;
    println!(
        "noisy sensor: conf contaminated {mean_cont:.4} (n={n_cont}), clean {mean_clean:.4} (n={n_clean}), ratio {:.3}",
        mean_cont / mean_clean
    );
    println!("total: {:?}", t0.elapsed());
}
