//! End-to-end training: cross-entropy losses over ground-truth voxels,
//! crop/rotation/flip augmentation, Adam, and the gradient chain from the
//! loss through the unrolled solver into the confidence networks, the
//! regularizer kernels and the step sizes.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use rand::RngExt;
use rand_chacha::ChaCha8Rng;

use crate::confidence::{self, MlpGradients, MlpParams, MlpScratch};
use crate::error::{Error, Result};
use crate::features::FeatureVolume;
use crate::fusion::{ConfidenceVolume, LabelSet, SemanticDatacost, FREE_LABEL};
use crate::geometry::VoxelGridSpec;
use crate::imagery::UNKNOWN_LABEL;
use crate::varsolver::{self, LabelVolume, RegularizerW};

/// Discrete per-voxel ground truth; `UNKNOWN_LABEL` voxels are excluded from
/// every loss and metric.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruthVolume {
    pub spec: VoxelGridSpec,
    pub labels: LabelSet,
    pub gt: Vec<u8>,
}

/// Training hyperparameters.
#[derive(Clone, Debug)]
pub struct TrainingConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub crop_dim: usize,
    pub lambda_f: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Unrolled solver iterations during training.
    pub solver_iterations: usize,
    pub eps_log: f64,
    /// Batches drawn per epoch; scenes are cycled so one epoch still visits
    /// every scene.
    pub batches_per_epoch: usize,
    /// Train with confidences frozen at 1 (the uniform-fusion baseline).
    pub freeze_confidence: bool,
    /// Learn sigma/tau through their log parameterization.
    pub learn_step_sizes: bool,
    /// TV weight of the regularizer initialization.
    pub w_init_tv: f64,
    /// Std of the Gaussian perturbation added to the initial kernels.
    pub w_init_noise: f64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            batch_size: 4,
            crop_dim: 24,
            lambda_f: 1.5,
            epochs: 1000,
            seed: 0,
            solver_iterations: 10,
            eps_log: 1e-7,
            batches_per_epoch: 1,
            freeze_confidence: false,
            learn_step_sizes: true,
            w_init_tv: 0.1,
            w_init_noise: 0.01,
        }
    }
}

/// Categorical cross entropy split into occupied (`L_s`) and free-space
/// (`L_f`) parts: `L = L_s + lambda_f * L_f`. Each part is the mean over its
/// voxel set; an empty set contributes 0.
pub fn loss(
    u: &LabelVolume,
    gt: &GroundTruthVolume,
    lambda_f: f64,
    eps_log: f64,
) -> Result<(f64, f64, f64)> {
    if !u.spec.same_grid(&gt.spec) || u.labels != gt.labels {
        return Err(Error::contract("prediction does not match ground truth"));
    }
    let n = u.spec.n_voxels();
    let mut sum_s = 0.0;
    let mut n_s = 0usize;
    let mut sum_f = 0.0;
    let mut n_f = 0usize;
    for v in 0..n {
        let g = gt.gt[v];
        if g == UNKNOWN_LABEL {
            continue;
        }
        if g as usize == FREE_LABEL {
            sum_f += -(u.u[FREE_LABEL * n + v].max(eps_log)).ln();
            n_f += 1;
        } else {
            sum_s += -(u.u[g as usize * n + v].max(eps_log)).ln();
            n_s += 1;
        }
    }
    let l_s = if n_s > 0 { sum_s / n_s as f64 } else { 0.0 };
    let l_f = if n_f > 0 { sum_f / n_f as f64 } else { 0.0 };
    Ok((l_s + lambda_f * l_f, l_s, l_f))
}

/// Gradient of [`loss`] with respect to `u`, zero where the log clamp is
/// active and at unknown voxels.
pub fn loss_backward(
    u: &LabelVolume,
    gt: &GroundTruthVolume,
    lambda_f: f64,
    eps_log: f64,
) -> Result<Vec<f64>> {
    if !u.spec.same_grid(&gt.spec) || u.labels != gt.labels {
        return Err(Error::contract("prediction does not match ground truth"));
    }
    let n = u.spec.n_voxels();
    let n_s = gt
        .gt
        .iter()
        .filter(|&&g| g != UNKNOWN_LABEL && g as usize != FREE_LABEL)
        .count();
    let n_f = gt
        .gt
        .iter()
        .filter(|&&g| g as usize == FREE_LABEL)
        .count();
    let mut grad = vec![0.0; u.u.len()];
    for v in 0..n {
        let g = gt.gt[v];
        if g == UNKNOWN_LABEL {
            continue;
        }
        let (label, scale, count) = if g as usize == FREE_LABEL {
            (FREE_LABEL, lambda_f, n_f)
        } else {
            (g as usize, 1.0, n_s)
        };
        if count == 0 {
            continue;
        }
        let val = u.u[label * n + v];
        if val > eps_log {
            grad[label * n + v] = -scale / (count as f64 * val);
        }
    }
    Ok(grad)
}

// ---------------------------------------------------------------------------
// Crop augmentation
// ---------------------------------------------------------------------------

/// Crop corner plus the in-plane symmetry applied to it: a rotation about z
/// by `rot_k` quarter turns followed by optional x/y flips.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CropTransform {
    pub corner: [usize; 3],
    pub dim: usize,
    pub rot_k: u8,
    pub flip_x: bool,
    pub flip_y: bool,
}

impl CropTransform {
    pub fn identity(dim: usize) -> Self {
        Self {
            corner: [0, 0, 0],
            dim,
            rot_k: 0,
            flip_x: false,
            flip_y: false,
        }
    }

    /// Source voxel (within the crop cube, before adding the corner) that
    /// lands at output position `(x, y, z)`.
    #[inline]
    pub fn source_of(&self, x: usize, y: usize, z: usize) -> [usize; 3] {
        let d = self.dim;
        let (mut sx, mut sy) = (x, y);
        if self.flip_x {
            sx = d - 1 - sx;
        }
        if self.flip_y {
            sy = d - 1 - sy;
        }
        // Inverse rotation: undo rot_k quarter turns (x, y) -> (y, d-1-x).
        for _ in 0..(4 - self.rot_k % 4) % 4 {
            let (nx, ny) = (sy, d - 1 - sx);
            sx = nx;
            sy = ny;
        }
        [sx, sy, z]
    }
}

/// Uniform corner + random z-rotation + independent x/y flips.
pub fn sample_crop_transform(
    dims: [usize; 3],
    crop_dim: usize,
    rng: &mut ChaCha8Rng,
) -> Result<CropTransform> {
    if dims.iter().any(|&d| d < crop_dim) {
        return Err(Error::contract(format!(
            "crop dim {crop_dim} exceeds grid dims {dims:?}"
        )));
    }
    let corner = [
        rng.random_range(0..=dims[0] - crop_dim),
        rng.random_range(0..=dims[1] - crop_dim),
        rng.random_range(0..=dims[2] - crop_dim),
    ];
    Ok(CropTransform {
        corner,
        dim: crop_dim,
        rot_k: rng.random_range(0..4u8),
        flip_x: rng.random_bool(0.5),
        flip_y: rng.random_bool(0.5),
    })
}

fn crop_spec(src: &VoxelGridSpec, t: &CropTransform) -> VoxelGridSpec {
    // The crop lives on its own grid; world placement is irrelevant for
    // training, so keep the source origin.
    VoxelGridSpec::new(src.origin, src.voxel_size, [t.dim, t.dim, t.dim]).expect("valid crop")
}

/// Gathers channel planes under the transform.
pub fn crop_planes(
    src: &[f64],
    spec: &VoxelGridSpec,
    channels: usize,
    t: &CropTransform,
) -> Vec<f64> {
    let n = spec.n_voxels();
    let d = t.dim;
    let cn = d * d * d;
    let mut out = vec![0.0; cn * channels];
    for c in 0..channels {
        let plane = &src[c * n..(c + 1) * n];
        let dst = &mut out[c * cn..(c + 1) * cn];
        for z in 0..d {
            for y in 0..d {
                for x in 0..d {
                    let s = t.source_of(x, y, z);
                    let sv = spec.linear_index([
                        t.corner[0] + s[0],
                        t.corner[1] + s[1],
                        t.corner[2] + s[2],
                    ]);
                    dst[(z * d + y) * d + x] = plane[sv];
                }
            }
        }
    }
    out
}

fn crop_voxel_major(
    src: &[f64],
    spec: &VoxelGridSpec,
    per_voxel: usize,
    t: &CropTransform,
) -> Vec<f64> {
    let d = t.dim;
    let cn = d * d * d;
    let mut out = vec![0.0; cn * per_voxel];
    for z in 0..d {
        for y in 0..d {
            for x in 0..d {
                let s = t.source_of(x, y, z);
                let sv = spec.linear_index([
                    t.corner[0] + s[0],
                    t.corner[1] + s[1],
                    t.corner[2] + s[2],
                ]);
                let dv = (z * d + y) * d + x;
                out[dv * per_voxel..(dv + 1) * per_voxel]
                    .copy_from_slice(&src[sv * per_voxel..(sv + 1) * per_voxel]);
            }
        }
    }
    out
}

fn crop_labels_u8(src: &[u8], spec: &VoxelGridSpec, t: &CropTransform) -> Vec<u8> {
    let d = t.dim;
    let mut out = vec![0u8; d * d * d];
    for z in 0..d {
        for y in 0..d {
            for x in 0..d {
                let s = t.source_of(x, y, z);
                let sv = spec.linear_index([
                    t.corner[0] + s[0],
                    t.corner[1] + s[1],
                    t.corner[2] + s[2],
                ]);
                out[(z * d + y) * d + x] = src[sv];
            }
        }
    }
    out
}

/// Everything the trainer needs from one scene, precomputed once.
#[derive(Clone, Debug)]
pub struct SceneAssets {
    pub datacosts: Vec<SemanticDatacost>,
    pub features: Vec<FeatureVolume>,
    pub gt: GroundTruthVolume,
}

/// One augmented training sample: per-sensor cropped datacosts and features
/// plus the cropped ground truth.
pub struct CropSample {
    pub spec: VoxelGridSpec,
    pub labels: LabelSet,
    pub datacosts: Vec<Vec<f64>>,
    pub features: Vec<Vec<f64>>,
    pub counts: Vec<Vec<f64>>,
    pub gt: Vec<u8>,
}

/// Applies one transform consistently to all volumes of a scene.
pub fn sample_crop(assets: &SceneAssets, t: &CropTransform) -> CropSample {
    let spec = assets.gt.spec;
    let labels = assets.gt.labels.clone();
    let n_labels = labels.len();
    CropSample {
        spec: crop_spec(&spec, t),
        labels,
        datacosts: assets
            .datacosts
            .iter()
            .map(|dc| crop_planes(&dc.cost, &spec, n_labels, t))
            .collect(),
        features: assets
            .features
            .iter()
            .map(|fv| crop_voxel_major(&fv.data, &spec, fv.dim, t))
            .collect(),
        counts: assets
            .features
            .iter()
            .map(|fv| crop_planes(&fv.count, &spec, 1, t))
            .collect(),
        gt: crop_labels_u8(&assets.gt.gt, &spec, t),
    }
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// First/second-moment buffers, one pair per parameter tensor.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: usize,
}

impl AdamState {
    pub fn for_shapes(shapes: &[usize]) -> Self {
        Self {
            m: shapes.iter().map(|&s| vec![0.0; s]).collect(),
            v: shapes.iter().map(|&s| vec![0.0; s]).collect(),
            step: 0,
        }
    }
}

/// One bias-corrected Adam update over a list of parameter tensors.
pub fn adam_step(
    params: &mut [&mut [f64]],
    grads: &[&[f64]],
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::contract("parameter/gradient/moment count mismatch"));
    }
    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - ADAM_BETA1.powf(t);
    let bc2 = 1.0 - ADAM_BETA2.powf(t);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads.iter())
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        if p.len() != g.len() || p.len() != m.len() {
            return Err(Error::contract("parameter tensor shape mismatch"));
        }
        for i in 0..p.len() {
            m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g[i];
            v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
            let mh = m[i] / bc1;
            let vh = v[i] / bc2;
            p[i] -= lr * mh / (vh.sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Trainable state and the epoch loop
// ---------------------------------------------------------------------------

/// All trainables plus the optimizer state.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub mlps: Vec<MlpParams>,
    /// Kernels of the learned regularizer; sigma/tau are derived from the
    /// log parameters below before every solve.
    pub w: RegularizerW,
    pub log_sigma: f64,
    pub log_tau: f64,
    pub adam: AdamState,
    pub epoch: usize,
}

impl TrainState {
    /// Fresh state: per-sensor confidence nets (He-initialized, final layer
    /// zero/one) and a TV-plus-noise regularizer.
    pub fn init(
        feature_dims: &[usize],
        sensor_names: &[String],
        n_labels: usize,
        cfg: &TrainingConfig,
    ) -> Result<Self> {
        if feature_dims.len() != sensor_names.len() {
            return Err(Error::contract("sensor name/dim count mismatch"));
        }
        let mut mlps = Vec::with_capacity(feature_dims.len());
        for (i, (&dim, name)) in feature_dims.iter().zip(sensor_names.iter()).enumerate() {
            let widths = MlpParams::default_widths(dim);
            mlps.push(confidence::init_params(
                cfg.seed.wrapping_add(i as u64 + 1),
                &widths,
                name,
            )?);
        }
        let mut w =
            RegularizerW::tv_with_noise(n_labels, cfg.w_init_tv, cfg.w_init_noise, cfg.seed);
        w.sigma = 0.1;
        w.tau = 0.1;
        let shapes = Self::tensor_shapes(&mlps, &w);
        Ok(Self {
            mlps,
            w,
            log_sigma: 0.1f64.ln(),
            log_tau: 0.1f64.ln(),
            adam: AdamState::for_shapes(&shapes),
            epoch: 0,
        })
    }

    fn tensor_shapes(mlps: &[MlpParams], w: &RegularizerW) -> Vec<usize> {
        let mut shapes = Vec::new();
        for m in mlps {
            for wl in &m.weights {
                shapes.push(wl.len());
            }
            for b in &m.biases {
                shapes.push(b.len());
            }
        }
        shapes.push(w.kernels.len());
        shapes.push(2); // log sigma, log tau
        shapes
    }

    /// Regularizer with the current step sizes materialized.
    pub fn regularizer(&self) -> RegularizerW {
        let mut w = self.w.clone();
        w.sigma = self.log_sigma.exp();
        w.tau = self.log_tau.exp();
        w
    }

    /// Per-voxel confidences of one sensor over a feature volume.
    pub fn confidences(&self, sensor: usize, features: &FeatureVolume) -> Result<ConfidenceVolume> {
        confidence_volume(&self.mlps[sensor], features)
    }
}

/// Evaluates one confidence network over a whole feature volume.
pub fn confidence_volume(mlp: &MlpParams, features: &FeatureVolume) -> Result<ConfidenceVolume> {
    if mlp.input_dim() != features.dim {
        return Err(Error::contract(format!(
            "network expects {} features, volume has {}",
            mlp.input_dim(),
            features.dim
        )));
    }
    let n = features.spec.n_voxels();
    let mut conf = vec![0.0; n];
    let dim = features.dim;
    let zero_conf = confidence::forward(mlp, &vec![0.0; dim])?;
    let counts = &features.count;
    conf.par_chunks_mut(2048).enumerate().for_each(|(ci, chunk)| {
        let mut scratch = MlpScratch::for_params(mlp);
        let base = ci * 2048;
        for (i, c) in chunk.iter_mut().enumerate() {
            let v = base + i;
            *c = if counts[v] == 0.0 {
                zero_conf
            } else {
                confidence::forward_scratch(mlp, &features.data[v * dim..(v + 1) * dim], &mut scratch)
            };
        }
    });
    Ok(ConfidenceVolume {
        spec: features.spec,
        conf,
    })
}

/// Gradients of one crop, shaped like the trainables.
pub struct CropGradients {
    pub mlps: Vec<MlpGradients>,
    pub kernels: Vec<f64>,
    pub sigma: f64,
    pub tau: f64,
}

/// Forward + backward of one augmented crop. Returns the loss triple and
/// the gradients of all trainables.
pub fn crop_forward_backward(
    sample: &CropSample,
    state: &TrainState,
    cfg: &TrainingConfig,
) -> Result<((f64, f64, f64), CropGradients)> {
    let n = sample.spec.n_voxels();
    let n_labels = sample.labels.len();
    let n_sensors = sample.datacosts.len();
    let w = state.regularizer();

    // Confidence forward.
    let mut confs: Vec<Vec<f64>> = Vec::with_capacity(n_sensors);
    for s in 0..n_sensors {
        if cfg.freeze_confidence {
            confs.push(vec![1.0; n]);
        } else {
            let mlp = &state.mlps[s];
            let dim = mlp.input_dim();
            let feat = &sample.features[s];
            let counts = &sample.counts[s];
            // Unevidenced voxels all carry the zero feature vector; evaluate
            // it once.
            let zero_conf = confidence::forward(mlp, &vec![0.0; dim])?;
            let mut c = vec![0.0; n];
            c.par_chunks_mut(2048).enumerate().for_each(|(ci, chunk)| {
                let mut scratch = MlpScratch::for_params(mlp);
                let base = ci * 2048;
                for (i, cv) in chunk.iter_mut().enumerate() {
                    let v = base + i;
                    *cv = if counts[v] == 0.0 {
                        zero_conf
                    } else {
                        confidence::forward_scratch(mlp, &feat[v * dim..(v + 1) * dim], &mut scratch)
                    };
                }
            });
            confs.push(c);
        }
    }

    // Combine datacosts.
    let mut combined = SemanticDatacost::zeros(sample.spec, sample.labels.clone());
    for l in 0..n_labels {
        let plane = &mut combined.cost[l * n..(l + 1) * n];
        for s in 0..n_sensors {
            let src = &sample.datacosts[s][l * n..(l + 1) * n];
            let c = &confs[s];
            for v in 0..n {
                plane[v] += c[v] * src[v];
            }
        }
    }

    // Unrolled solve and loss.
    let (u, tape) = varsolver::solve_with_tape(&combined, &w, cfg.solver_iterations)?;
    let gt = GroundTruthVolume {
        spec: sample.spec,
        labels: sample.labels.clone(),
        gt: sample.gt.clone(),
    };
    let (l, l_s, l_f) = loss(&u, &gt, cfg.lambda_f, cfg.eps_log)?;
    if !l.is_finite() {
        return Err(Error::data(format!(
            "non-finite loss (L={l}, L_s={l_s}, L_f={l_f})"
        )));
    }
    let g_u = loss_backward(&u, &gt, cfg.lambda_f, cfg.eps_log)?;
    let solver_grads = varsolver::solve_backward(&tape, &w, &g_u)?;

    // Chain into the confidence networks.
    let mut mlp_grads: Vec<MlpGradients> = state.mlps.iter().map(MlpGradients::zeros_like).collect();
    if !cfg.freeze_confidence {
        for s in 0..n_sensors {
            let mlp = &state.mlps[s];
            let dim = mlp.input_dim();
            let feat = &sample.features[s];
            let counts = &sample.counts[s];
            let dc = &sample.datacosts[s];
            // dL/dc(v) = sum_l dL/dD(l, v) * D_s(l, v). The zero feature
            // vector of unevidenced voxels yields one shared backward pass
            // with the summed upstream (gradients are linear in upstream).
            let chunk = 2048;
            let n_chunks = n.div_ceil(chunk);
            let partials: Vec<(MlpGradients, f64)> = (0..n_chunks)
                .into_par_iter()
                .map(|ci| {
                    let mut grads = MlpGradients::zeros_like(mlp);
                    let mut scratch = MlpScratch::for_params(mlp);
                    let mut zero_upstream = 0.0;
                    let lo = ci * chunk;
                    let hi = (lo + chunk).min(n);
                    for v in lo..hi {
                        let mut upstream = 0.0;
                        for l in 0..n_labels {
                            upstream += solver_grads.d_datacost[l * n + v] * dc[l * n + v];
                        }
                        if upstream == 0.0 {
                            continue;
                        }
                        if counts[v] == 0.0 {
                            zero_upstream += upstream;
                        } else {
                            confidence::backward_accumulate(
                                mlp,
                                &feat[v * dim..(v + 1) * dim],
                                upstream,
                                &mut scratch,
                                &mut grads,
                            );
                        }
                    }
                    (grads, zero_upstream)
                })
                .collect();
            let mut zero_upstream = 0.0;
            for (p, zu) in &partials {
                mlp_grads[s].add_scaled(p, 1.0);
                zero_upstream += zu;
            }
            if zero_upstream != 0.0 {
                let zeros = vec![0.0; dim];
                let mut scratch = MlpScratch::for_params(mlp);
                confidence::backward_accumulate(
                    mlp,
                    &zeros,
                    zero_upstream,
                    &mut scratch,
                    &mut mlp_grads[s],
                );
            }
        }
    }

    Ok((
        (l, l_s, l_f),
        CropGradients {
            mlps: mlp_grads,
            kernels: solver_grads.d_kernels,
            sigma: solver_grads.d_sigma,
            tau: solver_grads.d_tau,
        },
    ))
}

/// Per-epoch statistics for the loss curve.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub loss_s: f64,
    pub loss_f: f64,
}

/// Runs one epoch: `batches_per_epoch` batches of `batch_size` crops with
/// scenes cycled in shuffled order, batch gradients averaged in crop order,
/// one Adam step per batch over every trainable.
pub fn train_epoch(
    scenes: &[SceneAssets],
    state: &mut TrainState,
    cfg: &TrainingConfig,
    rng: &mut ChaCha8Rng,
) -> Result<EpochStats> {
    if scenes.is_empty() {
        return Err(Error::contract("training needs at least one scene"));
    }
    let mut scene_order: Vec<usize> = (0..scenes.len()).collect();
    // Fisher-Yates with the epoch rng.
    for i in (1..scene_order.len()).rev() {
        let j = rng.random_range(0..=i);
        scene_order.swap(i, j);
    }

    let mut sum = (0.0, 0.0, 0.0);
    let mut n_batches = 0;
    for batch in 0..cfg.batches_per_epoch {
        // Crop descriptors come from the epoch rng sequentially; the heavy
        // work then runs in parallel with deterministic, ordered reduction.
        let mut descriptors = Vec::with_capacity(cfg.batch_size);
        for b in 0..cfg.batch_size {
            let scene_idx = scene_order[(batch * cfg.batch_size + b) % scenes.len()];
            let t = sample_crop_transform(scenes[scene_idx].gt.spec.dims, cfg.crop_dim, rng)?;
            descriptors.push((scene_idx, t));
        }
        let results: Vec<Result<((f64, f64, f64), CropGradients)>> = descriptors
            .par_iter()
            .map(|(scene_idx, t)| {
                let sample = sample_crop(&scenes[*scene_idx], t);
                crop_forward_backward(&sample, state, cfg)
            })
            .collect();

        let mut batch_grads: Option<CropGradients> = None;
        let mut batch_loss = (0.0, 0.0, 0.0);
        let scale = 1.0 / cfg.batch_size as f64;
        for r in results {
            let ((l, ls, lf), g) = r?;
            batch_loss.0 += l * scale;
            batch_loss.1 += ls * scale;
            batch_loss.2 += lf * scale;
            match &mut batch_grads {
                None => {
                    let mut g = g;
                    for mg in &mut g.mlps {
                        scale_mlp_grads(mg, scale);
                    }
                    for k in &mut g.kernels {
                        *k *= scale;
                    }
                    g.sigma *= scale;
                    g.tau *= scale;
                    batch_grads = Some(g);
                }
                Some(acc) => {
                    for (a, b) in acc.mlps.iter_mut().zip(g.mlps.iter()) {
                        a.add_scaled(b, scale);
                    }
                    for (a, b) in acc.kernels.iter_mut().zip(g.kernels.iter()) {
                        *a += scale * b;
                    }
                    acc.sigma += scale * g.sigma;
                    acc.tau += scale * g.tau;
                }
            }
        }
        let grads = batch_grads.expect("batch is non-empty");
        apply_adam(state, &grads, cfg)?;
        sum.0 += batch_loss.0;
        sum.1 += batch_loss.1;
        sum.2 += batch_loss.2;
        n_batches += 1;
    }

    state.epoch += 1;
    let inv = 1.0 / n_batches as f64;
    Ok(EpochStats {
        epoch: state.epoch,
        loss: sum.0 * inv,
        loss_s: sum.1 * inv,
        loss_f: sum.2 * inv,
    })
}

fn scale_mlp_grads(g: &mut MlpGradients, s: f64) {
    for w in &mut g.weights {
        for v in w.iter_mut() {
            *v *= s;
        }
    }
    for b in &mut g.biases {
        for v in b.iter_mut() {
            *v *= s;
        }
    }
}

fn apply_adam(state: &mut TrainState, grads: &CropGradients, cfg: &TrainingConfig) -> Result<()> {
    // Chain rule for the log-parameterized step sizes.
    let sigma = state.log_sigma.exp();
    let tau = state.log_tau.exp();
    let g_log = if cfg.learn_step_sizes {
        [grads.sigma * sigma, grads.tau * tau]
    } else {
        [0.0, 0.0]
    };
    let mut log_steps = [state.log_sigma, state.log_tau];

    let mut params: Vec<&mut [f64]> = Vec::new();
    let mut gs: Vec<&[f64]> = Vec::new();
    for (m, g) in state.mlps.iter_mut().zip(grads.mlps.iter()) {
        for (wl, gw) in m.weights.iter_mut().zip(g.weights.iter()) {
            params.push(wl.as_mut_slice());
            gs.push(gw.as_slice());
        }
        for (bl, gb) in m.biases.iter_mut().zip(g.biases.iter()) {
            params.push(bl.as_mut_slice());
            gs.push(gb.as_slice());
        }
    }
    params.push(state.w.kernels.as_mut_slice());
    gs.push(grads.kernels.as_slice());
    params.push(&mut log_steps);
    gs.push(&g_log);

    adam_step(&mut params, &gs, &mut state.adam, cfg.learning_rate)?;
    drop(params);
    state.log_sigma = log_steps[0];
    state.log_tau = log_steps[1];
    Ok(())
}
