//! Per-sensor TSDF integration, confidence-weighted fusion across sensors and
//! per-label evidence volumes for the solver.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{nearest_pixel, project, voxel_center, CameraIntrinsics, Pose, VoxelGridSpec};
use crate::imagery::{DepthMap, LabelImage, UNKNOWN_LABEL};

/// Floor on the summed effective weight below which a fused voxel is
/// declared unobserved; avoids division blow-up when all confidences vanish.
pub const CONFIDENCE_FLOOR: f64 = 1e-6;

/// Ordered semantic label set; index 0 is the free-space label.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelSet {
    names: Vec<String>,
}

/// Index of the free-space label within every [`LabelSet`].
pub const FREE_LABEL: usize = 0;

impl LabelSet {
    pub fn new(names: Vec<String>) -> Result<Self> {
        if names.len() < 2 {
            return Err(Error::contract(format!(
                "a label set needs at least 2 labels (free + one occupied), got {}",
                names.len()
            )));
        }
        Ok(Self { names })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, idx: usize) -> &str {
        &self.names[idx]
    }
}

/// Truncated signed distance volume for a single sensor.
///
/// `values` hold signed distances normalized by the truncation distance and
/// clamped to [-1, 1]; `weights` count integrated observations. Weight 0
/// means unobserved and forces value 0.
#[derive(Clone, Debug, PartialEq)]
pub struct TsdfVolume {
    pub spec: VoxelGridSpec,
    pub values: Vec<f64>,
    pub weights: Vec<f64>,
    pub trunc: f64,
}

impl TsdfVolume {
    pub fn new(spec: VoxelGridSpec, trunc: f64) -> Result<Self> {
        if !(trunc > 0.0) {
            return Err(Error::contract(format!(
                "truncation distance must be positive, got {trunc}"
            )));
        }
        let n = spec.n_voxels();
        Ok(Self {
            spec,
            values: vec![0.0; n],
            weights: vec![0.0; n],
            trunc,
        })
    }
}

/// Per-voxel nonnegative confidence weights of one sensor.
#[derive(Clone, Debug, PartialEq)]
pub struct ConfidenceVolume {
    pub spec: VoxelGridSpec,
    pub conf: Vec<f64>,
}

impl ConfidenceVolume {
    pub fn uniform(spec: VoxelGridSpec, value: f64) -> Self {
        Self {
            spec,
            conf: vec![value; spec.n_voxels()],
        }
    }
}

/// Per-voxel, per-label evidence consumed by the solver. Costs are stored as
/// label-major planes (`cost[label * n_voxels + voxel]`); negative entries
/// favor the label.
#[derive(Clone, Debug, PartialEq)]
pub struct SemanticDatacost {
    pub spec: VoxelGridSpec,
    pub labels: LabelSet,
    pub cost: Vec<f64>,
}

impl SemanticDatacost {
    pub fn zeros(spec: VoxelGridSpec, labels: LabelSet) -> Self {
        let n = spec.n_voxels() * labels.len();
        Self {
            spec,
            labels,
            cost: vec![0.0; n],
        }
    }

    #[inline]
    pub fn at(&self, label: usize, voxel: usize) -> f64 {
        self.cost[label * self.spec.n_voxels() + voxel]
    }

    #[inline]
    pub fn plane(&self, label: usize) -> &[f64] {
        let n = self.spec.n_voxels();
        &self.cost[label * n..(label + 1) * n]
    }
}

/// Integrates one depth map into a per-sensor TSDF with the running-average
/// update. Voxels more than one truncation distance behind the measured
/// surface are left untouched.
pub fn integrate_depth_map(
    vol: &mut TsdfVolume,
    depth: &DepthMap,
    intr: &CameraIntrinsics,
    pose: &Pose,
) -> Result<()> {
    if depth.width != intr.width || depth.height != intr.height {
        return Err(Error::contract(format!(
            "depth map {}x{} does not match intrinsics {}x{}",
            depth.width, depth.height, intr.width, intr.height
        )));
    }
    let spec = vol.spec;
    let trunc = vol.trunc;
    let (nx, ny) = (spec.dims[0], spec.dims[1]);
    let slab = nx * ny;

    vol.values
        .par_chunks_mut(slab)
        .zip(vol.weights.par_chunks_mut(slab))
        .enumerate()
        .for_each(|(z, (values, weights))| {
            for y in 0..ny {
                for x in 0..nx {
                    let center = voxel_center(&spec, [x, y, z]).expect("index in bounds");
                    let Some((pixel, cam_depth)) = project(intr, pose, center) else {
                        continue;
                    };
                    let Some((px, py)) = nearest_pixel(intr, pixel, cam_depth) else {
                        continue;
                    };
                    let Some(d) = depth.get(px, py) else {
                        continue;
                    };
                    let s = d - cam_depth;
                    if s < -trunc {
                        continue; // occluded
                    }
                    let tsdf = (s / trunc).clamp(-1.0, 1.0);
                    let i = x + nx * y;
                    let w = weights[i];
                    values[i] = (values[i] * w + tsdf) / (w + 1.0);
                    weights[i] = w + 1.0;
                }
            }
        });
    Ok(())
}

/// Point-wise weighted average of per-sensor TSDFs.
///
/// The effective weight of sensor `i` at a voxel is its confidence times the
/// binary observation mask (integration weight > 0), so frame counts do not
/// bias the blend. Voxels whose summed weight falls below
/// [`CONFIDENCE_FLOOR`] come out unobserved (value 0, weight 0).
pub fn fuse_weighted(
    volumes: &[TsdfVolume],
    confs: &[ConfidenceVolume],
) -> Result<TsdfVolume> {
    if volumes.is_empty() {
        return Err(Error::contract("fuse_weighted needs at least one sensor"));
    }
    if volumes.len() != confs.len() {
        return Err(Error::contract(format!(
            "{} volumes vs {} confidence volumes",
            volumes.len(),
            confs.len()
        )));
    }
    let spec = volumes[0].spec;
    for v in volumes {
        if !v.spec.same_grid(&spec) {
            return Err(Error::contract("TSDF volume grids differ"));
        }
    }
    for c in confs {
        if !c.spec.same_grid(&spec) {
            return Err(Error::contract("confidence volume grid differs"));
        }
    }

    let mut fused = TsdfVolume::new(spec, volumes[0].trunc)?;
    let chunk = 4096;
    fused
        .values
        .par_chunks_mut(chunk)
        .zip(fused.weights.par_chunks_mut(chunk))
        .enumerate()
        .for_each(|(ci, (fv, fw))| {
            let base = ci * chunk;
            for i in 0..fv.len() {
                let vi = base + i;
                let mut num = 0.0;
                let mut den = 0.0;
                for (vol, conf) in volumes.iter().zip(confs.iter()) {
                    if vol.weights[vi] > 0.0 {
                        let w = conf.conf[vi];
                        num += w * vol.values[vi];
                        den += w;
                    }
                }
                if den >= CONFIDENCE_FLOOR {
                    fv[i] = num / den;
                    fw[i] = den;
                } else {
                    fv[i] = 0.0;
                    fw[i] = 0.0;
                }
            }
        });
    Ok(fused)
}

/// Parameters of the free-space / near-surface evidence rule.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatacostParams {
    pub trunc: f64,
    pub delta_free: f64,
    pub delta_occ: f64,
}

impl Default for DatacostParams {
    fn default() -> Self {
        // Surface-adjacent evidence is rarer than free-space evidence, so it
        // carries more weight per observation.
        Self {
            trunc: 0.3,
            delta_free: 0.1,
            delta_occ: 1.0,
        }
    }
}

/// Accumulates one view's evidence into an existing datacost volume.
///
/// For every voxel that projects onto a valid measurement with depth `d` and
/// 2D label `l`: with `s = d - cam_depth`, free space in front of the surface
/// (`s > 0`) subtracts `delta_free` from the free label, the band just behind
/// the surface (`-trunc <= s <= 0`) subtracts `delta_occ` from `l`, and
/// occluded voxels are untouched.
pub fn accumulate_semantic_datacost(
    datacost: &mut SemanticDatacost,
    depth: &DepthMap,
    semseg: &LabelImage,
    intr: &CameraIntrinsics,
    pose: &Pose,
    params: &DatacostParams,
) -> Result<()> {
    if depth.width != semseg.width || depth.height != semseg.height {
        return Err(Error::contract("depth and label image sizes differ"));
    }
    if depth.width != intr.width || depth.height != intr.height {
        return Err(Error::contract("depth map does not match intrinsics"));
    }
    let n_labels = datacost.labels.len();
    for &id in &semseg.data {
        if id != UNKNOWN_LABEL && (id as usize >= n_labels || id as usize == FREE_LABEL) {
            return Err(Error::data(format!(
                "label id {id} not a valid occupied label (label count {n_labels})"
            )));
        }
    }

    let spec = datacost.spec;
    let n = spec.n_voxels();
    let (nx, ny) = (spec.dims[0], spec.dims[1]);
    let trunc = params.trunc;

    for z in 0..spec.dims[2] {
        for y in 0..ny {
            for x in 0..nx {
                let vi = x + nx * (y + ny * z);
                let center = voxel_center(&spec, [x, y, z]).expect("in bounds");
                let Some((pixel, cam_depth)) = project(intr, pose, center) else {
                    continue;
                };
                let Some((px, py)) = nearest_pixel(intr, pixel, cam_depth) else {
                    continue;
                };
                let Some(d) = depth.get(px, py) else {
                    continue;
                };
                let s = d - cam_depth;
                if s > 0.0 {
                    datacost.cost[FREE_LABEL * n + vi] -= params.delta_free;
                } else if s >= -trunc {
                    let label = semseg.at(px, py);
                    if label == UNKNOWN_LABEL {
                        continue;
                    }
                    datacost.cost[label as usize * n + vi] -= params.delta_occ;
                }
            }
        }
    }
    Ok(())
}

/// Builds a single-view datacost volume; see [`accumulate_semantic_datacost`].
#[allow(clippy::too_many_arguments)]
pub fn build_semantic_datacost(
    depth: &DepthMap,
    semseg: &LabelImage,
    intr: &CameraIntrinsics,
    pose: &Pose,
    spec: VoxelGridSpec,
    labels: LabelSet,
    params: &DatacostParams,
) -> Result<SemanticDatacost> {
    let mut datacost = SemanticDatacost::zeros(spec, labels);
    accumulate_semantic_datacost(&mut datacost, depth, semseg, intr, pose, params)?;
    Ok(datacost)
}

/// Confidence-weighted sum of per-sensor datacosts: the unnormalized
/// evidence term the solver consumes.
pub fn combine_datacosts(
    datacosts: &[SemanticDatacost],
    confs: &[ConfidenceVolume],
) -> Result<SemanticDatacost> {
    if datacosts.is_empty() {
        return Err(Error::contract("combine_datacosts needs at least one sensor"));
    }
    if datacosts.len() != confs.len() {
        return Err(Error::contract(format!(
            "{} datacosts vs {} confidence volumes",
            datacosts.len(),
            confs.len()
        )));
    }
    let spec = datacosts[0].spec;
    let labels = datacosts[0].labels.clone();
    for d in datacosts {
        if !d.spec.same_grid(&spec) || d.labels != labels {
            return Err(Error::contract("datacost grids or label sets differ"));
        }
    }
    for c in confs {
        if !c.spec.same_grid(&spec) {
            return Err(Error::contract("confidence volume grid differs"));
        }
    }

    let n = spec.n_voxels();
    let mut out = SemanticDatacost::zeros(spec, labels);
    out.cost
        .par_chunks_mut(n)
        .enumerate()
        .for_each(|(label, plane)| {
            for (dc, conf) in datacosts.iter().zip(confs.iter()) {
                let src = &dc.cost[label * n..(label + 1) * n];
                for i in 0..n {
                    plane[i] += conf.conf[i] * src[i];
                }
            }
        });
    Ok(out)
}
