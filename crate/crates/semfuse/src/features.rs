//! Per-voxel, per-sensor feature extraction.
//!
//! Voxels are back-projected into every view of a sensor; views whose
//! measured depth lies within one truncation distance of the voxel vote for
//! it. Each voting view contributes a 3x3 depth patch, image-gradient
//! statistics and (for stereo sensors) a normalized-cross-correlation sample
//! of corresponding rectified patches. Per-voxel features are the view
//! averages; NCC mean/std are taken over the per-view NCC samples.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{nearest_pixel, project, voxel_center, CameraIntrinsics, VoxelGridSpec};
use crate::imagery::{DepthMap, GrayImage, SensorView, SensorViews};

/// Feature vector width: 9 depth-patch values + gradient mean/std, plus NCC
/// mean/std for stereo sensors.
pub const FEATURE_DIM_MONO: usize = 11;
pub const FEATURE_DIM_STEREO: usize = 13;

pub const NCC_PATCH_RADIUS: isize = 2; // 5x5
const VARIANCE_FLOOR: f64 = 1e-12;

/// Per-voxel aggregated features for one sensor.
///
/// `data` is voxel-major: `data[voxel * dim .. (voxel + 1) * dim]` is the
/// feature vector; `count` holds the number of contributing views. Voxels
/// with count 0 carry the zero vector.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureVolume {
    pub spec: VoxelGridSpec,
    pub sensor_name: String,
    pub stereo: bool,
    pub dim: usize,
    pub data: Vec<f64>,
    pub count: Vec<f64>,
}

impl FeatureVolume {
    pub fn zeros(spec: VoxelGridSpec, sensor_name: String, stereo: bool) -> Self {
        let dim = if stereo {
            FEATURE_DIM_STEREO
        } else {
            FEATURE_DIM_MONO
        };
        let n = spec.n_voxels();
        Self {
            spec,
            sensor_name,
            stereo,
            dim,
            data: vec![0.0; n * dim],
            count: vec![0.0; n],
        }
    }

    #[inline]
    pub fn vector(&self, voxel: usize) -> &[f64] {
        &self.data[voxel * self.dim..(voxel + 1) * self.dim]
    }
}

/// The nine pixel coordinates a 3x3 depth patch samples, row-major.
/// Out-of-image or invalid neighbors fall back to the center pixel so the
/// patch shape stays fixed.
fn patch_sample_coords(depth: &DepthMap, px: usize, py: usize) -> [(usize, usize); 9] {
    let mut coords = [(px, py); 9];
    let mut k = 0;
    for dy in -1isize..=1 {
        for dx in -1isize..=1 {
            let x = px as isize + dx;
            let y = py as isize + dy;
            if x >= 0 && y >= 0 && (x as usize) < depth.width && (y as usize) < depth.height {
                let (xu, yu) = (x as usize, y as usize);
                if depth.get(xu, yu).is_some() {
                    coords[k] = (xu, yu);
                }
            }
            k += 1;
        }
    }
    coords
}

/// Row-major 3x3 neighborhood of depth values centered on `pixel`.
/// Returns `None` when the center pixel holds no measurement.
pub fn depth_patch(depth: &DepthMap, pixel: (usize, usize)) -> Option<[f64; 9]> {
    let (px, py) = pixel;
    depth.get(px, py)?;
    let coords = patch_sample_coords(depth, px, py);
    let mut out = [0.0; 9];
    for (o, &(x, y)) in out.iter_mut().zip(coords.iter()) {
        *o = depth.at(x, y);
    }
    Some(out)
}

/// Mean and population standard deviation of the central-difference gradient
/// norm over the 3x3 patch around `pixel`. Border samples use clamped
/// differences.
pub fn grad_stats(image: &GrayImage, pixel: (usize, usize)) -> (f64, f64) {
    let (px, py) = pixel;
    let mut sum = 0.0;
    let mut sumsq = 0.0;
    for dy in -1isize..=1 {
        for dx in -1isize..=1 {
            let x = px as isize + dx;
            let y = py as isize + dy;
            let gx = (image.at_clamped(x + 1, y) - image.at_clamped(x - 1, y)) / 2.0;
            let gy = (image.at_clamped(x, y + 1) - image.at_clamped(x, y - 1)) / 2.0;
            let norm = (gx * gx + gy * gy).sqrt();
            sum += norm;
            sumsq += norm * norm;
        }
    }
    let mean = sum / 9.0;
    let var = (sumsq / 9.0 - mean * mean).max(0.0);
    (mean, var.sqrt())
}

/// Normalized cross correlation of two equally sized patches, in [-1, 1].
/// Returns 0 when either patch is (numerically) constant.
pub fn ncc(patch_a: &[f64], patch_b: &[f64]) -> f64 {
    debug_assert_eq!(patch_a.len(), patch_b.len());
    let n = patch_a.len() as f64;
    let mean_a = patch_a.iter().sum::<f64>() / n;
    let mean_b = patch_b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut var_a = 0.0;
    let mut var_b = 0.0;
    for (&a, &b) in patch_a.iter().zip(patch_b.iter()) {
        let da = a - mean_a;
        let db = b - mean_b;
        cov += da * db;
        var_a += da * da;
        var_b += db * db;
    }
    if var_a < VARIANCE_FLOOR || var_b < VARIANCE_FLOOR {
        return 0.0;
    }
    (cov / (var_a * var_b).sqrt()).clamp(-1.0, 1.0)
}

fn sample_patch_5x5(image: &GrayImage, cx: isize, cy: isize) -> [f64; 25] {
    let mut out = [0.0; 25];
    let mut k = 0;
    for dy in -NCC_PATCH_RADIUS..=NCC_PATCH_RADIUS {
        for dx in -NCC_PATCH_RADIUS..=NCC_PATCH_RADIUS {
            out[k] = image.at_clamped(cx + dx, cy + dy);
            k += 1;
        }
    }
    out
}

/// NCC between the left 5x5 patch at `pixel` and the corresponding
/// rectified right patch at disparity `fx * baseline / depth`.
pub fn stereo_ncc_sample(
    view: &SensorView,
    intr: &CameraIntrinsics,
    baseline: f64,
    pixel: (usize, usize),
    measured_depth: f64,
) -> Option<f64> {
    let right = view.right_image.as_ref()?;
    let disparity = intr.fx * baseline / measured_depth;
    let left_patch = sample_patch_5x5(&view.image, pixel.0 as isize, pixel.1 as isize);
    let right_patch = sample_patch_5x5(
        right,
        (pixel.0 as f64 - disparity).round() as isize,
        pixel.1 as isize,
    );
    Some(ncc(&left_patch, &right_patch))
}

/// Decides whether `view` votes for a voxel center and returns the rounded
/// pixel plus the measured depth and camera depth. A view votes when the
/// projection is in-frustum, the measurement is valid and the voxel lies
/// within `trunc` of the measured surface.
pub fn view_contribution(
    view: &SensorView,
    intr: &CameraIntrinsics,
    center: nalgebra::Point3<f64>,
    trunc: f64,
) -> Option<(usize, usize, f64, f64)> {
    let (pixel, cam_depth) = project(intr, &view.pose, center)?;
    let (px, py) = nearest_pixel(intr, pixel, cam_depth)?;
    let d = view.depth.get(px, py)?;
    if (d - cam_depth).abs() > trunc {
        return None;
    }
    Some((px, py, d, cam_depth))
}

/// Aggregates per-view features over all views of one sensor.
pub fn extract_feature_volume(
    views: &SensorViews,
    spec: VoxelGridSpec,
    trunc: f64,
) -> Result<FeatureVolume> {
    if !(trunc > 0.0) {
        return Err(Error::contract("truncation distance must be positive"));
    }
    let mut out = FeatureVolume::zeros(spec, views.sensor_name.clone(), views.is_stereo());
    let dim = out.dim;
    let intr = views.intrinsics;
    let baseline = views.baseline;
    let (nx, ny) = (spec.dims[0], spec.dims[1]);
    let slab = nx * ny;

    out.data
        .par_chunks_mut(slab * dim)
        .zip(out.count.par_chunks_mut(slab))
        .enumerate()
        .for_each(|(z, (feat, count))| {
            for y in 0..ny {
                for x in 0..nx {
                    let vi = x + nx * y;
                    let center = voxel_center(&spec, [x, y, z]).expect("in bounds");
                    let mut acc = [0.0f64; FEATURE_DIM_STEREO];
                    let mut ncc_sum = 0.0;
                    let mut ncc_sumsq = 0.0;
                    let mut n = 0usize;
                    for view in &views.views {
                        let Some((px, py, d, _cam_depth)) =
                            view_contribution(view, &intr, center, trunc)
                        else {
                            continue;
                        };
                        let Some(patch) = depth_patch(&view.depth, (px, py)) else {
                            continue;
                        };
                        for (a, p) in acc.iter_mut().zip(patch.iter()) {
                            *a += p;
                        }
                        let (gm, gs) = grad_stats(&view.image, (px, py));
                        acc[9] += gm;
                        acc[10] += gs;
                        if let Some(b) = baseline {
                            if let Some(s) = stereo_ncc_sample(view, &intr, b, (px, py), d) {
                                ncc_sum += s;
                                ncc_sumsq += s * s;
                            }
                        }
                        n += 1;
                    }
                    if n == 0 {
                        continue;
                    }
                    let inv = 1.0 / n as f64;
                    let dst = &mut feat[vi * dim..(vi + 1) * dim];
                    for k in 0..FEATURE_DIM_MONO {
                        dst[k] = acc[k] * inv;
                    }
                    if baseline.is_some() {
                        let mean = ncc_sum * inv;
                        dst[11] = mean;
                        dst[12] = if n >= 2 {
                            (ncc_sumsq * inv - mean * mean).max(0.0).sqrt()
                        } else {
                            0.0
                        };
                    }
                    count[vi] = n as f64;
                }
            }
        });
    Ok(out)
}

/// Marks voxels whose aggregated depth-patch feature sampled at least one
/// flagged pixel (per-view boolean masks, e.g. injected outliers).
pub fn contaminated_voxels(
    views: &SensorViews,
    pixel_masks: &[Vec<bool>],
    spec: VoxelGridSpec,
    trunc: f64,
) -> Result<Vec<bool>> {
    if pixel_masks.len() != views.views.len() {
        return Err(Error::contract(format!(
            "{} masks for {} views",
            pixel_masks.len(),
            views.views.len()
        )));
    }
    let intr = views.intrinsics;
    let n = spec.n_voxels();
    let mut out = vec![false; n];
    let (nx, ny) = (spec.dims[0], spec.dims[1]);
    let slab = nx * ny;
    out.par_chunks_mut(slab).enumerate().for_each(|(z, chunk)| {
        for y in 0..ny {
            for x in 0..nx {
                let center = voxel_center(&spec, [x, y, z]).expect("in bounds");
                let mut hit = false;
                for (view, mask) in views.views.iter().zip(pixel_masks.iter()) {
                    let Some((px, py, _, _)) = view_contribution(view, &intr, center, trunc)
                    else {
                        continue;
                    };
                    if depth_patch(&view.depth, (px, py)).is_none() {
                        continue;
                    }
                    let coords = patch_sample_coords(&view.depth, px, py);
                    if coords.iter().any(|&(cx, cy)| mask[cy * view.depth.width + cx]) {
                        hit = true;
                        break;
                    }
                }
                chunk[x + nx * y] = hit;
            }
        }
    });
    Ok(out)
}
