//! Reconstruction metrics: semantic and free-space accuracy, completion
//! rate, and the mean surface distance via an exact Euclidean distance
//! transform. Unknown ground-truth voxels never enter any numerator or
//! denominator.

use crate::error::{Error, Result};
use crate::fusion::FREE_LABEL;
use crate::geometry::VoxelGridSpec;
use crate::imagery::UNKNOWN_LABEL;
use crate::training::GroundTruthVolume;

/// Metric bundle; absent entries mean the quantity is undefined for the
/// given volumes (e.g. no occupied voxels).
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub labels: Vec<String>,
    pub semantic_accuracy: Option<f64>,
    pub free_space_accuracy: Option<f64>,
    pub completion_tp_rate: Option<f64>,
    /// Mean distance (in voxels) from predicted surface voxels to the
    /// nearest ground-truth surface voxel; one-directional.
    pub mean_surface_distance: Option<f64>,
    /// `confusion[gt][pred]` over non-unknown ground truth.
    pub confusion: Vec<Vec<u64>>,
}

fn check_shapes(pred: &[u8], gt: &GroundTruthVolume) -> Result<()> {
    if pred.len() != gt.spec.n_voxels() {
        return Err(Error::contract(format!(
            "prediction has {} voxels, ground truth {}",
            pred.len(),
            gt.spec.n_voxels()
        )));
    }
    Ok(())
}

/// Fraction of ground-truth-occupied voxels whose semantic label was
/// predicted correctly. `None` when the scene has no occupied voxels.
pub fn semantic_accuracy(pred: &[u8], gt: &GroundTruthVolume) -> Result<Option<f64>> {
    check_shapes(pred, gt)?;
    let mut correct = 0u64;
    let mut total = 0u64;
    for (p, g) in pred.iter().zip(gt.gt.iter()) {
        if *g == UNKNOWN_LABEL || *g as usize == FREE_LABEL {
            continue;
        }
        total += 1;
        if p == g {
            correct += 1;
        }
    }
    Ok((total > 0).then(|| correct as f64 / total as f64))
}

/// Fraction of ground-truth free voxels predicted free.
pub fn free_space_accuracy(pred: &[u8], gt: &GroundTruthVolume) -> Result<Option<f64>> {
    check_shapes(pred, gt)?;
    let mut correct = 0u64;
    let mut total = 0u64;
    for (p, g) in pred.iter().zip(gt.gt.iter()) {
        if *g as usize != FREE_LABEL {
            continue;
        }
        total += 1;
        if *p as usize == FREE_LABEL {
            correct += 1;
        }
    }
    Ok((total > 0).then(|| correct as f64 / total as f64))
}

/// Fraction of ground-truth-occupied voxels predicted occupied under any
/// non-free label (completion true-positive rate).
pub fn completion_tp_rate(pred: &[u8], gt: &GroundTruthVolume) -> Result<Option<f64>> {
    check_shapes(pred, gt)?;
    let mut hit = 0u64;
    let mut total = 0u64;
    for (p, g) in pred.iter().zip(gt.gt.iter()) {
        if *g == UNKNOWN_LABEL || *g as usize == FREE_LABEL {
            continue;
        }
        total += 1;
        if *p as usize != FREE_LABEL {
            hit += 1;
        }
    }
    Ok((total > 0).then(|| hit as f64 / total as f64))
}

/// Occupied voxels 6-adjacent to an in-bounds free or unknown voxel.
/// Out-of-bounds neighbors do not induce surface: the outer face of a shell
/// that touches the grid boundary is not observable geometry.
pub fn surface_mask(labels: &[u8], spec: &VoxelGridSpec) -> Vec<bool> {
    let [nx, ny, nz] = spec.dims;
    let mut out = vec![false; labels.len()];
    let occupied =
        |v: u8| -> bool { v != UNKNOWN_LABEL && v as usize != FREE_LABEL };
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let i = spec.linear_index([x, y, z]);
                if !occupied(labels[i]) {
                    continue;
                }
                let mut exposed = false;
                for (dx, dy, dz) in
                    [(1i64, 0i64, 0i64), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)]
                {
                    let (xx, yy, zz) = (x as i64 + dx, y as i64 + dy, z as i64 + dz);
                    if xx < 0 || yy < 0 || zz < 0 || xx >= nx as i64 || yy >= ny as i64 || zz >= nz as i64 {
                        continue;
                    }
                    let n = labels[spec.linear_index([xx as usize, yy as usize, zz as usize])];
                    if !occupied(n) {
                        exposed = true;
                        break;
                    }
                }
                out[i] = exposed;
            }
        }
    }
    out
}

#[inline]
fn parabola_intersection(f: &[f64], q: usize, p: usize) -> f64 {
    ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * q as f64 - 2.0 * p as f64)
}

/// One-dimensional squared-distance lower envelope (Felzenszwalb and
/// Huttenlocher).
fn edt_1d(f: &[f64], v: &mut Vec<usize>, z: &mut Vec<f64>, out: &mut [f64]) {
    let n = f.len();
    v.clear();
    z.clear();
    v.resize(n, 0);
    z.resize(n + 1, 0.0);
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        let mut s = parabola_intersection(f, q, v[k]);
        while s <= z[k] {
            k -= 1;
            s = parabola_intersection(f, q, v[k]);
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    k = 0;
    for q in 0..n {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        out[q] = d * d + f[v[k]];
    }
}

/// Exact squared Euclidean distance transform of a boolean seed grid.
pub fn squared_edt_3d(seeds: &[bool], spec: &VoxelGridSpec) -> Vec<f64> {
    let [nx, ny, nz] = spec.dims;
    const FAR: f64 = 1e18;
    let mut d: Vec<f64> = seeds.iter().map(|&s| if s { 0.0 } else { FAR }).collect();

    let mut line = Vec::new();
    let mut out_line = Vec::new();
    let mut sv = Vec::new();
    let mut sz = Vec::new();

    // x pass
    for z in 0..nz {
        for y in 0..ny {
            let base = (z * ny + y) * nx;
            line.clear();
            line.extend_from_slice(&d[base..base + nx]);
            out_line.resize(nx, 0.0);
            edt_1d(&line, &mut sv, &mut sz, &mut out_line);
            d[base..base + nx].copy_from_slice(&out_line);
        }
    }
    // y pass
    for z in 0..nz {
        for x in 0..nx {
            line.clear();
            for y in 0..ny {
                line.push(d[(z * ny + y) * nx + x]);
            }
            out_line.resize(ny, 0.0);
            edt_1d(&line, &mut sv, &mut sz, &mut out_line);
            for y in 0..ny {
                d[(z * ny + y) * nx + x] = out_line[y];
            }
        }
    }
    // z pass
    for y in 0..ny {
        for x in 0..nx {
            line.clear();
            for z in 0..nz {
                line.push(d[(z * ny + y) * nx + x]);
            }
            out_line.resize(nz, 0.0);
            edt_1d(&line, &mut sv, &mut sz, &mut out_line);
            for z in 0..nz {
                d[(z * ny + y) * nx + x] = out_line[z];
            }
        }
    }
    d
}

/// Mean distance (voxels) from predicted surface voxels to the nearest
/// ground-truth surface voxel. `None` when either surface is empty.
pub fn mean_surface_distance(pred: &[u8], gt: &GroundTruthVolume) -> Result<Option<f64>> {
    check_shapes(pred, gt)?;
    let pred_surface = surface_mask(pred, &gt.spec);
    let gt_surface = surface_mask(&gt.gt, &gt.spec);
    if !gt_surface.iter().any(|&s| s) || !pred_surface.iter().any(|&s| s) {
        return Ok(None);
    }
    let sq = squared_edt_3d(&gt_surface, &gt.spec);
    let mut sum = 0.0;
    let mut count = 0u64;
    for (i, &is_surf) in pred_surface.iter().enumerate() {
        if is_surf {
            sum += sq[i].sqrt();
            count += 1;
        }
    }
    Ok(Some(sum / count as f64))
}

/// Per-label confusion counts over non-unknown ground truth.
pub fn confusion_counts(pred: &[u8], gt: &GroundTruthVolume) -> Result<Vec<Vec<u64>>> {
    check_shapes(pred, gt)?;
    let k = gt.labels.len();
    let mut m = vec![vec![0u64; k]; k];
    for (p, g) in pred.iter().zip(gt.gt.iter()) {
        if *g == UNKNOWN_LABEL {
            continue;
        }
        if (*p as usize) < k {
            m[*g as usize][*p as usize] += 1;
        }
    }
    Ok(m)
}

/// Computes the full report.
pub fn evaluate(pred: &[u8], gt: &GroundTruthVolume) -> Result<MetricsReport> {
    Ok(MetricsReport {
        labels: gt.labels.names().to_vec(),
        semantic_accuracy: semantic_accuracy(pred, gt)?,
        free_space_accuracy: free_space_accuracy(pred, gt)?,
        completion_tp_rate: completion_tp_rate(pred, gt)?,
        mean_surface_distance: mean_surface_distance(pred, gt)?,
        confusion: confusion_counts(pred, gt)?,
    })
}

impl MetricsReport {
    /// Structured text with fixed field names; parse-stable across runs.
    pub fn to_text(&self) -> String {
        fn fmt(v: Option<f64>) -> String {
            match v {
                Some(x) => format!("{x:.9}"),
                None => "\"undefined\"".to_string(),
            }
        }
        let mut s = String::new();
        s.push_str(&format!("semantic_accuracy = {}\n", fmt(self.semantic_accuracy)));
        s.push_str(&format!(
            "free_space_accuracy = {}\n",
            fmt(self.free_space_accuracy)
        ));
        s.push_str(&format!(
            "completion_tp_rate = {}\n",
            fmt(self.completion_tp_rate)
        ));
        s.push_str(&format!(
            "mean_surface_distance_voxels = {}\n",
            fmt(self.mean_surface_distance)
        ));
        s.push_str("surface_distance_direction = \"pred_to_gt\"\n");
        s.push_str(&format!(
            "labels = [{}]\n",
            self.labels
                .iter()
                .map(|l| format!("\"{l}\""))
                .collect::<Vec<_>>()
                .join(", ")
        ));
        for (g, row) in self.confusion.iter().enumerate() {
            s.push_str(&format!(
                "confusion_{} = [{}]\n",
                self.labels[g],
                row.iter()
                    .map(|c| c.to_string())
                    .collect::<Vec<_>>()
                    .join(", ")
            ));
        }
        s
    }
}
