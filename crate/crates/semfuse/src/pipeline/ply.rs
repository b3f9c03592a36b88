//! Cube-per-voxel export to ASCII PLY with vertex colors.
//!
//! Each occupied voxel becomes 8 vertices and 12 triangles; vertices are
//! not deduplicated between adjacent voxels, keeping the output order a
//! pure function of the traversal.

use std::io::Write;

use crate::error::Result;
use crate::fusion::{TsdfVolume, FREE_LABEL};
use crate::geometry::VoxelGridSpec;
use crate::imagery::UNKNOWN_LABEL;

/// Fixed label palette (RGB), cycled by label index.
pub const PALETTE: [[u8; 3]; 10] = [
    [160, 160, 160], // free (not exported, placeholder)
    [140, 100, 60],  // floor
    [200, 200, 180], // wall
    [120, 140, 200], // ceiling
    [200, 120, 40],  // table
    [90, 170, 90],   // box
    [200, 80, 160],
    [80, 190, 190],
    [230, 220, 80],
    [130, 80, 200],
];

const CUBE_FACES: [[usize; 3]; 12] = [
    [0, 2, 1],
    [1, 2, 3], // z-
    [4, 5, 6],
    [5, 7, 6], // z+
    [0, 1, 4],
    [1, 5, 4], // y-
    [2, 6, 3],
    [3, 6, 7], // y+
    [0, 4, 2],
    [2, 4, 6], // x-
    [1, 3, 5],
    [3, 7, 5], // x+
];

fn write_cubes(
    out: &mut impl Write,
    voxels: &[(usize, usize, usize, [u8; 3])],
    spec: &VoxelGridSpec,
) -> Result<()> {
    writeln!(out, "ply")?;
    writeln!(out, "format ascii 1.0")?;
    writeln!(out, "element vertex {}", voxels.len() * 8)?;
    writeln!(out, "property float x")?;
    writeln!(out, "property float y")?;
    writeln!(out, "property float z")?;
    writeln!(out, "property uchar red")?;
    writeln!(out, "property uchar green")?;
    writeln!(out, "property uchar blue")?;
    writeln!(out, "element face {}", voxels.len() * 12)?;
    writeln!(out, "property list uchar int vertex_indices")?;
    writeln!(out, "end_header")?;
    for &(x, y, z, rgb) in voxels {
        for dz in 0..2 {
            for dy in 0..2 {
                for dx in 0..2 {
                    let px = (spec.origin[0] + (x + dx) as f64 * spec.voxel_size) as f32;
                    let py = (spec.origin[1] + (y + dy) as f64 * spec.voxel_size) as f32;
                    let pz = (spec.origin[2] + (z + dz) as f64 * spec.voxel_size) as f32;
                    writeln!(out, "{} {} {} {} {} {}", px, py, pz, rgb[0], rgb[1], rgb[2])?;
                }
            }
        }
    }
    for (i, _) in voxels.iter().enumerate() {
        let base = i * 8;
        for f in CUBE_FACES {
            writeln!(out, "3 {} {} {}", base + f[0], base + f[1], base + f[2])?;
        }
    }
    Ok(())
}

/// Exports every non-free, non-unknown voxel as a colored cube.
pub fn export_labels_ply(
    out: &mut impl Write,
    labels: &[u8],
    spec: &VoxelGridSpec,
) -> Result<()> {
    let mut voxels = Vec::new();
    for z in 0..spec.dims[2] {
        for y in 0..spec.dims[1] {
            for x in 0..spec.dims[0] {
                let l = labels[spec.linear_index([x, y, z])];
                if l as usize == FREE_LABEL || l == UNKNOWN_LABEL {
                    continue;
                }
                voxels.push((x, y, z, PALETTE[l as usize % PALETTE.len()]));
            }
        }
    }
    write_cubes(out, &voxels, spec)
}

/// Exports observed inside-surface voxels (value <= 0) of a TSDF.
pub fn export_tsdf_ply(out: &mut impl Write, v: &TsdfVolume) -> Result<()> {
    let mut voxels = Vec::new();
    for z in 0..v.spec.dims[2] {
        for y in 0..v.spec.dims[1] {
            for x in 0..v.spec.dims[0] {
                let i = v.spec.linear_index([x, y, z]);
                if v.weights[i] > 0.0 && v.values[i] <= 0.0 {
                    voxels.push((x, y, z, [170u8, 170, 170]));
                }
            }
        }
    }
    write_cubes(out, &voxels, &v.spec)
}
