//! Cameras, poses and voxel-grid indexing.
//!
//! Conventions used throughout the crate:
//! - Poses are camera-from-world: `p_cam = R * p_world + t`.
//! - The camera looks along +z, +x is right, +y is down (image coordinates).
//! - Voxel grids are indexed x-fastest row-major; this ordering is binding
//!   for every serialized volume.

use nalgebra::{Matrix3, Point3, Vector3};

use crate::error::{Error, Result};

/// Pinhole camera intrinsics in pixel units.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0) {
            return Err(Error::contract(format!(
                "focal lengths must be positive, got fx={fx}, fy={fy}"
            )));
        }
        if !(0.0 <= cx && cx < width as f64) || !(0.0 <= cy && cy < height as f64) {
            return Err(Error::contract(format!(
                "principal point ({cx}, {cy}) outside {width}x{height} image"
            )));
        }
        Ok(Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        })
    }
}

/// Rigid camera-from-world transform.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

const ORTHONORMALITY_TOL: f64 = 1e-6;

impl Pose {
    /// Builds a pose, checking that `rotation` is a proper rotation matrix.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let residual = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        if residual > ORTHONORMALITY_TOL {
            return Err(Error::contract(format!(
                "rotation is not orthonormal (residual {residual:.2e})"
            )));
        }
        if (rotation.determinant() - 1.0).abs() > ORTHONORMALITY_TOL {
            return Err(Error::contract("rotation determinant is not +1"));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Camera placed at `eye`, optical axis through `target`, `up` fixing roll.
    ///
    /// The image +y axis points along world -up (rows grow downwards).
    pub fn look_at(eye: Point3<f64>, target: Point3<f64>, up: Vector3<f64>) -> Result<Self> {
        let forward = (target - eye)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::contract("look_at: eye and target coincide"))?;
        let right = forward
            .cross(&up)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::contract("look_at: view direction parallel to up"))?;
        let down = forward.cross(&right);
        let rotation = Matrix3::from_rows(&[
            right.transpose(),
            down.transpose(),
            forward.transpose(),
        ]);
        let translation = -rotation * eye.coords;
        Pose::new(rotation, translation)
    }

    pub fn transform(&self, point: Point3<f64>) -> Point3<f64> {
        Point3::from(self.rotation * point.coords + self.translation)
    }

    /// World position of the camera center.
    pub fn center(&self) -> Point3<f64> {
        Point3::from(-(self.rotation.transpose() * self.translation))
    }
}

/// Regular voxel grid: corner origin, edge length, voxel counts.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VoxelGridSpec {
    pub origin: [f64; 3],
    pub voxel_size: f64,
    pub dims: [usize; 3],
}

impl VoxelGridSpec {
    pub fn new(origin: [f64; 3], voxel_size: f64, dims: [usize; 3]) -> Result<Self> {
        if !(voxel_size > 0.0) {
            return Err(Error::contract(format!(
                "voxel size must be positive, got {voxel_size}"
            )));
        }
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::contract(format!("all dims must be >= 1, got {dims:?}")));
        }
        Ok(Self {
            origin,
            voxel_size,
            dims,
        })
    }

    pub fn n_voxels(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn in_bounds(&self, index: [usize; 3]) -> bool {
        index[0] < self.dims[0] && index[1] < self.dims[1] && index[2] < self.dims[2]
    }

    /// Linear index, x-fastest row-major.
    #[inline]
    pub fn linear_index(&self, index: [usize; 3]) -> usize {
        index[0] + self.dims[0] * (index[1] + self.dims[1] * index[2])
    }

    #[inline]
    pub fn index_from_linear(&self, linear: usize) -> [usize; 3] {
        let x = linear % self.dims[0];
        let rest = linear / self.dims[0];
        [x, rest % self.dims[1], rest / self.dims[1]]
    }

    /// Voxel that contains the world point, if any.
    pub fn voxel_containing(&self, point: Point3<f64>) -> Option<[usize; 3]> {
        let mut idx = [0usize; 3];
        for a in 0..3 {
            let f = ((point[a] - self.origin[a]) / self.voxel_size).floor();
            if f < 0.0 || f >= self.dims[a] as f64 {
                return None;
            }
            idx[a] = f as usize;
        }
        Some(idx)
    }

    pub fn same_grid(&self, other: &VoxelGridSpec) -> bool {
        self == other
    }
}

/// World position of a voxel center.
pub fn voxel_center(spec: &VoxelGridSpec, index: [usize; 3]) -> Result<Point3<f64>> {
    if !spec.in_bounds(index) {
        return Err(Error::range(format!(
            "voxel index {index:?} outside dims {:?}",
            spec.dims
        )));
    }
    Ok(Point3::new(
        spec.origin[0] + (index[0] as f64 + 0.5) * spec.voxel_size,
        spec.origin[1] + (index[1] as f64 + 0.5) * spec.voxel_size,
        spec.origin[2] + (index[2] as f64 + 0.5) * spec.voxel_size,
    ))
}

/// Projects a world point into the image plane.
///
/// Returns the continuous pixel and the camera-space depth, or `None` when
/// the point sits at or behind the camera plane (no division performed).
pub fn project(
    intr: &CameraIntrinsics,
    pose: &Pose,
    point: Point3<f64>,
) -> Option<([f64; 2], f64)> {
    let p_cam = pose.transform(point);
    if p_cam.z <= 0.0 {
        return None;
    }
    let u = intr.fx * p_cam.x / p_cam.z + intr.cx;
    let v = intr.fy * p_cam.y / p_cam.z + intr.cy;
    Some(([u, v], p_cam.z))
}

/// True iff the depth is positive and the rounded pixel lies inside the image.
pub fn in_frustum(intr: &CameraIntrinsics, pixel: [f64; 2], cam_depth: f64) -> bool {
    if cam_depth <= 0.0 {
        return false;
    }
    let u = pixel[0].round();
    let v = pixel[1].round();
    u >= 0.0 && v >= 0.0 && u < intr.width as f64 && v < intr.height as f64
}

/// Rounded pixel coordinates for in-frustum projections.
pub fn nearest_pixel(intr: &CameraIntrinsics, pixel: [f64; 2], cam_depth: f64) -> Option<(usize, usize)> {
    if !in_frustum(intr, pixel, cam_depth) {
        return None;
    }
    Some((pixel[0].round() as usize, pixel[1].round() as usize))
}

/// Inverse of [`project`]: camera ray through `pixel` scaled to `cam_depth`,
/// mapped back to world space.
pub fn back_project(
    intr: &CameraIntrinsics,
    pose: &Pose,
    pixel: [f64; 2],
    cam_depth: f64,
) -> Point3<f64> {
    let x = (pixel[0] - intr.cx) / intr.fx * cam_depth;
    let y = (pixel[1] - intr.cy) / intr.fy * cam_depth;
    let p_cam = Vector3::new(x, y, cam_depth);
    Point3::from(pose.rotation.transpose() * (p_cam - pose.translation))
}
