//! Synthetic scenes and sensor simulation.
//!
//! Scenes are rooms built from axis-aligned labeled boxes (the shell slabs
//! carry floor/wall/ceiling labels, furniture sits inside). Depth, intensity
//! and label images are ray-cast per pixel; procedural stripe textures make
//! the gradient and stereo features meaningful. Sensor models corrupt the
//! rendered depth with depth-dependent Gaussian noise, sparse outliers and
//! texture-driven dropout, all reproducible per seed.

use nalgebra::{Point3, Vector3};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::grad_stats;
use crate::fusion::{DatacostParams, LabelSet, FREE_LABEL};
use crate::geometry::{CameraIntrinsics, Pose, VoxelGridSpec};
use crate::imagery::{DepthMap, GrayImage, LabelImage, SensorView, SensorViews, UNKNOWN_LABEL};
use crate::training::GroundTruthVolume;

/// Axis-aligned box with a semantic label.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledBox {
    pub label: u8,
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl LabeledBox {
    pub fn contains(&self, p: Point3<f64>) -> bool {
        (0..3).all(|a| p[a] >= self.min[a] && p[a] <= self.max[a])
    }
}

/// Procedural stripe texture of one label: `base * (1 + 0.45 sin(freq * s))`
/// along a label-specific direction. Frequency 0 renders flat.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextureParams {
    pub base: f64,
    pub stripe_freq: f64,
}

/// Static scene geometry: boxes within a room shell plus per-label textures.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub name: String,
    pub labels: Vec<String>,
    pub boxes: Vec<LabeledBox>,
    /// Open interior of the room (air).
    pub interior_min: [f64; 3],
    pub interior_max: [f64; 3],
    /// Indexed by label id.
    pub textures: Vec<TextureParams>,
}

impl Scene {
    pub fn label_set(&self) -> Result<LabelSet> {
        LabelSet::new(self.labels.clone())
    }

    /// Label id of a position: boxes win (later boxes override earlier
    /// ones), then the room interior is free space, and anything else is
    /// unknown.
    pub fn label_at(&self, p: Point3<f64>) -> u8 {
        for b in self.boxes.iter().rev() {
            if b.contains(p) {
                return b.label;
            }
        }
        let inside = (0..3).all(|a| p[a] >= self.interior_min[a] && p[a] <= self.interior_max[a]);
        if inside {
            FREE_LABEL as u8
        } else {
            UNKNOWN_LABEL
        }
    }

    pub fn ground_truth(&self, spec: VoxelGridSpec) -> Result<GroundTruthVolume> {
        let labels = self.label_set()?;
        let n = spec.n_voxels();
        let mut gt = vec![UNKNOWN_LABEL; n];
        for z in 0..spec.dims[2] {
            for y in 0..spec.dims[1] {
                for x in 0..spec.dims[0] {
                    let c = crate::geometry::voxel_center(&spec, [x, y, z])?;
                    gt[spec.linear_index([x, y, z])] = self.label_at(c);
                }
            }
        }
        Ok(GroundTruthVolume { spec, labels, gt })
    }

    fn texture_intensity(&self, label: u8, p: Point3<f64>) -> f64 {
        let t = &self.textures[label as usize];
        if t.stripe_freq == 0.0 {
            return t.base;
        }
        // Direction varies per label so adjacent surfaces do not alias.
        let l = label as f64;
        let dir = Vector3::new(1.0, 0.7 + 0.13 * l, 0.4 + 0.29 * l).normalize();
        let s = p.coords.dot(&dir) + 0.37 * l;
        t.base * (1.0 + 0.45 * (t.stripe_freq * s).sin())
    }
}

const RAY_EPS: f64 = 1e-9;

/// Slab-method intersection; returns the entry parameter of the first hit.
fn ray_box(origin: Point3<f64>, dir: Vector3<f64>, b: &LabeledBox) -> Option<f64> {
    let mut t0 = RAY_EPS;
    let mut t1 = f64::INFINITY;
    for a in 0..3 {
        if dir[a].abs() < 1e-15 {
            if origin[a] < b.min[a] || origin[a] > b.max[a] {
                return None;
            }
            continue;
        }
        let inv = 1.0 / dir[a];
        let (mut near, mut far) = ((b.min[a] - origin[a]) * inv, (b.max[a] - origin[a]) * inv);
        if near > far {
            std::mem::swap(&mut near, &mut far);
        }
        t0 = t0.max(near);
        t1 = t1.min(far);
        if t0 > t1 {
            return None;
        }
    }
    Some(t0)
}

/// Nearest hit over all boxes: `(ray parameter, label)`. The parameter
/// equals z-depth when `dir` has unit optical-axis component.
fn cast_ray(scene: &Scene, origin: Point3<f64>, dir: Vector3<f64>) -> Option<(f64, u8)> {
    let mut best: Option<(f64, u8)> = None;
    for b in &scene.boxes {
        if let Some(t) = ray_box(origin, dir, b) {
            if best.map_or(true, |(bt, _)| t < bt) {
                best = Some((t, b.label));
            }
        }
    }
    best
}

fn camera_ray(
    intr: &CameraIntrinsics,
    pose: &Pose,
    px: usize,
    py: usize,
) -> (Point3<f64>, Vector3<f64>) {
    // Unit optical-axis component: the ray parameter is the z-depth.
    let dir_cam = Vector3::new(
        (px as f64 - intr.cx) / intr.fx,
        (py as f64 - intr.cy) / intr.fy,
        1.0,
    );
    let origin = pose.center();
    let dir = pose.rotation.transpose() * dir_cam;
    (origin, dir)
}

/// Ground-truth z-depth per pixel; misses hold the invalid sentinel.
pub fn render_depth(scene: &Scene, intr: &CameraIntrinsics, pose: &Pose) -> DepthMap {
    let mut out = DepthMap::invalid(intr.width, intr.height);
    for py in 0..intr.height {
        for px in 0..intr.width {
            let (origin, dir) = camera_ray(intr, pose, px, py);
            if let Some((t, _)) = cast_ray(scene, origin, dir) {
                out.set(px, py, t);
            }
        }
    }
    out
}

/// Label of the nearest hit per pixel; misses are unknown.
pub fn render_semantics(scene: &Scene, intr: &CameraIntrinsics, pose: &Pose) -> LabelImage {
    let mut out = LabelImage::unknown(intr.width, intr.height);
    for py in 0..intr.height {
        for px in 0..intr.width {
            let (origin, dir) = camera_ray(intr, pose, px, py);
            if let Some((_, label)) = cast_ray(scene, origin, dir) {
                out.data[py * intr.width + px] = label;
            }
        }
    }
    out
}

/// Procedural-texture intensity of the hit point per pixel.
pub fn render_image(scene: &Scene, intr: &CameraIntrinsics, pose: &Pose) -> GrayImage {
    let mut out = GrayImage::filled(intr.width, intr.height, 0.0);
    for py in 0..intr.height {
        for px in 0..intr.width {
            let (origin, dir) = camera_ray(intr, pose, px, py);
            if let Some((t, label)) = cast_ray(scene, origin, dir) {
                let p = origin + dir * t;
                out.data[py * intr.width + px] = scene.texture_intensity(label, p);
            }
        }
    }
    out
}

/// Pose of the rectified right eye: the camera shifted along its +x axis.
pub fn right_eye_pose(pose: &Pose, baseline: f64) -> Pose {
    let x_axis_world = pose.rotation.transpose() * Vector3::x();
    let center = pose.center() + baseline * x_axis_world;
    Pose {
        rotation: pose.rotation,
        translation: -(pose.rotation * center.coords),
    }
}

/// One component of a sensor corruption chain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NoiseComponent {
    /// Adds `N(0, a + b d^2)` to every valid pixel.
    Gaussian { a: f64, b: f64 },
    /// With probability `p` per valid pixel, offsets the depth by
    /// `N(0, sigma)`; with `absolute` the depth is replaced by `|N(0, sigma)|`
    /// instead.
    Outlier {
        p: f64,
        sigma: f64,
        #[serde(default)]
        absolute: bool,
    },
    /// Invalidates pixels whose 3x3 image-gradient mean falls below `g_min`.
    LowTextureDropout { g_min: f64 },
}

/// Ordered corruption chain plus the stereo flag.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensorModel {
    pub name: String,
    #[serde(default)]
    pub components: Vec<NoiseComponent>,
    /// Stereo baseline in meters; NCC features exist iff set.
    #[serde(default)]
    pub stereo_baseline: Option<f64>,
}

impl SensorModel {
    pub fn perfect(name: &str) -> Self {
        Self {
            name: name.to_string(),
            components: Vec::new(),
            stereo_baseline: None,
        }
    }

    fn check(&self) -> Result<()> {
        for c in &self.components {
            match *c {
                NoiseComponent::Gaussian { a, b } => {
                    if a < 0.0 || b < 0.0 {
                        return Err(Error::contract("gaussian noise needs a, b >= 0"));
                    }
                }
                NoiseComponent::Outlier { p, sigma, .. } => {
                    if !(0.0..=1.0).contains(&p) || sigma < 0.0 {
                        return Err(Error::contract("outlier model needs p in [0,1], sigma >= 0"));
                    }
                }
                NoiseComponent::LowTextureDropout { g_min } => {
                    if g_min < 0.0 {
                        return Err(Error::contract("dropout threshold must be >= 0"));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Applies the model's components in order. The returned mask flags pixels
/// hit by the outlier component.
pub fn corrupt_with_outlier_mask(
    depth: &DepthMap,
    image: &GrayImage,
    model: &SensorModel,
    rng: &mut ChaCha8Rng,
) -> Result<(DepthMap, Vec<bool>)> {
    model.check()?;
    let mut out = depth.clone();
    let mut outlier_mask = vec![false; depth.data.len()];
    for comp in &model.components {
        match *comp {
            NoiseComponent::Gaussian { a, b } => {
                if a == 0.0 && b == 0.0 {
                    continue;
                }
                for v in out.data.iter_mut() {
                    if v.is_finite() && *v > 0.0 {
                        let std = a + b * *v * *v;
                        if std > 0.0 {
                            let n = Normal::new(0.0, std).expect("valid std");
                            *v += n.sample(rng);
                            if !(*v > 0.0) {
                                *v = f64::NAN;
                            }
                        }
                    }
                }
            }
            NoiseComponent::Outlier { p, sigma, absolute } => {
                for (i, v) in out.data.iter_mut().enumerate() {
                    if v.is_finite() && *v > 0.0 && rng.random::<f64>() < p {
                        outlier_mask[i] = true;
                        if sigma > 0.0 {
                            let n = Normal::new(0.0, sigma).expect("valid std");
                            let draw: f64 = n.sample(rng);
                            *v = if absolute { draw.abs() } else { *v + draw };
                        }
                        if !(*v > 0.0) {
                            *v = f64::NAN;
                        }
                    }
                }
            }
            NoiseComponent::LowTextureDropout { g_min } => {
                for py in 0..out.height {
                    for px in 0..out.width {
                        let (gm, _) = grad_stats(image, (px, py));
                        if gm < g_min {
                            out.set(px, py, f64::NAN);
                        }
                    }
                }
            }
        }
    }
    Ok((out, outlier_mask))
}

/// Applies the corruption chain; see [`corrupt_with_outlier_mask`].
pub fn corrupt(
    depth: &DepthMap,
    image: &GrayImage,
    model: &SensorModel,
    rng: &mut ChaCha8Rng,
) -> Result<DepthMap> {
    Ok(corrupt_with_outlier_mask(depth, image, model, rng)?.0)
}

/// Inward-looking ring of poses inside the room with alternating tilt so
/// floor, ceiling and all walls are covered.
pub fn generate_trajectory(scene: &Scene, n_views: usize, seed: u64) -> Result<Vec<Pose>> {
    if n_views < 1 {
        return Err(Error::contract("trajectory needs at least one view"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lo = scene.interior_min;
    let hi = scene.interior_max;
    let center = Point3::new(
        0.5 * (lo[0] + hi[0]),
        0.5 * (lo[1] + hi[1]),
        0.5 * (lo[2] + hi[2]),
    );
    let half_x = 0.5 * (hi[0] - lo[0]);
    let half_y = 0.5 * (hi[1] - lo[1]);
    let height = hi[2] - lo[2];
    let radius = 0.52 * half_x.min(half_y);
    // Eye heights cycle low/mid/high so under-furniture floor and the
    // ceiling both get frontal views; targets cycle tilt the same way.
    let eye_fracs = [0.16, 0.5, 0.8];
    let target_fracs = [0.1, 0.5, 0.9];

    let mut poses = Vec::with_capacity(n_views);
    for i in 0..n_views {
        let theta = 2.0 * std::f64::consts::PI * i as f64 / n_views as f64
            + rng.random_range(-0.06..0.06);
        let eye_z =
            lo[2] + height * (eye_fracs[i % eye_fracs.len()] + rng.random_range(-0.03..0.03));
        let eye = Point3::new(
            center.x + radius * theta.cos(),
            center.y + radius * theta.sin(),
            eye_z,
        );
        // Aim past the center so the opposite wall, floor and ceiling all
        // get frontal coverage as the tilt cycles.
        let tz = lo[2] + height * target_fracs[(i / eye_fracs.len()) % target_fracs.len()];
        let target = Point3::new(
            center.x - 0.3 * radius * theta.cos() + rng.random_range(-0.2..0.2),
            center.y - 0.3 * radius * theta.sin() + rng.random_range(-0.2..0.2),
            tz,
        );
        poses.push(Pose::look_at(eye, target, Vector3::z())?);
    }
    Ok(poses)
}

/// Renders one clean view of the scene (depth, intensity, semantics, and the
/// right-eye image for stereo sensors).
pub fn render_view(
    scene: &Scene,
    intr: &CameraIntrinsics,
    pose: &Pose,
    stereo_baseline: Option<f64>,
) -> SensorView {
    SensorView {
        pose: *pose,
        depth: render_depth(scene, intr, pose),
        image: render_image(scene, intr, pose),
        semantics: render_semantics(scene, intr, pose),
        right_image: stereo_baseline
            .map(|b| render_image(scene, intr, &right_eye_pose(pose, b))),
    }
}

/// Renders and corrupts all views of one sensor along the trajectory.
/// Returns the views plus the per-view outlier masks. RNG streams derive
/// from `seed` per view.
pub fn capture_sensor(
    scene: &Scene,
    intr: &CameraIntrinsics,
    poses: &[Pose],
    model: &SensorModel,
    seed: u64,
) -> Result<(SensorViews, Vec<Vec<bool>>)> {
    let mut views = Vec::with_capacity(poses.len());
    let mut masks = Vec::with_capacity(poses.len());
    for (i, pose) in poses.iter().enumerate() {
        let mut view = render_view(scene, intr, pose, model.stereo_baseline);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64 + 1);
        let (depth, mask) = corrupt_with_outlier_mask(&view.depth, &view.image, model, &mut rng)?;
        view.depth = depth;
        views.push(view);
        masks.push(mask);
    }
    Ok((
        SensorViews {
            sensor_name: model.name.clone(),
            intrinsics: *intr,
            views,
            baseline: model.stereo_baseline,
        },
        masks,
    ))
}

/// Scene plus everything needed to capture it: camera, sensors, trajectory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSetup {
    pub scene: Scene,
    pub grid_origin: [f64; 3],
    pub voxel_size: f64,
    pub grid_dims: [usize; 3],
    pub camera: CameraSpec,
    pub sensors: Vec<SensorModel>,
    pub n_views: usize,
    pub trajectory_seed: u64,
    /// Deal the trajectory round-robin across the sensors instead of giving
    /// every sensor every view. Complementary coverage keeps each sensor's
    /// good measurements load-bearing, so the fusion must weigh sensors
    /// per voxel rather than discard one wholesale.
    #[serde(default)]
    pub split_views: bool,
    /// Evidence rule used by the fusion stage.
    #[serde(default)]
    pub fusion: DatacostParams,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraSpec {
    pub width: usize,
    pub height: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl SceneSetup {
    pub fn grid(&self) -> Result<VoxelGridSpec> {
        VoxelGridSpec::new(self.grid_origin, self.voxel_size, self.grid_dims)
    }

    pub fn intrinsics(&self) -> Result<CameraIntrinsics> {
        CameraIntrinsics::new(
            self.camera.fx,
            self.camera.fy,
            self.camera.cx,
            self.camera.cy,
            self.camera.width,
            self.camera.height,
        )
    }

    /// Poses captured by sensor `sensor_idx` out of the full trajectory.
    pub fn sensor_poses(&self, all: &[Pose], sensor_idx: usize) -> Vec<Pose> {
        if !self.split_views || self.sensors.len() < 2 {
            return all.to_vec();
        }
        all.iter()
            .enumerate()
            .filter(|(i, _)| i % self.sensors.len() == sensor_idx)
            .map(|(_, p)| *p)
            .collect()
    }
}

/// Parameters of the procedural room generator.
#[derive(Clone, Debug)]
pub struct RoomParams {
    pub room_size: [f64; 3],
    pub voxel_size: f64,
    pub shell_thickness: f64,
    pub n_clutter_boxes: usize,
    pub n_views: usize,
}

impl Default for RoomParams {
    fn default() -> Self {
        Self {
            room_size: [6.4, 6.4, 3.2],
            voxel_size: 0.1,
            shell_thickness: 0.5,
            n_clutter_boxes: 3,
            n_views: 24,
        }
    }
}

pub const DEFAULT_LABELS: [&str; 6] = ["free", "floor", "wall", "ceiling", "table", "box"];

/// Procedurally samples a default benchmark room: shell slabs, one table,
/// clutter boxes, stripe textures.
pub fn sample_scene(seed: u64, params: &RoomParams) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [sx, sy, sz] = params.room_size;
    let t = params.shell_thickness;
    let (floor, wall, ceiling, table, crate_label) = (1u8, 2, 3, 4, 5);

    let mut boxes = vec![
        LabeledBox {
            label: floor,
            min: [0.0, 0.0, 0.0],
            max: [sx, sy, t],
        },
        LabeledBox {
            label: ceiling,
            min: [0.0, 0.0, sz - t],
            max: [sx, sy, sz],
        },
        LabeledBox {
            label: wall,
            min: [0.0, 0.0, 0.0],
            max: [t, sy, sz],
        },
        LabeledBox {
            label: wall,
            min: [sx - t, 0.0, 0.0],
            max: [sx, sy, sz],
        },
        LabeledBox {
            label: wall,
            min: [0.0, 0.0, 0.0],
            max: [sx, t, sz],
        },
        LabeledBox {
            label: wall,
            min: [0.0, sy - t, 0.0],
            max: [sx, sy, sz],
        },
    ];

    // Table: a slab top on four legs somewhere off-center.
    let tw = rng.random_range(1.0..1.4);
    let td = rng.random_range(0.7..1.0);
    let th = rng.random_range(0.65..0.8);
    let tx = rng.random_range(t + 0.4..sx - t - 0.4 - tw);
    let ty = rng.random_range(t + 0.4..sy - t - 0.4 - td);
    boxes.push(LabeledBox {
        label: table,
        min: [tx, ty, th - 0.1],
        max: [tx + tw, ty + td, th],
    });
    for (lx, ly) in [
        (tx + 0.05, ty + 0.05),
        (tx + tw - 0.15, ty + 0.05),
        (tx + 0.05, ty + td - 0.15),
        (tx + tw - 0.15, ty + td - 0.15),
    ] {
        boxes.push(LabeledBox {
            label: table,
            min: [lx, ly, t],
            max: [lx + 0.1, ly + 0.1, th - 0.1],
        });
    }

    // Clutter boxes on the floor, overlap-free against the table footprint.
    let mut placed: Vec<[f64; 4]> = vec![[tx, ty, tx + tw, ty + td]];
    for _ in 0..params.n_clutter_boxes {
        for _attempt in 0..40 {
            let w = rng.random_range(0.5..1.1);
            let d = rng.random_range(0.5..1.1);
            let h = rng.random_range(0.35..0.75);
            let x = rng.random_range(t + 0.3..sx - t - 0.3 - w);
            let y = rng.random_range(t + 0.3..sy - t - 0.3 - d);
            let rect = [x, y, x + w, y + d];
            let overlaps = placed.iter().any(|r| {
                rect[0] < r[2] + 0.2
                    && r[0] < rect[2] + 0.2
                    && rect[1] < r[3] + 0.2
                    && r[1] < rect[3] + 0.2
            });
            if overlaps {
                continue;
            }
            placed.push(rect);
            boxes.push(LabeledBox {
                label: crate_label,
                min: [x, y, t],
                max: [x + w, y + d, t + h],
            });
            break;
        }
    }

    let textures = vec![
        TextureParams { base: 0.0, stripe_freq: 0.0 },  // free (never rendered)
        TextureParams { base: 0.45, stripe_freq: 5.0 }, // floor
        TextureParams { base: 0.55, stripe_freq: 7.0 }, // wall
        TextureParams { base: 0.5, stripe_freq: 0.0 },  // ceiling: textureless
        TextureParams { base: 0.6, stripe_freq: 9.0 },  // table
        TextureParams { base: 0.35, stripe_freq: 11.0 }, // box
    ];

    Scene {
        name: format!("room{seed}"),
        labels: DEFAULT_LABELS.iter().map(|s| s.to_string()).collect(),
        boxes,
        interior_min: [t, t, t],
        interior_max: [sx - t, sy - t, sz - t],
        textures,
    }
}

/// Default full setup around [`sample_scene`]: two Kinect-like sensors, the
/// second with sparse large outliers.
pub fn sample_scene_setup(seed: u64, params: &RoomParams) -> SceneSetup {
    let scene = sample_scene(seed, params);
    let [sx, sy, sz] = params.room_size;
    let dims = [
        (sx / params.voxel_size).round() as usize,
        (sy / params.voxel_size).round() as usize,
        (sz / params.voxel_size).round() as usize,
    ];
    SceneSetup {
        scene,
        grid_origin: [0.0, 0.0, 0.0],
        voxel_size: params.voxel_size,
        grid_dims: dims,
        camera: CameraSpec {
            width: 80,
            height: 60,
            fx: 60.0,
            fy: 60.0,
            cx: 40.0,
            cy: 30.0,
        },
        sensors: vec![
            SensorModel {
                name: "kinect".into(),
                components: vec![NoiseComponent::Gaussian { a: 0.002, b: 0.002 }],
                stereo_baseline: None,
            },
            SensorModel {
                name: "kinect_noisy".into(),
                components: vec![
                    NoiseComponent::Gaussian { a: 0.002, b: 0.002 },
                    NoiseComponent::Outlier {
                        p: 0.01,
                        sigma: 2.0,
                        absolute: false,
                    },
                ],
                stereo_baseline: None,
            },
        ],
        n_views: params.n_views,
        trajectory_seed: seed.wrapping_mul(0x9e37_79b9).wrapping_add(7),
        split_views: true,
        // Benchmark rooms keep the free-space vote deliberately weak: a
        // sparse wrong measurement must be able to contest the evidence at
        // its landing voxel, otherwise view redundancy hides every outlier
        // and there is nothing for per-voxel confidences to learn.
        fusion: DatacostParams {
            delta_free: 0.02,
            ..DatacostParams::default()
        },
    }
}
