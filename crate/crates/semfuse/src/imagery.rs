//! Depth maps, intensity images and label images produced by sensors.

use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, Pose};

/// Label id marking pixels without a semantic label.
pub const UNKNOWN_LABEL: u8 = u8::MAX;

/// Row-major depth image in meters. Invalid pixels hold NaN.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl DepthMap {
    pub fn invalid(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![f64::NAN; width * height],
        }
    }

    pub fn from_data(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::contract(format!(
                "depth buffer length {} does not match {}x{}",
                data.len(),
                width,
                height
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.data[y * self.width + x] = v;
    }

    /// Measured depth at a pixel, `None` for invalid measurements.
    #[inline]
    pub fn get(&self, x: usize, y: usize) -> Option<f64> {
        let d = self.at(x, y);
        if d.is_finite() && d > 0.0 {
            Some(d)
        } else {
            None
        }
    }

    pub fn valid_count(&self) -> usize {
        self.data.iter().filter(|d| d.is_finite() && **d > 0.0).count()
    }
}

/// Row-major grayscale image, intensities nominally in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl GrayImage {
    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    /// Sample with coordinates clamped to the image border.
    #[inline]
    pub fn at_clamped(&self, x: isize, y: isize) -> f64 {
        let xc = x.clamp(0, self.width as isize - 1) as usize;
        let yc = y.clamp(0, self.height as isize - 1) as usize;
        self.at(xc, yc)
    }
}

/// Row-major per-pixel semantic label ids; `UNKNOWN_LABEL` marks misses.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl LabelImage {
    pub fn unknown(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![UNKNOWN_LABEL; width * height],
        }
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }
}

/// One captured view: depth plus the images the feature extractor samples.
#[derive(Clone, Debug)]
pub struct SensorView {
    pub pose: Pose,
    pub depth: DepthMap,
    pub image: GrayImage,
    pub semantics: LabelImage,
    /// Right-eye image for stereo sensors, rectified along +x with the
    /// baseline below.
    pub right_image: Option<GrayImage>,
}

/// All views captured by one sensor over a trajectory.
#[derive(Clone, Debug)]
pub struct SensorViews {
    pub sensor_name: String,
    pub intrinsics: CameraIntrinsics,
    pub views: Vec<SensorView>,
    /// Stereo baseline in meters; `Some` iff the sensor is stereo.
    pub baseline: Option<f64>,
}

impl SensorViews {
    pub fn is_stereo(&self) -> bool {
        self.baseline.is_some()
    }
}
