//! Binary bundle of one sensor's captured views: intrinsics, per-view poses
//! and the depth/intensity/label images, plus the right-eye image for
//! stereo sensors. Little-endian throughout; images are f32 (depth,
//! intensity) or u8 (labels), row-major.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, Pose};
use crate::imagery::{DepthMap, GrayImage, LabelImage, SensorView, SensorViews};

pub const MAGIC: [u8; 8] = *b"SEMFVWS1";
pub const VERSION: u32 = 1;

pub fn save_views(path: &Path, views: &SensorViews) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let name = views.sensor_name.as_bytes();
    w.write_all(&(name.len() as u32).to_le_bytes())?;
    w.write_all(name)?;
    match views.baseline {
        Some(b) => {
            w.write_all(&[1u8])?;
            w.write_all(&b.to_le_bytes())?;
        }
        None => {
            w.write_all(&[0u8])?;
            w.write_all(&0f64.to_le_bytes())?;
        }
    }
    let i = &views.intrinsics;
    for v in [i.fx, i.fy, i.cx, i.cy] {
        w.write_all(&v.to_le_bytes())?;
    }
    w.write_all(&(i.width as u32).to_le_bytes())?;
    w.write_all(&(i.height as u32).to_le_bytes())?;
    w.write_all(&(views.views.len() as u32).to_le_bytes())?;
    for view in &views.views {
        for r in 0..3 {
            for c in 0..3 {
                w.write_all(&view.pose.rotation[(r, c)].to_le_bytes())?;
            }
        }
        for r in 0..3 {
            w.write_all(&view.pose.translation[r].to_le_bytes())?;
        }
        for d in &view.depth.data {
            w.write_all(&(*d as f32).to_le_bytes())?;
        }
        for p in &view.image.data {
            w.write_all(&(*p as f32).to_le_bytes())?;
        }
        w.write_all(&view.semantics.data)?;
        match (&view.right_image, views.baseline) {
            (Some(img), Some(_)) => {
                w.write_all(&[1u8])?;
                for p in &img.data {
                    w.write_all(&(*p as f32).to_le_bytes())?;
                }
            }
            _ => w.write_all(&[0u8])?,
        }
    }
    w.flush()?;
    Ok(())
}

struct Rd<R: Read> {
    inner: R,
    offset: u64,
}

impl<R: Read> Rd<R> {
    fn bytes(&mut self, buf: &mut [u8], what: &str) -> Result<()> {
        let at = self.offset;
        self.inner
            .read_exact(buf)
            .map_err(|_| Error::format(at, format!("truncated while reading {what}")))?;
        self.offset += buf.len() as u64;
        Ok(())
    }
    fn u32(&mut self, what: &str) -> Result<u32> {
        let mut b = [0u8; 4];
        self.bytes(&mut b, what)?;
        Ok(u32::from_le_bytes(b))
    }
    fn f64(&mut self, what: &str) -> Result<f64> {
        let mut b = [0u8; 8];
        self.bytes(&mut b, what)?;
        Ok(f64::from_le_bytes(b))
    }
    fn f32_image(&mut self, w: usize, h: usize, what: &str) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(w * h);
        let mut b = [0u8; 4];
        for _ in 0..w * h {
            self.bytes(&mut b, what)?;
            out.push(f32::from_le_bytes(b) as f64);
        }
        Ok(out)
    }
}

pub fn load_views(path: &Path) -> Result<SensorViews> {
    let mut r = Rd {
        inner: BufReader::new(File::open(path)?),
        offset: 0,
    };
    let mut magic = [0u8; 8];
    r.bytes(&mut magic, "magic")?;
    if magic != MAGIC {
        return Err(Error::format(0, "bad magic bytes"));
    }
    let version_at = r.offset;
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::format(
            version_at,
            format!("unsupported version {version}"),
        ));
    }
    let name_len = r.u32("sensor name length")? as usize;
    let mut name = vec![0u8; name_len];
    let at = r.offset;
    r.bytes(&mut name, "sensor name")?;
    let sensor_name =
        String::from_utf8(name).map_err(|_| Error::format(at, "sensor name not UTF-8"))?;
    let mut flag = [0u8; 1];
    r.bytes(&mut flag, "stereo flag")?;
    let baseline_value = r.f64("baseline")?;
    let baseline = (flag[0] == 1).then_some(baseline_value);
    let fx = r.f64("fx")?;
    let fy = r.f64("fy")?;
    let cx = r.f64("cx")?;
    let cy = r.f64("cy")?;
    let width = r.u32("width")? as usize;
    let height = r.u32("height")? as usize;
    let intrinsics = CameraIntrinsics::new(fx, fy, cx, cy, width, height)
        .map_err(|e| Error::format(21 + name_len as u64, format!("invalid intrinsics: {e}")))?;
    let n_views = r.u32("view count")? as usize;
    let mut views = Vec::with_capacity(n_views);
    for vi in 0..n_views {
        let mut rot = Matrix3::zeros();
        for row in 0..3 {
            for col in 0..3 {
                rot[(row, col)] = r.f64("rotation")?;
            }
        }
        let t = Vector3::new(r.f64("t0")?, r.f64("t1")?, r.f64("t2")?);
        let pose = Pose::new(rot, t)
            .map_err(|e| Error::format(r.offset, format!("view {vi}: {e}")))?;
        let depth = DepthMap::from_data(width, height, r.f32_image(width, height, "depth")?)?;
        let image = GrayImage {
            width,
            height,
            data: r.f32_image(width, height, "image")?,
        };
        let mut sem = vec![0u8; width * height];
        r.bytes(&mut sem, "semantics")?;
        let semantics = LabelImage {
            width,
            height,
            data: sem,
        };
        let mut has_right = [0u8; 1];
        r.bytes(&mut has_right, "right-image flag")?;
        let right_image = if has_right[0] == 1 {
            Some(GrayImage {
                width,
                height,
                data: r.f32_image(width, height, "right image")?,
            })
        } else {
            None
        };
        views.push(SensorView {
            pose,
            depth,
            image,
            semantics,
            right_image,
        });
    }
    Ok(SensorViews {
        sensor_name,
        intrinsics,
        views,
        baseline,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simdata::{render_view, sample_scene, RoomParams};
    use tempfile::tempdir;

    #[test]
    fn roundtrip_preserves_f32_images_and_poses() {
        let scene = sample_scene(1, &RoomParams::default());
        let intr = CameraIntrinsics::new(60.0, 60.0, 40.0, 30.0, 80, 60).unwrap();
        let poses = crate::simdata::generate_trajectory(&scene, 2, 5).unwrap();
        let views: Vec<SensorView> = poses
            .iter()
            .map(|p| render_view(&scene, &intr, p, Some(0.2)))
            .collect();
        let bundle = SensorViews {
            sensor_name: "stereoA".into(),
            intrinsics: intr,
            views,
            baseline: Some(0.2),
        };
        let dir = tempdir().unwrap();
        let path = dir.path().join("views.svw");
        save_views(&path, &bundle).unwrap();
        let loaded = load_views(&path).unwrap();
        assert_eq!(loaded.sensor_name, "stereoA");
        assert_eq!(loaded.baseline, Some(0.2));
        assert_eq!(loaded.views.len(), 2);
        // Poses survive exactly (f64); images as f32.
        assert_eq!(loaded.views[0].pose.rotation, bundle.views[0].pose.rotation);
        for (a, b) in loaded.views[0]
            .depth
            .data
            .iter()
            .zip(bundle.views[0].depth.data.iter())
        {
            if b.is_finite() {
                assert!((a - b).abs() < 1e-6);
            } else {
                assert!(!a.is_finite());
            }
        }
        assert_eq!(loaded.views[0].semantics, bundle.views[0].semantics);
        assert!(loaded.views[0].right_image.is_some());
        // Saving the loaded bundle reproduces identical bytes.
        let path2 = dir.path().join("views2.svw");
        save_views(&path2, &loaded).unwrap();
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(&path2).unwrap()
        );
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("views.svw");
        std::fs::write(&path, b"NOTAFILE").unwrap();
        assert!(matches!(
            load_views(&path),
            Err(Error::Format { offset: 0, .. })
        ));
    }
}
