//! Versioned binary container for voxel volumes.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! offset 0   magic       8 bytes  "SEMFVOL1"
//!        8   version     u32      currently 1
//!       12   kind        u8       0 tsdf | 1 datacost | 2 labels |
//!                                 3 confidence | 4 features
//!       13   channels    u32
//!       17   dims        3 x u32
//!       29   origin      3 x f64
//!       53   voxel_size  f64
//!       61   n_labels    u32      then per label: u32 length + UTF-8 bytes
//!        -   payload     dims.product() * channels x f32
//! ```
//!
//! The payload is channel-major; within a channel, voxels are x-fastest
//! row-major. Label grids store the label index as f32 with -1 for unknown.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::fusion::{ConfidenceVolume, SemanticDatacost, TsdfVolume};
use crate::features::FeatureVolume;
use crate::geometry::VoxelGridSpec;
use crate::imagery::UNKNOWN_LABEL;
use crate::varsolver::LabelVolume;

pub const MAGIC: [u8; 8] = *b"SEMFVOL1";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VolumeKind {
    Tsdf = 0,
    Datacost = 1,
    Labels = 2,
    Confidence = 3,
    Features = 4,
}

impl VolumeKind {
    fn from_u8(v: u8, offset: u64) -> Result<Self> {
        Ok(match v {
            0 => VolumeKind::Tsdf,
            1 => VolumeKind::Datacost,
            2 => VolumeKind::Labels,
            3 => VolumeKind::Confidence,
            4 => VolumeKind::Features,
            _ => return Err(Error::format(offset, format!("unknown volume kind {v}"))),
        })
    }
}

/// In-memory image of the on-disk format.
#[derive(Clone, Debug, PartialEq)]
pub struct VolumeFile {
    pub kind: VolumeKind,
    pub spec: VoxelGridSpec,
    pub channels: usize,
    pub labels: Vec<String>,
    /// Channel-major, x-fastest per channel.
    pub payload: Vec<f32>,
}

impl VolumeFile {
    pub fn new(
        kind: VolumeKind,
        spec: VoxelGridSpec,
        channels: usize,
        labels: Vec<String>,
        payload: Vec<f32>,
    ) -> Result<Self> {
        if payload.len() != spec.n_voxels() * channels {
            return Err(Error::contract(format!(
                "payload length {} does not match {} voxels x {} channels",
                payload.len(),
                spec.n_voxels(),
                channels
            )));
        }
        Ok(Self {
            kind,
            spec,
            channels,
            labels,
            payload,
        })
    }

    pub fn from_tsdf(v: &TsdfVolume) -> Result<Self> {
        let mut payload: Vec<f32> = Vec::with_capacity(2 * v.values.len());
        payload.extend(v.values.iter().map(|&x| x as f32));
        payload.extend(v.weights.iter().map(|&x| x as f32));
        Self::new(VolumeKind::Tsdf, v.spec, 2, Vec::new(), payload)
    }

    pub fn to_tsdf(&self, trunc: f64) -> Result<TsdfVolume> {
        if self.kind != VolumeKind::Tsdf || self.channels != 2 {
            return Err(Error::contract("not a 2-channel tsdf volume"));
        }
        let n = self.spec.n_voxels();
        Ok(TsdfVolume {
            spec: self.spec,
            values: self.payload[..n].iter().map(|&x| x as f64).collect(),
            weights: self.payload[n..].iter().map(|&x| x as f64).collect(),
            trunc,
        })
    }

    pub fn from_datacost(dc: &SemanticDatacost) -> Result<Self> {
        Self::new(
            VolumeKind::Datacost,
            dc.spec,
            dc.labels.len(),
            dc.labels.names().to_vec(),
            dc.cost.iter().map(|&x| x as f32).collect(),
        )
    }

    pub fn to_datacost(&self) -> Result<SemanticDatacost> {
        if self.kind != VolumeKind::Datacost {
            return Err(Error::contract("not a datacost volume"));
        }
        Ok(SemanticDatacost {
            spec: self.spec,
            labels: crate::fusion::LabelSet::new(self.labels.clone())?,
            cost: self.payload.iter().map(|&x| x as f64).collect(),
        })
    }

    pub fn from_label_grid(
        grid: &[u8],
        spec: VoxelGridSpec,
        labels: Vec<String>,
    ) -> Result<Self> {
        let payload = grid
            .iter()
            .map(|&g| if g == UNKNOWN_LABEL { -1.0 } else { g as f32 })
            .collect();
        Self::new(VolumeKind::Labels, spec, 1, labels, payload)
    }

    pub fn to_label_grid(&self) -> Result<Vec<u8>> {
        if self.kind != VolumeKind::Labels {
            return Err(Error::contract("not a label volume"));
        }
        Ok(self
            .payload
            .iter()
            .map(|&v| if v < 0.0 { UNKNOWN_LABEL } else { v as u8 })
            .collect())
    }

    pub fn from_confidence(c: &ConfidenceVolume) -> Result<Self> {
        Self::new(
            VolumeKind::Confidence,
            c.spec,
            1,
            Vec::new(),
            c.conf.iter().map(|&x| x as f32).collect(),
        )
    }

    /// Features serialize plane-major: channel `k < dim` holds feature `k`,
    /// the last channel the view count.
    pub fn from_features(f: &FeatureVolume) -> Result<Self> {
        let n = f.spec.n_voxels();
        let mut payload = vec![0.0f32; n * (f.dim + 1)];
        for v in 0..n {
            for k in 0..f.dim {
                payload[k * n + v] = f.data[v * f.dim + k] as f32;
            }
        }
        for v in 0..n {
            payload[f.dim * n + v] = f.count[v] as f32;
        }
        let mut vf = Self::new(
            VolumeKind::Features,
            f.spec,
            f.dim + 1,
            Vec::new(),
            payload,
        )?;
        vf.labels = vec![f.sensor_name.clone(), format!("stereo={}", f.stereo)];
        Ok(vf)
    }

    pub fn to_features(&self) -> Result<FeatureVolume> {
        if self.kind != VolumeKind::Features || self.channels < 2 {
            return Err(Error::contract("not a feature volume"));
        }
        let n = self.spec.n_voxels();
        let dim = self.channels - 1;
        let mut data = vec![0.0; n * dim];
        for v in 0..n {
            for k in 0..dim {
                data[v * dim + k] = self.payload[k * n + v] as f64;
            }
        }
        let count = self.payload[dim * n..(dim + 1) * n]
            .iter()
            .map(|&x| x as f64)
            .collect();
        let sensor_name = self.labels.first().cloned().unwrap_or_default();
        let stereo = self
            .labels
            .get(1)
            .map(|s| s == "stereo=true")
            .unwrap_or(false);
        Ok(FeatureVolume {
            spec: self.spec,
            sensor_name,
            stereo,
            dim,
            data,
            count,
        })
    }

    pub fn from_label_volume(u: &LabelVolume) -> Result<Self> {
        Self::new(
            VolumeKind::Datacost,
            u.spec,
            u.labels.len(),
            u.labels.names().to_vec(),
            u.u.iter().map(|&x| x as f32).collect(),
        )
    }
}

struct CountingWriter<W: Write> {
    inner: W,
}

impl<W: Write> CountingWriter<W> {
    fn le_u32(&mut self, v: u32) -> Result<()> {
        self.inner.write_all(&v.to_le_bytes())?;
        Ok(())
    }
    fn le_f64(&mut self, v: f64) -> Result<()> {
        self.inner.write_all(&v.to_le_bytes())?;
        Ok(())
    }
}

/// Serializes the volume; `load_volume(save_volume(v)) == v` bitwise.
pub fn save_volume(path: &Path, v: &VolumeFile) -> Result<()> {
    let file = File::create(path)?;
    let mut w = CountingWriter {
        inner: BufWriter::new(file),
    };
    w.inner.write_all(&MAGIC)?;
    w.le_u32(VERSION)?;
    w.inner.write_all(&[v.kind as u8])?;
    w.le_u32(v.channels as u32)?;
    for d in v.spec.dims {
        w.le_u32(d as u32)?;
    }
    for o in v.spec.origin {
        w.le_f64(o)?;
    }
    w.le_f64(v.spec.voxel_size)?;
    w.le_u32(v.labels.len() as u32)?;
    for l in &v.labels {
        w.le_u32(l.len() as u32)?;
        w.inner.write_all(l.as_bytes())?;
    }
    for p in &v.payload {
        w.inner.write_all(&p.to_le_bytes())?;
    }
    w.inner.flush()?;
    Ok(())
}

struct OffsetReader<R: Read> {
    inner: R,
    offset: u64,
}

impl<R: Read> OffsetReader<R> {
    fn read_exact(&mut self, buf: &mut [u8], what: &str) -> Result<()> {
        let at = self.offset;
        self.inner
            .read_exact(buf)
            .map_err(|_| Error::format(at, format!("truncated while reading {what}")))?;
        self.offset += buf.len() as u64;
        Ok(())
    }
    fn le_u32(&mut self, what: &str) -> Result<u32> {
        let mut b = [0u8; 4];
        self.read_exact(&mut b, what)?;
        Ok(u32::from_le_bytes(b))
    }
    fn le_f64(&mut self, what: &str) -> Result<f64> {
        let mut b = [0u8; 8];
        self.read_exact(&mut b, what)?;
        Ok(f64::from_le_bytes(b))
    }
}

pub fn load_volume(path: &Path) -> Result<VolumeFile> {
    let file = File::open(path)?;
    let mut r = OffsetReader {
        inner: BufReader::new(file),
        offset: 0,
    };
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic, "magic")?;
    if magic != MAGIC {
        return Err(Error::format(0, "bad magic bytes"));
    }
    let version_at = r.offset;
    let version = r.le_u32("version")?;
    if version != VERSION {
        return Err(Error::format(
            version_at,
            format!("unsupported version {version} (expected {VERSION})"),
        ));
    }
    let kind_at = r.offset;
    let mut kind = [0u8; 1];
    r.read_exact(&mut kind, "kind")?;
    let kind = VolumeKind::from_u8(kind[0], kind_at)?;
    let channels = r.le_u32("channels")? as usize;
    let dims = [
        r.le_u32("dims[0]")? as usize,
        r.le_u32("dims[1]")? as usize,
        r.le_u32("dims[2]")? as usize,
    ];
    let origin = [
        r.le_f64("origin[0]")?,
        r.le_f64("origin[1]")?,
        r.le_f64("origin[2]")?,
    ];
    let voxel_size = r.le_f64("voxel_size")?;
    let spec = VoxelGridSpec::new(origin, voxel_size, dims)
        .map_err(|e| Error::format(17, format!("invalid grid spec: {e}")))?;
    let n_labels = r.le_u32("label count")? as usize;
    let mut labels = Vec::with_capacity(n_labels);
    for i in 0..n_labels {
        let len = r.le_u32("label length")? as usize;
        let mut bytes = vec![0u8; len];
        let at = r.offset;
        r.read_exact(&mut bytes, "label bytes")?;
        labels.push(String::from_utf8(bytes).map_err(|_| {
            Error::format(at, format!("label {i} is not valid UTF-8"))
        })?);
    }
    let n_payload = spec.n_voxels() * channels;
    let mut payload = Vec::with_capacity(n_payload);
    let mut buf = [0u8; 4];
    for _ in 0..n_payload {
        r.read_exact(&mut buf, "payload")?;
        payload.push(f32::from_le_bytes(buf));
    }
    // Trailing bytes indicate a corrupt length field somewhere upstream.
    let mut probe = [0u8; 1];
    if r.inner.read(&mut probe)? != 0 {
        return Err(Error::format(r.offset, "trailing bytes after payload"));
    }
    VolumeFile::new(kind, spec, channels, labels, payload)
}
