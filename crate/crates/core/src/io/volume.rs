use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::IoError;
use crate::grid::Grid;
use crate::sh::{DwiVolume, GradientScheme};
use crate::{Real, ShVolume};

pub const VOLUME_VERSION: u32 = 1;

/// Channel interpretation of a volume payload.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ValueKind {
    Scalar,
    Sh(usize),
    Dwi(usize),
    /// Generic multi-channel stack (masks, ROI sets).
    Stack(usize),
}

impl ValueKind {
    pub fn channels(&self) -> usize {
        match *self {
            ValueKind::Scalar => 1,
            ValueKind::Sh(m) => m,
            ValueKind::Dwi(n) => n,
            ValueKind::Stack(n) => n,
        }
    }

    pub fn tag(&self) -> String {
        match *self {
            ValueKind::Scalar => "scalar".into(),
            ValueKind::Sh(m) => format!("sh:{m}"),
            ValueKind::Dwi(n) => format!("dwi:{n}"),
            ValueKind::Stack(n) => format!("stack:{n}"),
        }
    }

    pub fn parse(tag: &str) -> Result<Self, IoError> {
        let bad = |reason: &str| IoError::BadField {
            field: "value_kind".into(),
            reason: format!("{reason}: '{tag}'"),
        };
        if tag == "scalar" {
            return Ok(ValueKind::Scalar);
        }
        let (kind, count) = tag.split_once(':').ok_or_else(|| bad("expected kind:count"))?;
        let n: usize = count.parse().map_err(|_| bad("count is not a number"))?;
        if n == 0 {
            return Err(bad("channel count must be positive"));
        }
        match kind {
            "sh" => Ok(ValueKind::Sh(n)),
            "dwi" => Ok(ValueKind::Dwi(n)),
            "stack" => Ok(ValueKind::Stack(n)),
            _ => Err(bad("unknown kind")),
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VolumeHeader {
    version: u32,
    dims: [usize; 3],
    voxel_size: [f64; 3],
    value_kind: String,
    endianness: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    scheme: Option<GradientScheme>,
}

/// In-memory image of a native volume file pair. The payload is
/// little-endian f32, channel-major: one full x-fastest 3D volume per
/// channel.
#[derive(Clone, Debug)]
pub struct VolumeContainer {
    pub grid: Grid,
    pub kind: ValueKind,
    pub scheme: Option<GradientScheme>,
    pub data: Vec<f32>,
}

impl VolumeContainer {
    pub fn new(grid: Grid, kind: ValueKind, data: Vec<f32>) -> Result<Self, IoError> {
        let want = grid.num_voxels() * kind.channels();
        if data.len() != want {
            return Err(IoError::PayloadSize { got: data.len() * 4, want: want * 4 });
        }
        Ok(VolumeContainer { grid, kind, scheme: None, data })
    }

    pub fn from_scalar(grid: Grid, values: &[Real]) -> Result<Self, IoError> {
        Self::new(grid, ValueKind::Scalar, values.iter().map(|&v| v as f32).collect())
    }

    pub fn from_mask(grid: Grid, mask: &[bool]) -> Result<Self, IoError> {
        Self::new(grid, ValueKind::Scalar, mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect())
    }

    /// Stacks several masks into one multi-channel volume.
    pub fn from_mask_stack(grid: Grid, masks: &[Vec<bool>]) -> Result<Self, IoError> {
        let mut data = Vec::with_capacity(grid.num_voxels() * masks.len());
        for m in masks {
            if m.len() != grid.num_voxels() {
                return Err(IoError::PayloadSize { got: m.len() * 4, want: grid.num_voxels() * 4 });
            }
            data.extend(m.iter().map(|&x| if x { 1.0f32 } else { 0.0 }));
        }
        Self::new(grid, ValueKind::Stack(masks.len()), data)
    }

    pub fn to_mask(&self) -> Vec<bool> {
        self.data.iter().map(|&v| v != 0.0).collect()
    }

    pub fn to_mask_stack(&self) -> Vec<Vec<bool>> {
        let n = self.grid.num_voxels();
        (0..self.kind.channels())
            .map(|c| self.data[c * n..(c + 1) * n].iter().map(|&v| v != 0.0).collect())
            .collect()
    }

    /// Converts the voxel-major in-memory DWI to the channel-major payload.
    pub fn from_dwi(dwi: &DwiVolume<Real>) -> Self {
        let n = dwi.grid.num_voxels();
        let ch = dwi.scheme.len();
        let mut data = vec![0.0f32; n * ch];
        for v in 0..n {
            let row = dwi.channels(v);
            for c in 0..ch {
                data[c * n + v] = row[c] as f32;
            }
        }
        VolumeContainer {
            grid: dwi.grid,
            kind: ValueKind::Dwi(ch),
            scheme: Some(dwi.scheme.clone()),
            data,
        }
    }

    pub fn to_dwi(&self) -> Result<DwiVolume<Real>, IoError> {
        let scheme = self.scheme.clone().ok_or_else(|| IoError::BadField {
            field: "scheme".into(),
            reason: "missing gradient scheme on a dwi volume".into(),
        })?;
        let n = self.grid.num_voxels();
        let ch = self.kind.channels();
        if scheme.len() != ch {
            return Err(IoError::BadField {
                field: "scheme".into(),
                reason: format!("{} entries for {} channels", scheme.len(), ch),
            });
        }
        let mut data = vec![0.0; n * ch];
        for c in 0..ch {
            for v in 0..n {
                data[v * ch + c] = self.data[c * n + v] as Real;
            }
        }
        DwiVolume::new(self.grid, scheme, data)
            .map_err(|e| IoError::Header(e.to_string()))
    }

    pub fn from_sh(sh: &ShVolume) -> Self {
        let n = sh.grid.num_voxels();
        let m = sh.n_coeffs;
        let mut data = vec![0.0f32; n * m];
        for v in 0..n {
            let row = sh.voxel_coeffs(v);
            for c in 0..m {
                data[c * n + v] = row[c] as f32;
            }
        }
        VolumeContainer { grid: sh.grid, kind: ValueKind::Sh(m), scheme: None, data }
    }

    pub fn to_sh(&self) -> ShVolume {
        let n = self.grid.num_voxels();
        let m = self.kind.channels();
        let mut coeffs = vec![0.0; n * m];
        for c in 0..m {
            for v in 0..n {
                coeffs[v * m + c] = self.data[c * n + v] as Real;
            }
        }
        ShVolume { grid: self.grid, n_coeffs: m, coeffs }
    }
}

fn paths(stem: &Path) -> (PathBuf, PathBuf) {
    (stem.with_extension("json"), stem.with_extension("raw"))
}

/// Writes `<stem>.json` (header) and `<stem>.raw` (payload, f32 LE).
pub fn write_volume(stem: &Path, container: &VolumeContainer) -> Result<(), IoError> {
    let (hp, rp) = paths(stem);
    let header = VolumeHeader {
        version: VOLUME_VERSION,
        dims: container.grid.dims,
        voxel_size: container.grid.voxel_size,
        value_kind: container.kind.tag(),
        endianness: "little".into(),
        scheme: container.scheme.clone(),
    };
    let want = container.grid.num_voxels() * container.kind.channels();
    if container.data.len() != want {
        return Err(IoError::PayloadSize { got: container.data.len() * 4, want: want * 4 });
    }
    let mut bytes = Vec::with_capacity(container.data.len() * 4);
    for v in &container.data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(hp, serde_json::to_vec_pretty(&header).expect("header serializes"))?;
    fs::write(rp, bytes)?;
    Ok(())
}

pub fn read_volume(stem: &Path) -> Result<VolumeContainer, IoError> {
    let (hp, rp) = paths(stem);
    let header: VolumeHeader = serde_json::from_slice(&fs::read(&hp)?)
        .map_err(|e| IoError::Header(format!("{}: {e}", hp.display())))?;
    if header.version != VOLUME_VERSION {
        return Err(IoError::Version { what: "volume", got: header.version, want: VOLUME_VERSION });
    }
    if header.endianness != "little" {
        return Err(IoError::BadField {
            field: "endianness".into(),
            reason: format!("'{}' unsupported", header.endianness),
        });
    }
    let kind = ValueKind::parse(&header.value_kind)?;
    let grid = Grid::new(header.dims, header.voxel_size);
    let raw = fs::read(&rp)?;
    let want = grid.num_voxels() * kind.channels() * 4;
    if raw.len() != want {
        return Err(IoError::PayloadSize { got: raw.len(), want });
    }
    let data: Vec<f32> =
        raw.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
    if matches!(kind, ValueKind::Dwi(_)) && header.scheme.is_none() {
        return Err(IoError::BadField {
            field: "scheme".into(),
            reason: "dwi volume missing gradient scheme".into(),
        });
    }
    Ok(VolumeContainer { grid, kind, scheme: header.scheme, data })
}
