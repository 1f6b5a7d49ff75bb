//! Volume samples and the `.vvol` on-disk container.
//!
//! Container layout (all little-endian): magic `VVOL`, format version `u16`,
//! `u32` H, W, D, flags `u8` (bit0 = labels present), dtype `u8` (0 = f32
//! intensities), then `H*W*D` f32 intensities in z-major order, then (if
//! flagged) `H*W*D` u8 labels in the same order.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, WriteBytesExt};

use crate::error::{Error, Result};
use crate::grid::{ChannelGrid, GridShape, LabelGrid, VolumeGrid};

const MAGIC: &[u8; 4] = b"VVOL";
const FORMAT_VERSION: u16 = 1;
const DTYPE_F32: u8 = 0;
const FLAG_LABELS: u8 = 0b0000_0001;
/// Upper bound on voxels accepted from a header, guards malformed files.
const MAX_VOXELS: usize = 1 << 31;

/// One scan: intensity grid, optional label grid, metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct VolumeSample {
    pub id: String,
    pub intensities: VolumeGrid,
    pub labels: Option<LabelGrid>,
    /// Millimetres, informational only; not persisted by the container.
    pub voxel_spacing: Option<[f32; 3]>,
}

impl VolumeSample {
    pub fn new(id: impl Into<String>, intensities: VolumeGrid, labels: Option<LabelGrid>) -> Result<Self> {
        if let Some(ref l) = labels {
            if l.shape() != intensities.shape() {
                return Err(Error::ShapeMismatch(format!(
                    "label grid {} does not match intensity grid {}",
                    l.shape(),
                    intensities.shape()
                )));
            }
        }
        let s = intensities.shape();
        if s.h == 0 || s.w == 0 || s.d == 0 {
            return Err(Error::ShapeMismatch(format!("degenerate shape {s}")));
        }
        Ok(Self {
            id: id.into(),
            intensities,
            labels,
            voxel_spacing: None,
        })
    }

    pub fn shape(&self) -> GridShape {
        self.intensities.shape()
    }

    /// Check all label values lie in `0..classes`.
    pub fn validate_labels(&self, classes: usize) -> Result<()> {
        if let Some(ref labels) = self.labels {
            validate_label_range(labels, classes)?;
        }
        Ok(())
    }

    /// Drop the label grid (e.g. when staging unlabeled training data).
    pub fn without_labels(mut self) -> Self {
        self.labels = None;
        self
    }
}

fn validate_label_range(labels: &LabelGrid, classes: usize) -> Result<()> {
    let shape = labels.shape();
    for (i, &v) in labels.data().iter().enumerate() {
        if (v as usize) >= classes {
            let (x, y, z) = shape.coords(i);
            return Err(Error::LabelOutOfRange {
                value: v,
                classes,
                x,
                y,
                z,
            });
        }
    }
    Ok(())
}

/// Read a `.vvol` file. The sample id is the file stem.
pub fn read_volume(path: impl AsRef<Path>) -> Result<VolumeSample> {
    let path = path.as_ref();
    let mut file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;

    let header_len = 4 + 2 + 12 + 1 + 1;
    if bytes.len() < header_len {
        return Err(Error::Format {
            field: "header",
            detail: format!("file is {} bytes, header needs {header_len}", bytes.len()),
        });
    }
    if &bytes[0..4] != MAGIC {
        return Err(Error::Format {
            field: "magic",
            detail: format!("expected VVOL, found {:?}", &bytes[0..4]),
        });
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != FORMAT_VERSION {
        return Err(Error::Format {
            field: "version",
            detail: format!("unsupported version {version}"),
        });
    }
    let dim = |off: usize| u32::from_le_bytes([bytes[off], bytes[off + 1], bytes[off + 2], bytes[off + 3]]);
    let (h, w, d) = (dim(6) as usize, dim(10) as usize, dim(14) as usize);
    if h == 0 || w == 0 || d == 0 {
        return Err(Error::Format {
            field: "shape",
            detail: format!("zero-sized axis in {h}x{w}x{d}"),
        });
    }
    let voxels = h
        .checked_mul(w)
        .and_then(|hw| hw.checked_mul(d))
        .filter(|&n| n <= MAX_VOXELS)
        .ok_or_else(|| Error::Format {
            field: "shape",
            detail: format!("volume {h}x{w}x{d} exceeds the supported size"),
        })?;
    let flags = bytes[18];
    if flags & !FLAG_LABELS != 0 {
        return Err(Error::Format {
            field: "flags",
            detail: format!("unknown flag bits {flags:#010b}"),
        });
    }
    let has_labels = flags & FLAG_LABELS != 0;
    let dtype = bytes[19];
    if dtype != DTYPE_F32 {
        return Err(Error::Format {
            field: "dtype",
            detail: format!("unsupported dtype code {dtype}"),
        });
    }

    let payload = &bytes[header_len..];
    let intensity_bytes = voxels * 4;
    if payload.len() < intensity_bytes {
        return Err(Error::Truncated {
            expected: voxels,
            found: payload.len() / 4,
        });
    }
    let mut intensities = Vec::with_capacity(voxels);
    for chunk in payload[..intensity_bytes].chunks_exact(4) {
        intensities.push(f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]));
    }

    let label_section = &payload[intensity_bytes..];
    let labels = if has_labels {
        if label_section.len() < voxels {
            return Err(Error::Truncated {
                expected: voxels,
                found: label_section.len(),
            });
        }
        if label_section.len() > voxels {
            return Err(Error::Format {
                field: "payload",
                detail: format!("{} trailing bytes after label section", label_section.len() - voxels),
            });
        }
        Some(LabelGrid::from_vec(GridShape::new(h, w, d), label_section.to_vec()))
    } else {
        if !label_section.is_empty() {
            return Err(Error::Format {
                field: "payload",
                detail: format!("{} trailing bytes after intensity section", label_section.len()),
            });
        }
        None
    };

    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "volume".to_string());
    VolumeSample::new(id, VolumeGrid::from_vec(GridShape::new(h, w, d), intensities), labels)
}

/// Write a sample as `.vvol`; re-readable bit-for-bit by `read_volume`.
pub fn write_volume(sample: &VolumeSample, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let shape = sample.shape();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let io_err = |e| Error::io(path, e);

    out.write_all(MAGIC).map_err(io_err)?;
    out.write_u16::<LittleEndian>(FORMAT_VERSION).map_err(io_err)?;
    out.write_u32::<LittleEndian>(shape.h as u32).map_err(io_err)?;
    out.write_u32::<LittleEndian>(shape.w as u32).map_err(io_err)?;
    out.write_u32::<LittleEndian>(shape.d as u32).map_err(io_err)?;
    out.write_u8(if sample.labels.is_some() { FLAG_LABELS } else { 0 })
        .map_err(io_err)?;
    out.write_u8(DTYPE_F32).map_err(io_err)?;
    for &v in sample.intensities.data() {
        out.write_f32::<LittleEndian>(v).map_err(io_err)?;
    }
    if let Some(ref labels) = sample.labels {
        out.write_all(labels.data()).map_err(io_err)?;
    }
    out.flush().map_err(io_err)
}

/// Standardize intensities to zero mean and unit (population) variance.
/// Labels are untouched.
pub fn normalize_intensity(sample: &VolumeSample) -> Result<VolumeSample> {
    let data = sample.intensities.data();
    let n = data.len() as f64;
    let mean = data.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = data.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    if var == 0.0 {
        return Err(Error::DegenerateInput(format!(
            "volume '{}' has constant intensity {mean}",
            sample.id
        )));
    }
    let std = var.sqrt();
    let normalized: Vec<f32> = data.iter().map(|&v| ((v as f64 - mean) / std) as f32).collect();
    Ok(VolumeSample {
        id: sample.id.clone(),
        intensities: VolumeGrid::from_vec(sample.shape(), normalized),
        labels: sample.labels.clone(),
        voxel_spacing: sample.voxel_spacing,
    })
}

/// One-hot label stack with the background channel included.
#[derive(Debug, Clone, PartialEq)]
pub struct OneHotLabel {
    pub grid: ChannelGrid<u8>,
}

impl OneHotLabel {
    pub fn classes(&self) -> usize {
        self.grid.classes
    }

    /// Channel argmax; exact inverse of `one_hot`.
    pub fn argmax_channels(&self) -> LabelGrid {
        let shape = self.grid.shape;
        let n = shape.voxels();
        let mut out = vec![0u8; n];
        for c in 0..self.grid.classes {
            let channel = self.grid.channel(c);
            for (o, &v) in out.iter_mut().zip(channel) {
                if v == 1 {
                    *o = c as u8;
                }
            }
        }
        LabelGrid::from_vec(shape, out)
    }
}

/// Expand labels to a `classes x H x W x D` binary stack.
pub fn one_hot(labels: &LabelGrid, classes: usize) -> Result<OneHotLabel> {
    validate_label_range(labels, classes)?;
    let shape = labels.shape();
    let mut grid: ChannelGrid<u8> = ChannelGrid::zeros(classes, shape);
    let n = shape.voxels();
    for (i, &v) in labels.data().iter().enumerate() {
        grid.data[v as usize * n + i] = 1;
    }
    Ok(OneHotLabel { grid })
}
