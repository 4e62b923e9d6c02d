//! Tensor and label archives, plus atomic file writes.
//!
//! Tensor archive ("PRKT"), all integers little-endian:
//!
//! ```text
//! magic    4 bytes  "PRKT"
//! version  u32      currently 1
//! dtype    u8       0 = f32, 1 = f64
//! rank     u8
//! dims     rank x u64
//! payload  row-major values, dtype-sized, little-endian
//! ```
//!
//! Label archive ("PRKL"):
//!
//! ```text
//! magic    4 bytes  "PRKL"
//! count    u64
//! labels   count x u32
//! ```
//!
//! Values are always f64 in memory; f32 archives are widened on load.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::path::Path;

const TENSOR_MAGIC: &[u8; 4] = b"PRKT";
const LABEL_MAGIC: &[u8; 4] = b"PRKL";
const VERSION: u32 = 1;

/// On-disk element type of a tensor archive.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    fn tag(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        }
    }
}

/// Write `bytes` to `path` atomically: write a sibling temp file, then rename.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    if !dir.as_os_str().is_empty() {
        std::fs::create_dir_all(dir)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp_path = std::path::PathBuf::from(tmp);
    std::fs::write(&tmp_path, bytes)?;
    std::fs::rename(&tmp_path, path)?;
    Ok(())
}

/// Serialize a tensor archive.
pub fn tensor_to_bytes(t: &Tensor, dtype: Dtype) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(TENSOR_MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(dtype.tag());
    out.push(t.rank() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    match dtype {
        Dtype::F32 => {
            for v in t.data() {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        Dtype::F64 => {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    out
}

/// Parse a tensor archive.
pub fn tensor_from_bytes(bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < 4 || &bytes[..4] != TENSOR_MAGIC {
        return Err(Error::ArchiveMagic { expected: "PRKT" });
    }
    let mut pos = 4usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if *pos + n > bytes.len() {
            return Err(Error::ArchiveTruncated);
        }
        let s = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    let version = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
    if version != VERSION {
        return Err(Error::ArchiveVersion {
            found: version,
            supported: VERSION,
        });
    }
    let dtype = match take(&mut pos, 1)?[0] {
        0 => Dtype::F32,
        1 => Dtype::F64,
        other => return Err(Error::ArchiveTag(other)),
    };
    let rank = take(&mut pos, 1)?[0] as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize);
    }
    let numel: usize = shape.iter().product();
    let mut data = Vec::with_capacity(numel);
    match dtype {
        Dtype::F32 => {
            for _ in 0..numel {
                data.push(f32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as f64);
            }
        }
        Dtype::F64 => {
            for _ in 0..numel {
                data.push(f64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()));
            }
        }
    }
    if pos != bytes.len() {
        return Err(Error::Io("trailing bytes after tensor archive".into()));
    }
    Tensor::new(shape, data)
}

/// Write a tensor archive atomically.
pub fn save_tensor_archive(path: &Path, t: &Tensor, dtype: Dtype) -> Result<()> {
    atomic_write(path, &tensor_to_bytes(t, dtype))
}

/// Load a tensor archive.
pub fn load_tensor_archive(path: &Path) -> Result<Tensor> {
    tensor_from_bytes(&std::fs::read(path)?)
}

/// Serialize a label archive.
pub fn labels_to_bytes(labels: &[usize]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(LABEL_MAGIC);
    out.extend_from_slice(&(labels.len() as u64).to_le_bytes());
    for &l in labels {
        out.extend_from_slice(&(l as u32).to_le_bytes());
    }
    out
}

/// Parse a label archive.
pub fn labels_from_bytes(bytes: &[u8]) -> Result<Vec<usize>> {
    if bytes.len() < 4 || &bytes[..4] != LABEL_MAGIC {
        return Err(Error::ArchiveMagic { expected: "PRKL" });
    }
    if bytes.len() < 12 {
        return Err(Error::ArchiveTruncated);
    }
    let count = u64::from_le_bytes(bytes[4..12].try_into().unwrap()) as usize;
    if bytes.len() != 12 + 4 * count {
        return Err(Error::ArchiveTruncated);
    }
    let labels = (0..count)
        .map(|i| {
            u32::from_le_bytes(bytes[12 + 4 * i..16 + 4 * i].try_into().unwrap()) as usize
        })
        .collect();
    Ok(labels)
}

pub fn save_labels(path: &Path, labels: &[usize]) -> Result<()> {
    atomic_write(path, &labels_to_bytes(labels))
}

pub fn load_labels(path: &Path) -> Result<Vec<usize>> {
    labels_from_bytes(&std::fs::read(path)?)
}
