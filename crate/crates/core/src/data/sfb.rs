//! SFB: one video per file.
//!
//! ```text
//! "SAHC" | version u32 | T u32 | D_in u32 | C u32 | T·D_in f32 | T u16
//! ```
//! All integers and floats little-endian, features row-major.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"SAHC";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 * 4;

/// One video: `T × D_in` features and `T` phase labels.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence {
    pub video_id: String,
    /// Row-major `[T × dim]`.
    pub features: Vec<f32>,
    pub dim: usize,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl FeatureSequence {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        &self.features[t * self.dim..(t + 1) * self.dim]
    }

    /// Checks shape consistency, label range and the 16-bit label limit.
    pub fn validate(&self) -> Result<()> {
        let t = self.labels.len();
        if t == 0 {
            return Err(Error::Data(format!("video `{}` has no frames", self.video_id)));
        }
        if self.dim == 0 || self.features.len() != t * self.dim {
            return Err(Error::Data(format!(
                "video `{}`: {} feature values do not form {t} rows of width {}",
                self.video_id,
                self.features.len(),
                self.dim
            )));
        }
        if self.num_classes == 0 || self.num_classes > u16::MAX as usize + 1 {
            return Err(Error::Data(format!("video `{}`: invalid class count {}", self.video_id, self.num_classes)));
        }
        if let Some((i, &c)) = self.labels.iter().enumerate().find(|(_, &c)| c >= self.num_classes) {
            return Err(Error::Data(format!(
                "video `{}`: label {c} at frame {i} is not below C={}",
                self.video_id, self.num_classes
            )));
        }
        Ok(())
    }
}

pub fn encode_sfb(seq: &FeatureSequence) -> Result<Vec<u8>> {
    seq.validate()?;
    let t = seq.len();
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * seq.features.len() + 2 * t);
    out.extend_from_slice(MAGIC);
    for v in [VERSION, t as u32, seq.dim as u32, seq.num_classes as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for &x in &seq.features {
        out.extend_from_slice(&x.to_le_bytes());
    }
    for &c in &seq.labels {
        out.extend_from_slice(&(c as u16).to_le_bytes());
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn fail(&self, offset: usize, message: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            offset: offset as u64,
            message: message.into(),
        }
    }

    fn take(&mut self, n: usize, section: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(self.fail(
                self.bytes.len(),
                format!(
                    "truncated {section}: needs {n} bytes from offset {}, file has {}",
                    self.pos,
                    self.bytes.len()
                ),
            )),
        }
    }

    fn u32(&mut self, field: &str) -> Result<u32> {
        let b = self.take(4, field)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()))
    }
}

/// Parses SFB bytes. `path` is used for error messages and the video id.
pub fn decode_sfb(bytes: &[u8], path: &Path) -> Result<FeatureSequence> {
    let mut r = Reader { bytes, pos: 0, path };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(r.fail(0, format!("bad magic {magic:02x?}, expected \"SAHC\"")));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(r.fail(4, format!("unsupported version {version}")));
    }
    let t = r.u32("header field T")? as usize;
    let dim = r.u32("header field D_in")? as usize;
    let classes = r.u32("header field C")? as usize;
    if t == 0 {
        return Err(r.fail(8, "header declares zero frames"));
    }
    if dim == 0 {
        return Err(r.fail(12, "header declares zero feature width"));
    }
    if classes == 0 {
        return Err(r.fail(16, "header declares zero classes"));
    }
    let n = t
        .checked_mul(dim)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| r.fail(8, "header dimensions overflow"))?;
    let features = r
        .take(n, "feature section")?
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    let label_start = r.pos;
    let labels: Vec<usize> = r
        .take(2 * t, "label section")?
        .chunks_exact(2)
        .map(|b| u16::from_le_bytes(b.try_into().unwrap()) as usize)
        .collect();
    if let Some(i) = labels.iter().position(|&c| c >= classes) {
        return Err(r.fail(
            label_start + 2 * i,
            format!("label {} at frame {i} is not below C={classes}", labels[i]),
        ));
    }
    if r.pos != bytes.len() {
        return Err(r.fail(r.pos, format!("{} unexpected trailing bytes", bytes.len() - r.pos)));
    }
    let video_id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(FeatureSequence {
        video_id,
        features,
        dim,
        labels,
        num_classes: classes,
    })
}

pub fn write_sfb(seq: &FeatureSequence, path: &Path) -> Result<()> {
    let bytes = encode_sfb(seq)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_sfb(path: &Path) -> Result<FeatureSequence> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_sfb(&bytes, path)
}
