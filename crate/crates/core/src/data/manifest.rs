//! Split manifests and dataset loading.
//!
//! ```text
//! C=7
//! D=32
//! [train]
//! video01
//! [val]
//! video02
//! [test]
//! video03
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;

use super::sfb::{read_sfb, FeatureSequence};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::config(format!("unknown split `{other}` (expected train, val or test)"))),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

/// Video ids per split plus the class count and feature width every file
/// must declare.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SplitManifest {
    pub num_classes: usize,
    pub input_dim: usize,
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl SplitManifest {
    pub fn ids(&self, split: Split) -> &[String] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    fn ids_mut(&mut self, split: Split) -> &mut Vec<String> {
        match split {
            Split::Train => &mut self.train,
            Split::Val => &mut self.val,
            Split::Test => &mut self.test,
        }
    }

    /// Rejects ids listed more than once, within or across splits.
    pub fn check_disjoint(&self) -> Result<()> {
        let mut seen: BTreeMap<&str, Split> = BTreeMap::new();
        let mut clashes = Vec::new();
        for split in Split::ALL {
            for id in self.ids(split) {
                if let Some(first) = seen.insert(id, split) {
                    clashes.push(format!("`{id}` ({first} and {split})"));
                }
            }
        }
        if clashes.is_empty() {
            Ok(())
        } else {
            Err(Error::Data(format!("splits overlap: {}", clashes.join(", "))))
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut m = SplitManifest::default();
        let (mut classes, mut dim) = (None, None);
        let mut section = None;
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |msg: String| Error::Data(format!("manifest line {}: {msg}", n + 1));
            if let Some(name) = line.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
                section = Some(name.parse::<Split>().map_err(|_| bad(format!("unknown section `[{name}]`")))?);
            } else if let Some((key, value)) = line.split_once('=') {
                let value: usize = value
                    .trim()
                    .parse()
                    .map_err(|_| bad(format!("`{}` is not a count", value.trim())))?;
                match key.trim() {
                    "C" => classes = Some(value),
                    "D" => dim = Some(value),
                    other => return Err(bad(format!("unknown key `{other}`"))),
                }
            } else {
                match section {
                    Some(s) => m.ids_mut(s).push(line.to_string()),
                    None => return Err(bad(format!("video id `{line}` before any section"))),
                }
            }
        }
        m.num_classes = classes.ok_or_else(|| Error::Data("manifest is missing `C=`".into()))?;
        m.input_dim = dim.ok_or_else(|| Error::Data("manifest is missing `D=`".into()))?;
        m.check_disjoint()?;
        Ok(m)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_string()).map_err(|e| Error::io(path, e))
    }
}

impl fmt::Display for SplitManifest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "C={}", self.num_classes)?;
        writeln!(f, "D={}", self.input_dim)?;
        for split in Split::ALL {
            writeln!(f, "[{split}]")?;
            for id in self.ids(split) {
                writeln!(f, "{id}")?;
            }
        }
        Ok(())
    }
}

/// Loaded videos of all three splits.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: SplitManifest,
    pub train: Vec<FeatureSequence>,
    pub val: Vec<FeatureSequence>,
    pub test: Vec<FeatureSequence>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[FeatureSequence] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

/// Reads `<dir>/<id>.sfb` for every listed id. All problems are collected
/// and reported together.
pub fn load_dataset(manifest: &Path, dir: &Path) -> Result<Dataset> {
    let manifest = SplitManifest::read(manifest)?;
    let mut loaded: BTreeMap<Split, Vec<FeatureSequence>> = BTreeMap::new();
    let mut problems = Vec::new();
    for split in Split::ALL {
        let results: Vec<Result<FeatureSequence>> = manifest
            .ids(split)
            .par_iter()
            .map(|id| {
                let seq = read_sfb(&dir.join(format!("{id}.sfb")))?;
                check_video(&seq, id, &manifest)?;
                Ok(FeatureSequence {
                    video_id: id.clone(),
                    ..seq
                })
            })
            .collect();
        let mut videos = Vec::with_capacity(results.len());
        for r in results {
            match r {
                Ok(v) => videos.push(v),
                Err(e) => problems.push(e.to_string()),
            }
        }
        loaded.insert(split, videos);
    }
    if !problems.is_empty() {
        return Err(Error::Data(format!("{} video(s) failed to load:\n  {}", problems.len(), problems.join("\n  "))));
    }
    Ok(Dataset {
        train: loaded.remove(&Split::Train).unwrap_or_default(),
        val: loaded.remove(&Split::Val).unwrap_or_default(),
        test: loaded.remove(&Split::Test).unwrap_or_default(),
        manifest,
    })
}

fn check_video(seq: &FeatureSequence, id: &str, manifest: &SplitManifest) -> Result<()> {
    if seq.num_classes != manifest.num_classes {
        return Err(Error::Data(format!(
            "video `{id}` declares C={} but the manifest has C={}",
            seq.num_classes, manifest.num_classes
        )));
    }
    if seq.dim != manifest.input_dim {
        return Err(Error::Data(format!(
            "video `{id}` has feature width {} but the manifest has D={}",
            seq.dim, manifest.input_dim
        )));
    }
    Ok(())
}
