use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::io::{read_json, write_json};
use super::{read_clip, ClipFiles, ClipRecord, NormalizationStats};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
    Ood,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Test, Split::Ood];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
            Split::Ood => "ood",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            "ood" => Ok(Split::Ood),
            other => Err(Error::validation(
                "split",
                format!("{other:?} is not one of train, test, ood"),
            )),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Splits {
    pub train: Vec<String>,
    pub test: Vec<String>,
    pub ood: Vec<String>,
}

impl Splits {
    pub fn get(&self, split: Split) -> &[String] {
        match split {
            Split::Train => &self.train,
            Split::Test => &self.test,
            Split::Ood => &self.ood,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestClip {
    pub id: String,
    /// Paths relative to the manifest's directory.
    pub files: ClipFiles,
    pub duration_s: f64,
    pub round_count: usize,
}

/// Index of a dataset directory, stored as `manifest.json` at its root.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub clips: Vec<ManifestClip>,
    pub split: Splits,
    pub fps: f64,
    pub sample_rate: u32,
    pub norm_stats: NormalizationStats,
    #[serde(skip)]
    root: PathBuf,
}

impl DatasetManifest {
    pub const FILE_NAME: &'static str = "manifest.json";

    pub fn new(
        root: &Path,
        clips: Vec<ManifestClip>,
        split: Splits,
        fps: f64,
        sample_rate: u32,
        norm_stats: NormalizationStats,
    ) -> Self {
        Self {
            clips,
            split,
            fps,
            sample_rate,
            norm_stats,
            root: root.to_path_buf(),
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn save(&self) -> Result<PathBuf> {
        let path = self.root.join(Self::FILE_NAME);
        write_json(&path, self)?;
        Ok(path)
    }

    /// Loads and validates a manifest; `path` may be the file or its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let file = if path.is_dir() {
            path.join(Self::FILE_NAME)
        } else {
            path.to_path_buf()
        };
        let mut m: DatasetManifest = read_json(&file)?;
        m.root = file.parent().map(Path::to_path_buf).unwrap_or_default();
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fps > 0.0) || self.sample_rate == 0 {
            return Err(Error::validation("manifest", "fps and sample_rate must be positive"));
        }
        self.norm_stats.validate()?;
        let known: BTreeSet<&str> = self.clips.iter().map(|c| c.id.as_str()).collect();
        if known.len() != self.clips.len() {
            return Err(Error::validation("manifest.clips", "duplicate clip id"));
        }
        let mut seen = BTreeSet::new();
        for split in Split::ALL {
            for id in self.split.get(split) {
                if !known.contains(id.as_str()) {
                    return Err(Error::validation(
                        format!("manifest.split.{split}"),
                        format!("unknown clip {id}"),
                    ));
                }
                if !seen.insert(id.as_str()) {
                    return Err(Error::validation(
                        format!("manifest.split.{split}"),
                        format!("clip {id} appears in more than one split"),
                    ));
                }
            }
        }
        for clip in &self.clips {
            for rel in clip.files.all() {
                let p = self.root.join(rel);
                if !p.exists() {
                    return Err(Error::MissingFile(p));
                }
            }
        }
        Ok(())
    }

    pub fn ids(&self, split: Split) -> &[String] {
        self.split.get(split)
    }

    pub fn entry(&self, id: &str) -> Option<&ManifestClip> {
        self.clips.iter().find(|c| c.id == id)
    }

    /// Reads one clip and checks it against the manifest-wide fps and sample rate.
    pub fn load_clip(&self, id: &str) -> Result<ClipRecord> {
        let entry = self
            .entry(id)
            .ok_or_else(|| Error::validation("clip id", format!("{id} is not in the manifest")))?;
        let meta = self.root.join(&entry.files.meta);
        let dir = meta.parent().unwrap_or(&self.root);
        let clip = read_clip(dir, id)?;
        if clip.audio_a.sample_rate != self.sample_rate {
            return Err(Error::RateMismatch {
                path: self.root.join(&entry.files.audio_a),
                expected: self.sample_rate,
                found: clip.audio_a.sample_rate,
            });
        }
        if clip.fps() != self.fps {
            return Err(Error::validation(
                "fps",
                format!("clip {id} uses {} fps, manifest {}", clip.fps(), self.fps),
            ));
        }
        Ok(clip)
    }
}
