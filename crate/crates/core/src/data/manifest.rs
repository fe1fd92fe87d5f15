use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::format::read_feature_header;
use super::{FeatureSequence, Modality, WindowSample, CLASS_NAMES, NUM_CLASSES};
use crate::error::{Error, Result};

/// Text bank file name, looked up next to each manifest.
pub const TEXT_BANK_FILE: &str = "text_bank.mmfe";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleEntry {
    pub sample_id: String,
    pub label: usize,
    pub visual_path: String,
    pub audio_path: String,
    #[serde(rename = "T_v")]
    pub t_v: usize,
    #[serde(rename = "T_a")]
    pub t_a: usize,
}

/// JSON manifest for one split. Paths are relative to the manifest file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub classes: Vec<String>,
    pub split: Split,
    pub samples: Vec<SampleEntry>,
    /// Audio feature steps per second, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub audio_rate: Option<f64>,
    #[serde(skip)]
    base_dir: PathBuf,
}

impl DatasetManifest {
    pub fn new(split: Split, samples: Vec<SampleEntry>) -> Self {
        Self {
            classes: CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
            split,
            samples,
            audio_rate: None,
            base_dir: PathBuf::new(),
        }
    }

    /// Parses a manifest and checks it against the files it references.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m: DatasetManifest = serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })?;
        m.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn base_dir(&self) -> &Path {
        &self.base_dir
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.base_dir.join(rel)
    }

    pub fn text_bank_path(&self) -> PathBuf {
        self.base_dir.join(TEXT_BANK_FILE)
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes.len() != NUM_CLASSES {
            return Err(Error::Data(format!(
                "manifest lists {} classes, expected {NUM_CLASSES}",
                self.classes.len()
            )));
        }
        for s in &self.samples {
            if s.label >= NUM_CLASSES {
                return Err(Error::Label {
                    label: s.label,
                    classes: NUM_CLASSES,
                });
            }
            for (rel, modality, t) in [
                (&s.visual_path, Modality::Visual, s.t_v),
                (&s.audio_path, Modality::Audio, s.t_a),
            ] {
                let path = self.resolve(rel);
                if !path.is_file() {
                    return Err(Error::Data(format!(
                        "sample {}: missing {modality} file {}",
                        s.sample_id,
                        path.display()
                    )));
                }
                let header = read_feature_header(&path)?;
                if header != (t, modality.dim()) {
                    return Err(Error::Data(format!(
                        "sample {}: {} has shape {:?}, manifest declares ({t}, {})",
                        s.sample_id,
                        path.display(),
                        header,
                        modality.dim()
                    )));
                }
            }
        }
        Ok(())
    }

    /// Reads every referenced feature file.
    pub fn load_samples(&self) -> Result<Vec<WindowSample>> {
        self.samples
            .iter()
            .map(|s| {
                let visual = FeatureSequence::read(&self.resolve(&s.visual_path), Modality::Visual)?;
                let audio = FeatureSequence::read(&self.resolve(&s.audio_path), Modality::Audio)?;
                WindowSample::new(s.sample_id.clone(), visual, audio, s.label)
            })
            .collect()
    }
}

/// A manifest together with its loaded samples.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub samples: Vec<WindowSample>,
}

impl Dataset {
    pub fn load(manifest_path: &Path) -> Result<Self> {
        let manifest = DatasetManifest::load(manifest_path)?;
        let samples = manifest.load_samples()?;
        Ok(Self { manifest, samples })
    }

    /// In-memory dataset with the default class list.
    pub fn from_samples(split: Split, samples: Vec<WindowSample>) -> Self {
        let entries = samples
            .iter()
            .map(|s| SampleEntry {
                sample_id: s.sample_id.clone(),
                label: s.label,
                visual_path: String::new(),
                audio_path: String::new(),
                t_v: s.visual.len(),
                t_a: s.audio.len(),
            })
            .collect();
        Self {
            manifest: DatasetManifest::new(split, entries),
            samples,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }
}
