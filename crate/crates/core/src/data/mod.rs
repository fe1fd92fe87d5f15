//! Feature files, dataset manifests, windowing and synthetic data.

pub mod format;
mod manifest;
mod stats;
mod synth;
mod window;

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use manifest::{Dataset, DatasetManifest, SampleEntry, Split, TEXT_BANK_FILE};
pub use stats::{compute_class_stats, ClassStats};
pub use synth::{generate_synthetic, synthesize, SynthConfig, SyntheticData, SynthOutput};
pub use window::{extract_windows, WindowingConfig};

pub const NUM_CLASSES: usize = 8;
pub const VISUAL_DIM: usize = 512;
pub const AUDIO_DIM: usize = 768;
pub const TEXT_DIM: usize = 512;

/// Expression classes in their fixed manifest order.
pub const CLASS_NAMES: [&str; NUM_CLASSES] = [
    "Neutral",
    "Anger",
    "Disgust",
    "Fear",
    "Happiness",
    "Sadness",
    "Surprise",
    "Other",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Visual,
    Audio,
    Text,
}

impl Modality {
    pub fn dim(self) -> usize {
        match self {
            Modality::Visual => VISUAL_DIM,
            Modality::Audio => AUDIO_DIM,
            Modality::Text => TEXT_DIM,
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Modality::Visual => "visual",
            Modality::Audio => "audio",
            Modality::Text => "text",
        };
        f.write_str(s)
    }
}

/// `T x D` single-modality feature matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    modality: Modality,
    t: usize,
    d: usize,
    data: Vec<f32>,
}

impl FeatureSequence {
    pub fn new(modality: Modality, t: usize, data: Vec<f32>) -> Result<Self> {
        let d = modality.dim();
        if t == 0 {
            return Err(Error::Data(format!("{modality} sequence has no frames")));
        }
        if data.len() != t * d {
            return Err(Error::Data(format!(
                "{modality} sequence of {t} frames needs {} values, got {}",
                t * d,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data(format!("{modality} sequence contains non-finite values")));
        }
        Ok(Self { modality, t, d, data })
    }

    pub fn read(path: &Path, modality: Modality) -> Result<Self> {
        let raw = format::read_features(path)?;
        if raw.cols != modality.dim() {
            return Err(Error::Data(format!(
                "{}: {modality} features must have D = {}, file has {}",
                path.display(),
                modality.dim(),
                raw.cols
            )));
        }
        Self::new(modality, raw.rows, raw.data)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        format::write_features(path, self.t, self.d, &self.data)
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn len(&self) -> usize {
        self.t
    }

    pub fn is_empty(&self) -> bool {
        self.t == 0
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, t: usize) -> &[f32] {
        &self.data[t * self.d..(t + 1) * self.d]
    }

    /// Rows `start..end` as a new sequence.
    pub fn slice(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.t {
            return Err(Error::Data(format!(
                "slice {start}..{end} out of range for {} frames",
                self.t
            )));
        }
        Self::new(self.modality, end - start, self.data[start * self.d..end * self.d].to_vec())
    }
}

/// Window lengths (in video frames) the model is trained on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "usize", into = "usize")]
pub struct WindowSize(usize);

impl WindowSize {
    pub const ALLOWED: [usize; 4] = [10, 15, 30, 60];

    pub fn frames(self) -> usize {
        self.0
    }

    pub fn all() -> Vec<WindowSize> {
        Self::ALLOWED.iter().map(|&w| WindowSize(w)).collect()
    }
}

impl TryFrom<usize> for WindowSize {
    type Error = Error;

    fn try_from(w: usize) -> Result<Self> {
        if Self::ALLOWED.contains(&w) {
            Ok(WindowSize(w))
        } else {
            Err(Error::Config(format!("window size {w} is not one of {:?}", Self::ALLOWED)))
        }
    }
}

impl From<WindowSize> for usize {
    fn from(w: WindowSize) -> usize {
        w.0
    }
}

impl fmt::Display for WindowSize {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// One training/evaluation unit.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowSample {
    pub sample_id: String,
    pub visual: FeatureSequence,
    pub audio: FeatureSequence,
    pub label: usize,
    pub source_clip: String,
    pub frame_range: (usize, usize),
}

impl WindowSample {
    pub fn new(
        sample_id: impl Into<String>,
        visual: FeatureSequence,
        audio: FeatureSequence,
        label: usize,
    ) -> Result<Self> {
        if label >= NUM_CLASSES {
            return Err(Error::Label {
                label,
                classes: NUM_CLASSES,
            });
        }
        if visual.modality() != Modality::Visual || audio.modality() != Modality::Audio {
            return Err(Error::Data("window sample needs a visual and an audio sequence".into()));
        }
        let sample_id = sample_id.into();
        let t = visual.len();
        Ok(Self {
            source_clip: sample_id.clone(),
            sample_id,
            visual,
            audio,
            label,
            frame_range: (0, t),
        })
    }
}
