use super::{FeatureSequence, Modality, WindowSample, WindowSize, NUM_CLASSES};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WindowingConfig {
    pub window: WindowSize,
    pub stride: usize,
    /// Video frames per second.
    pub fps: f64,
    /// Audio feature steps per second.
    pub audio_rate: f64,
}

impl WindowingConfig {
    /// Training windows overlap by half.
    pub fn train(window: WindowSize, fps: f64, audio_rate: f64) -> Self {
        Self {
            window,
            stride: (window.frames() / 2).max(1),
            fps,
            audio_rate,
        }
    }

    /// Evaluation windows tile the clip without overlap.
    pub fn eval(window: WindowSize, fps: f64, audio_rate: f64) -> Self {
        Self {
            window,
            stride: window.frames(),
            fps,
            audio_rate,
        }
    }

    fn audio_index(&self, frame: usize) -> usize {
        (frame as f64 * self.audio_rate / self.fps).floor() as usize
    }
}

/// Majority vote over per-frame labels; ties go to the lowest class id.
fn majority(labels: &[usize]) -> usize {
    let mut counts = [0usize; NUM_CLASSES];
    for &y in labels {
        counts[y] += 1;
    }
    let best = *counts.iter().max().unwrap();
    counts.iter().position(|&c| c == best).unwrap()
}

/// Cuts a clip into fixed-length windows with the audio slice covering the
/// same wall-clock span. A trailing partial window is dropped.
pub fn extract_windows(
    clip_id: &str,
    clip_visual: &FeatureSequence,
    clip_audio: &FeatureSequence,
    frame_labels: &[usize],
    cfg: &WindowingConfig,
) -> Result<Vec<WindowSample>> {
    if cfg.stride == 0 {
        return Err(Error::Param("window stride must be positive".into()));
    }
    if !(cfg.fps > 0.0) || !(cfg.audio_rate > 0.0) {
        return Err(Error::Param("fps and audio_rate must be positive".into()));
    }
    if clip_visual.modality() != Modality::Visual || clip_audio.modality() != Modality::Audio {
        return Err(Error::Data("extract_windows needs visual and audio sequences".into()));
    }
    if frame_labels.len() != clip_visual.len() {
        return Err(Error::Data(format!(
            "{clip_id}: {} frame labels for {} frames",
            frame_labels.len(),
            clip_visual.len()
        )));
    }
    if let Some(&bad) = frame_labels.iter().find(|&&y| y >= NUM_CLASSES) {
        return Err(Error::Label {
            label: bad,
            classes: NUM_CLASSES,
        });
    }
    let w = cfg.window.frames();
    let mut out = Vec::new();
    let mut start = 0;
    while start + w <= clip_visual.len() {
        let end = start + w;
        let a_start = cfg.audio_index(start);
        let a_end = cfg.audio_index(end).min(clip_audio.len());
        if a_start >= a_end {
            return Err(Error::Data(format!(
                "{clip_id}: audio track ({} steps) does not cover frames {start}..{end}",
                clip_audio.len()
            )));
        }
        out.push(WindowSample {
            sample_id: format!("{clip_id}_{start:06}"),
            visual: clip_visual.slice(start, end)?,
            audio: clip_audio.slice(a_start, a_end)?,
            label: majority(&frame_labels[start..end]),
            source_clip: clip_id.to_string(),
            frame_range: (start, end),
        });
        start += cfg.stride;
    }
    Ok(out)
}
