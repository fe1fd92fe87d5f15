//! Seeded Gaussian stand-in for precomputed backbone features.
//!
//! Class `c` draws visual frames from `N(sep * u_c, 0.25 I)` and audio steps
//! from `N(sep * w_c, 0.25 I)`, where `u_c` and `w_c` are fixed random unit
//! directions. `separation` alone controls difficulty.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::format::write_features;
use super::manifest::TEXT_BANK_FILE;
use super::{
    DatasetManifest, FeatureSequence, Modality, SampleEntry, Split, WindowSample, WindowSize, AUDIO_DIM,
    NUM_CLASSES, TEXT_DIM, VISUAL_DIM,
};
use crate::error::{Error, Result};

const NOISE_STD: f32 = 0.5;
const MAX_TEXT_COSINE: f32 = 0.3;
/// Frame and audio rates used to size the synthetic audio track.
pub const SYNTH_FPS: f64 = 30.0;
pub const SYNTH_AUDIO_RATE: f64 = 50.0;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub per_class: usize,
    pub val_per_class: usize,
    pub test_per_class: usize,
    pub window: WindowSize,
    pub audio_len: usize,
    pub separation: f32,
    pub seed: u64,
}

impl SynthConfig {
    /// Validation and test splits get half as many samples per class as
    /// training; the audio track spans the same wall-clock time as the window.
    pub fn new(per_class: usize, window: WindowSize, separation: f32, seed: u64) -> Self {
        let audio_len = ((window.frames() as f64) * SYNTH_AUDIO_RATE / SYNTH_FPS).floor() as usize;
        Self {
            per_class,
            val_per_class: (per_class / 2).max(1),
            test_per_class: (per_class / 2).max(1),
            window,
            audio_len: audio_len.max(1),
            separation,
            seed,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub train: Vec<WindowSample>,
    pub val: Vec<WindowSample>,
    pub test: Vec<WindowSample>,
    /// `8 x 512` unit rows.
    pub text_bank: Vec<f32>,
}

impl SyntheticData {
    pub fn split(&self, split: Split) -> &[WindowSample] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

fn unit_direction(rng: &mut ChaCha8Rng, d: usize) -> Vec<f32> {
    loop {
        let v: Vec<f32> = (0..d).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
        let n = v.iter().map(|x| x * x).sum::<f32>().sqrt();
        if n > 1e-3 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn text_bank(rng: &mut ChaCha8Rng) -> Vec<f32> {
    loop {
        let rows: Vec<Vec<f32>> = (0..NUM_CLASSES).map(|_| unit_direction(rng, TEXT_DIM)).collect();
        let ok = (0..NUM_CLASSES).all(|i| {
            (i + 1..NUM_CLASSES).all(|j| {
                let cos: f32 = rows[i].iter().zip(&rows[j]).map(|(a, b)| a * b).sum();
                cos < MAX_TEXT_COSINE
            })
        });
        if ok {
            return rows.concat();
        }
    }
}

fn gaussian_frames(rng: &mut ChaCha8Rng, mean: &[f32], t: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(t * mean.len());
    for _ in 0..t {
        for &m in mean {
            out.push(m + NOISE_STD * rng.sample::<f32, _>(StandardNormal));
        }
    }
    out
}

/// Pure function of `cfg`: identical configs give bitwise-identical data.
pub fn synthesize(cfg: &SynthConfig) -> Result<SyntheticData> {
    if !(cfg.separation >= 0.0) || !cfg.separation.is_finite() {
        return Err(Error::Param(format!("separation must be >= 0, got {}", cfg.separation)));
    }
    if cfg.per_class == 0 || cfg.audio_len == 0 {
        return Err(Error::Param("per_class and audio_len must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let scale = |v: Vec<f32>| -> Vec<f32> { v.into_iter().map(|x| x * cfg.separation).collect() };
    let visual_means: Vec<Vec<f32>> = (0..NUM_CLASSES)
        .map(|_| scale(unit_direction(&mut rng, VISUAL_DIM)))
        .collect();
    let audio_means: Vec<Vec<f32>> = (0..NUM_CLASSES)
        .map(|_| scale(unit_direction(&mut rng, AUDIO_DIM)))
        .collect();
    let bank = text_bank(&mut rng);

    let mut make_split = |split: Split, per_class: usize| -> Result<Vec<WindowSample>> {
        let mut out = Vec::with_capacity(per_class * NUM_CLASSES);
        for i in 0..per_class {
            for c in 0..NUM_CLASSES {
                let id = format!("{}_{:05}", split.as_str(), i * NUM_CLASSES + c);
                let v = gaussian_frames(&mut rng, &visual_means[c], cfg.window.frames());
                let a = gaussian_frames(&mut rng, &audio_means[c], cfg.audio_len);
                out.push(WindowSample::new(
                    id,
                    FeatureSequence::new(Modality::Visual, cfg.window.frames(), v)?,
                    FeatureSequence::new(Modality::Audio, cfg.audio_len, a)?,
                    c,
                )?);
            }
        }
        Ok(out)
    };
    let train = make_split(Split::Train, cfg.per_class)?;
    let val = make_split(Split::Val, cfg.val_per_class)?;
    let test = make_split(Split::Test, cfg.test_per_class)?;
    Ok(SyntheticData {
        train,
        val,
        test,
        text_bank: bank,
    })
}

/// Paths written by [`generate_synthetic`].
#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub dir: PathBuf,
    pub text_bank: PathBuf,
}

impl SynthOutput {
    pub fn manifest(&self, split: Split) -> PathBuf {
        self.dir.join(format!("{}.json", split.as_str()))
    }
}

/// Writes `{train,val,test}.json`, the feature files and the text bank
/// under `out_dir`.
pub fn generate_synthetic(cfg: &SynthConfig, out_dir: &Path) -> Result<(SynthOutput, SyntheticData)> {
    let data = synthesize(cfg)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let text_bank = out_dir.join(TEXT_BANK_FILE);
    write_features(&text_bank, NUM_CLASSES, TEXT_DIM, &data.text_bank)?;
    for split in [Split::Train, Split::Val, Split::Test] {
        let mut entries = Vec::new();
        for s in data.split(split) {
            let visual_path = format!("features/{}/{}_v.mmfe", split.as_str(), s.sample_id);
            let audio_path = format!("features/{}/{}_a.mmfe", split.as_str(), s.sample_id);
            s.visual.write(&out_dir.join(&visual_path))?;
            s.audio.write(&out_dir.join(&audio_path))?;
            entries.push(SampleEntry {
                sample_id: s.sample_id.clone(),
                label: s.label,
                visual_path,
                audio_path,
                t_v: s.visual.len(),
                t_a: s.audio.len(),
            });
        }
        let mut manifest = DatasetManifest::new(split, entries);
        manifest.audio_rate = Some(SYNTH_AUDIO_RATE);
        manifest.save(&out_dir.join(format!("{}.json", split.as_str())))?;
    }
    Ok((
        SynthOutput {
            dir: out_dir.to_path_buf(),
            text_bank,
        },
        data,
    ))
}
