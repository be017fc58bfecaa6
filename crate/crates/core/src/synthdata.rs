//! Synthetic audio/visual feature sequences with known valence/arousal.
//!
//! Every sequence draws a slowly varying latent emotion trajectory. Both
//! modalities observe it through fixed random linear maps plus small noise,
//! so on clean clips either modality alone determines the labels. A
//! configurable fraction of clips then has one modality replaced by noise,
//! which removes that modality's evidence for those clips.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fusion::{FeatureSequence, FusionError, Modality};
use crate::metrics::{EmotionTrack, MetricsError};
use crate::numcore::Matrix;

/// Standard deviation of the per-entry observation noise on clean clips.
pub const CLEAN_NOISE_SIGMA: f64 = 0.05;
/// Standard deviation of the mixing map entries.
pub const MIXING_SCALE: f64 = 1.0;
/// Range of latent sinusoid frequencies, in cycles per sequence.
pub const CYCLES: (f64, f64) = (0.25, 2.0);

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SynthError {
    #[error("invalid generator config: {0}")]
    Config(String),
    #[error("mask has {mask} entries but the sequence has {clips} clips")]
    MaskLength { mask: usize, clips: usize },
    #[error("smoothing window must be odd, got {0}")]
    EvenWindow(usize),
    #[error("smoothing window {window} exceeds track length {len}")]
    WindowTooLarge { window: usize, len: usize },
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

/// Which modality gets corrupted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionTarget {
    Audio,
    Visual,
    /// Visual on even-indexed sequences, audio on odd-indexed ones.
    Alternating,
}

/// How a corrupted clip is altered.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    /// The clip's features are replaced by noise.
    #[default]
    Replace,
    /// Noise is added on top of the clip's features.
    Additive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub d_a: usize,
    pub d_v: usize,
    /// Clips per sequence.
    pub clips: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub corruption_rate: f64,
    pub corruption_target: CorruptionTarget,
    pub corruption_kind: CorruptionKind,
    pub noise_sigma: f64,
    pub emission_seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            d_a: 16,
            d_v: 16,
            clips: 32,
            n_train: 200,
            n_val: 50,
            corruption_rate: 0.4,
            corruption_target: CorruptionTarget::Visual,
            corruption_kind: CorruptionKind::Replace,
            noise_sigma: 1.0,
            emission_seed: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |msg: String| Err(SynthError::Config(msg));
        if self.d_a == 0 || self.d_v == 0 || self.clips == 0 {
            return bad(format!(
                "dimensions must be at least 1 (d_a={}, d_v={}, clips={})",
                self.d_a, self.d_v, self.clips
            ));
        }
        if !(0.0..=1.0).contains(&self.corruption_rate) {
            return bad(format!(
                "corruption_rate {} outside [0, 1]",
                self.corruption_rate
            ));
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return bad(format!(
                "noise_sigma {} must be finite and >= 0",
                self.noise_sigma
            ));
        }
        Ok(())
    }
}

/// Per-clip corruption flags for both modalities.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorruptionMask {
    pub audio: Vec<bool>,
    pub visual: Vec<bool>,
}

impl CorruptionMask {
    pub fn clean(clips: usize) -> Self {
        Self {
            audio: vec![false; clips],
            visual: vec![false; clips],
        }
    }

    pub fn for_modality(&self, modality: Modality) -> &[bool] {
        match modality {
            Modality::Audio => &self.audio,
            Modality::Visual => &self.visual,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSequence {
    pub xa: FeatureSequence,
    pub xv: FeatureSequence,
    pub labels: EmotionTrack,
    pub mask: CorruptionMask,
}

impl LabeledSequence {
    pub fn clips(&self) -> usize {
        self.labels.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Vec<LabeledSequence>,
    pub val: Vec<LabeledSequence>,
}

impl Dataset {
    pub fn dims(&self) -> Option<(usize, usize)> {
        self.train
            .first()
            .or(self.val.first())
            .map(|s| (s.xa.dim(), s.xv.dim()))
    }
}

/// Generates a train/validation split. A pure function of `cfg`.
pub fn generate(cfg: &GeneratorConfig) -> Result<Dataset, SynthError> {
    cfg.validate()?;
    let mut map_rng = stream_rng(cfg.emission_seed, 0);
    let mix_audio = mixing_map(cfg.d_a, &mut map_rng);
    let mix_visual = mixing_map(cfg.d_v, &mut map_rng);

    let build = |split: u64, count: usize| -> Result<Vec<LabeledSequence>, SynthError> {
        (0..count)
            .into_par_iter()
            .map(|i| {
                let stream = (split << 40) | (i as u64 + 1);
                sequence(cfg, &mix_audio, &mix_visual, i, stream)
            })
            .collect()
    };
    Ok(Dataset {
        train: build(1, cfg.n_train)?,
        val: build(2, cfg.n_val)?,
    })
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Random `d x 2` map with Gaussian entries, resampled until its columns are
/// linearly independent (for `d >= 2`).
fn mixing_map(d: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let normal = Normal::new(0.0, MIXING_SCALE).expect("valid");
    loop {
        let data: Vec<f64> = (0..2 * d).map(|_| normal.sample(rng)).collect();
        let m = Matrix::new(d, 2, data).expect("sized");
        if d < 2 {
            if m.get(0, 0).abs() > 1e-3 || m.get(0, 1).abs() > 1e-3 {
                return m;
            }
            continue;
        }
        let gram = m.transpose().matmul(&m).expect("shapes agree");
        let det = gram.get(0, 0) * gram.get(1, 1) - gram.get(0, 1) * gram.get(1, 0);
        if det > 1e-3 * gram.get(0, 0) * gram.get(1, 1) {
            return m;
        }
    }
}

/// Smooth trajectory in `[-1, 1]`: a clipped sum of 2 to 4 low-frequency
/// sinusoids.
fn latent_trajectory(clips: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let terms = rng.random_range(2..=4);
    let waves: Vec<(f64, f64, f64)> = (0..terms)
        .map(|_| {
            let amplitude = rng.random_range(0.15..0.5);
            let cycles = rng.random_range(CYCLES.0..CYCLES.1);
            let phase = rng.random_range(0.0..2.0 * PI);
            (amplitude, cycles, phase)
        })
        .collect();
    (0..clips)
        .map(|l| {
            let t = l as f64 / clips as f64;
            waves
                .iter()
                .map(|&(a, f, p)| a * (2.0 * PI * f * t + p).sin())
                .sum::<f64>()
                .clamp(-1.0, 1.0)
        })
        .collect()
}

fn sequence(
    cfg: &GeneratorConfig,
    mix_audio: &Matrix,
    mix_visual: &Matrix,
    index: usize,
    stream: u64,
) -> Result<LabeledSequence, SynthError> {
    let mut rng = stream_rng(cfg.emission_seed, stream);
    let valence = latent_trajectory(cfg.clips, &mut rng);
    let arousal = latent_trajectory(cfg.clips, &mut rng);
    let labels = EmotionTrack::new(valence, arousal)?;
    let latent = labels.to_matrix();

    let noise = Normal::new(0.0, CLEAN_NOISE_SIGMA).expect("valid");
    let mut observe = |mix: &Matrix| -> Matrix {
        let clean = mix.matmul(&latent).expect("d x 2 times 2 x L");
        let data = clean
            .data()
            .iter()
            .map(|v| v + noise.sample(&mut rng))
            .collect();
        Matrix::new(clean.rows(), clean.cols(), data).expect("same shape")
    };
    let xa = observe(mix_audio);
    let xv = observe(mix_visual);

    let target = match cfg.corruption_target {
        CorruptionTarget::Audio => Modality::Audio,
        CorruptionTarget::Visual => Modality::Visual,
        CorruptionTarget::Alternating if index.is_multiple_of(2) => Modality::Visual,
        CorruptionTarget::Alternating => Modality::Audio,
    };
    let flags: Vec<bool> = (0..cfg.clips)
        .map(|_| rng.random_bool(cfg.corruption_rate))
        .collect();
    let noise_seed: u64 = rng.random();

    let mut mask = CorruptionMask::clean(cfg.clips);
    let (xa, xv) = match target {
        Modality::Audio => {
            let xa = apply_corruption(&xa, &flags, cfg, noise_seed)?;
            mask.audio = flags;
            (xa, xv)
        }
        Modality::Visual => {
            let xv = apply_corruption(&xv, &flags, cfg, noise_seed)?;
            mask.visual = flags;
            (xa, xv)
        }
    };
    Ok(LabeledSequence {
        xa: FeatureSequence::new(Modality::Audio, xa)?,
        xv: FeatureSequence::new(Modality::Visual, xv)?,
        labels,
        mask,
    })
}

fn apply_corruption(
    x: &Matrix,
    flags: &[bool],
    cfg: &GeneratorConfig,
    seed: u64,
) -> Result<Matrix, SynthError> {
    match cfg.corruption_kind {
        CorruptionKind::Replace => corrupt_matrix(x, flags, cfg.noise_sigma, seed),
        CorruptionKind::Additive => {
            let noise = corrupt_matrix(
                &Matrix::zeros(x.rows(), x.cols()),
                flags,
                cfg.noise_sigma,
                seed,
            )?;
            Ok(x.add(&noise).expect("same shape"))
        }
    }
}

fn corrupt_matrix(x: &Matrix, mask: &[bool], sigma: f64, seed: u64) -> Result<Matrix, SynthError> {
    if mask.len() != x.cols() {
        return Err(SynthError::MaskLength {
            mask: mask.len(),
            clips: x.cols(),
        });
    }
    let normal = Normal::new(0.0, sigma)
        .map_err(|e| SynthError::Config(format!("noise sigma {sigma}: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (rows, cols) = x.shape();
    let mut data = x.data().to_vec();
    for (c, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        for r in 0..rows {
            data[r * cols + c] = normal.sample(&mut rng);
        }
    }
    Ok(Matrix::new(rows, cols, data).expect("same shape"))
}

/// Replaces the masked clips of `x` with fresh `N(0, sigma^2)` noise; other
/// clips are returned bit-for-bit.
pub fn corrupt(
    x: &FeatureSequence,
    mask: &[bool],
    sigma: f64,
    seed: u64,
) -> Result<FeatureSequence, SynthError> {
    let out = corrupt_matrix(x.features(), mask, sigma, seed)?;
    Ok(FeatureSequence::new(x.modality(), out)?)
}

/// Centered moving average. Near the ends the window shrinks to the clips
/// that exist.
pub fn smooth(track: &EmotionTrack, window: usize) -> Result<EmotionTrack, SynthError> {
    if window.is_multiple_of(2) {
        return Err(SynthError::EvenWindow(window));
    }
    if window > track.len() {
        return Err(SynthError::WindowTooLarge {
            window,
            len: track.len(),
        });
    }
    let half = window / 2;
    let avg = |values: &[f64]| -> Vec<f64> {
        let n = values.len();
        (0..n)
            .map(|i| {
                let lo = i.saturating_sub(half);
                let hi = (i + half).min(n - 1);
                let slice = &values[lo..=hi];
                let (min, max) = slice
                    .iter()
                    .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| {
                        (a.min(v), b.max(v))
                    });
                // rounding can step a hair outside the window's range
                (slice.iter().sum::<f64>() / slice.len() as f64).clamp(min, max)
            })
            .collect()
    };
    Ok(EmotionTrack::new(
        avg(track.valence()),
        avg(track.arousal()),
    )?)
}
