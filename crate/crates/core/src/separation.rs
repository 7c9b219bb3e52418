//! Speaker-conditioned enhancement of log-mel frames with an adaptive
//! suppression strength.
//!
//! Bins where a frame carries more energy than the enrolled speaker's
//! long-term spectral signature predicts are attenuated by a sigmoid mask.
//! How strongly the mask is applied follows a running estimate of whether the
//! background (frames unlike the enrolled speaker) is speech: talkers start and
//! pause, so their frame levels swing widely, while stationary noise holds a
//! steady level. Noise and silence keep the separator at pass-through.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frontend::{log_floor, MelFrame, NUM_MEL};

const UNIT_NORM_TOL: f64 = 1e-6;
/// Frames quieter than the loudest enrollment frame by more than this many
/// nats of mean log energy are left out of the signature.
const SIGNATURE_DYNAMIC_RANGE: f64 = 6.9;
const FRAMES_PER_SECOND: f64 = 100.0;
/// Per-frame decay of the tracked peak level, in nats.
const PEAK_DECAY: f64 = 0.01;

/// Zero-mean, unit-variance copy of `x` across its coefficients; zero when
/// `x` is constant.
pub fn mean_variance_normalize(x: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    if var <= 1e-18 {
        return vec![0.0; x.len()];
    }
    let sd = var.sqrt();
    x.iter().map(|v| (v - mean) / sd).collect()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot / (na * nb)).clamp(-1.0, 1.0)
    }
}

/// Mean log energy of a frame.
pub fn frame_level(log_energies: &[f64]) -> f64 {
    log_energies.iter().sum::<f64>() / log_energies.len().max(1) as f64
}

/// Spread between the 90th and 10th percentile of `levels`.
pub fn modulation_depth(levels: &[f64]) -> f64 {
    if levels.is_empty() {
        return 0.0;
    }
    let mut sorted = levels.to_vec();
    sorted.sort_by(f64::total_cmp);
    let at = |q: f64| sorted[((sorted.len() - 1) as f64 * q).round() as usize];
    at(0.9) - at(0.1)
}

/// Unit-norm, mean-variance-normalized long-term average log-mel spectrum of
/// an enrolled speaker.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerSignature(Vec<f64>);

impl SpeakerSignature {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() != NUM_MEL {
            return Err(Error::Config(format!(
                "signature must have {NUM_MEL} dims, got {}",
                values.len()
            )));
        }
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > UNIT_NORM_TOL {
            return Err(Error::NotUnitNorm(norm));
        }
        Ok(Self(values))
    }

    pub fn normalized(values: Vec<f64>) -> Result<Self> {
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm > 1e-12) || !norm.is_finite() {
            return Err(Error::Degenerate("signature has zero norm".into()));
        }
        Self::new(values.into_iter().map(|v| v / norm).collect())
    }

    /// Averages the active frames of one or more enrollment utterances.
    pub fn from_mel(utterances: &[&[MelFrame]]) -> Result<Self> {
        let mut sum = vec![0.0; NUM_MEL];
        let mut count = 0usize;
        for frames in utterances {
            let level = |f: &MelFrame| frame_level(&f.log_energies);
            let Some(loudest) = frames.iter().map(level).reduce(f64::max) else {
                continue;
            };
            for f in frames.iter().filter(|f| level(f) >= loudest - SIGNATURE_DYNAMIC_RANGE) {
                sum.iter_mut().zip(&f.log_energies).for_each(|(s, v)| *s += v);
                count += 1;
            }
        }
        if count == 0 {
            return Err(Error::EmptyInput("signature needs at least one frame"));
        }
        sum.iter_mut().for_each(|s| *s /= count as f64);
        Self::normalized(mean_variance_normalize(&sum))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    /// Signature value of bin `k` in per-frame normalized units.
    fn template(&self, k: usize) -> f64 {
        self.0[k] * (NUM_MEL as f64).sqrt()
    }

    /// Cosine between the normalized frame and the signature.
    pub fn similarity(&self, log_energies: &[f64]) -> f64 {
        cosine(&mean_variance_normalize(log_energies), &self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SeparatorConfig {
    /// Slope of the per-bin sigmoid mask.
    pub mask_sharpness: f64,
    /// Excess over the signature, in normalized units, at which a bin is halved.
    pub bin_margin: f64,
    /// Frames at least this similar to the signature are attributed to the
    /// enrolled speaker and leave the background estimate unchanged.
    pub target_similarity: f64,
    /// Level modulation depth (nats) above which the background counts as speech.
    pub speech_modulation: f64,
    /// Length of the level history that modulation depth is measured over.
    pub modulation_window_s: f64,
    /// Frames this many nats below the tracked peak level are silence and
    /// leave the background estimate unchanged.
    pub silence_margin: f64,
    /// Speech-background score at or below which the strength is `strength_min`.
    pub speech_low: f64,
    /// Speech-background score at or above which the strength is `strength_max`.
    pub speech_high: f64,
    pub smoothing: f64,
    pub strength_min: f64,
    pub strength_max: f64,
    /// Stop updating the speech-background score after this many seconds of
    /// stream (the known noise-only prefix); `None` adapts throughout.
    pub freeze_after_s: Option<f64>,
}

impl Default for SeparatorConfig {
    fn default() -> Self {
        Self {
            mask_sharpness: 4.0,
            bin_margin: 1.5,
            target_similarity: 0.6,
            speech_modulation: 1.5,
            modulation_window_s: 2.0,
            silence_margin: 3.0,
            speech_low: 0.2,
            speech_high: 0.5,
            smoothing: 0.95,
            strength_min: 0.0,
            strength_max: 1.0,
            freeze_after_s: None,
        }
    }
}

impl SeparatorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.mask_sharpness > 0.0) {
            return Err(Error::Config("mask_sharpness must be > 0".into()));
        }
        if !(self.target_similarity > -1.0 && self.target_similarity < 1.0) {
            return Err(Error::Config("target_similarity must lie in (-1, 1)".into()));
        }
        if !(self.bin_margin.is_finite() && self.speech_modulation > 0.0 && self.silence_margin > 0.0) {
            return Err(Error::Config(
                "bin_margin must be finite; speech_modulation and silence_margin > 0".into(),
            ));
        }
        if !(0.0 <= self.speech_low && self.speech_low < self.speech_high && self.speech_high <= 1.0) {
            return Err(Error::Config("speech score bounds must satisfy 0 <= low < high <= 1".into()));
        }
        if !(self.modulation_window_s >= 0.1 && self.modulation_window_s <= 60.0) {
            return Err(Error::Config("modulation_window_s must lie in [0.1, 60]".into()));
        }
        if let Some(t) = self.freeze_after_s {
            if !(t >= 0.0 && t.is_finite()) {
                return Err(Error::Config("freeze_after_s must be finite and >= 0".into()));
            }
        }
        if !(self.smoothing > 0.0 && self.smoothing < 1.0) {
            return Err(Error::Config("smoothing must lie in (0, 1)".into()));
        }
        if !(0.0 <= self.strength_min && self.strength_min <= self.strength_max && self.strength_max <= 1.0) {
            return Err(Error::Config("strength bounds must satisfy 0 <= min <= max <= 1".into()));
        }
        Ok(())
    }

    fn modulation_window_frames(&self) -> usize {
        (self.modulation_window_s * FRAMES_PER_SECOND).round() as usize
    }

    /// Mask for a bin whose normalized value exceeds the signature by `excess`.
    pub fn bin_mask(&self, excess: f64) -> f64 {
        1.0 / (1.0 + (self.mask_sharpness * (excess - self.bin_margin)).exp())
    }
}

/// What a frame says about the presence of interfering speech.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OverlapEvidence {
    /// Far below the recent peak level.
    Silence,
    /// Resembles the enrolled speaker.
    Target,
    /// Background with strongly modulated level.
    Speech,
    /// Background with a steady level.
    NonSpeech,
}

/// Per-frame diagnostics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SeparationTrace {
    pub similarity: f64,
    pub modulation: f64,
    pub evidence: OverlapEvidence,
    /// Mean of the per-bin mask.
    pub mean_mask: f64,
    /// Strength used for this frame (before the update).
    pub strength: f64,
}

/// Streaming separator state for one stream.
#[derive(Debug, Clone, PartialEq)]
pub struct Separator {
    config: SeparatorConfig,
    signature: SpeakerSignature,
    /// Smoothed fraction of recent background frames that looked like speech.
    speech_score: f64,
    strength: f64,
    peak_level: f64,
    levels: VecDeque<f64>,
    frames_seen: usize,
}

impl Separator {
    pub fn new(config: SeparatorConfig, signature: SpeakerSignature) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            signature,
            speech_score: 0.0,
            strength: config.strength_min,
            peak_level: f64::NEG_INFINITY,
            levels: VecDeque::with_capacity(config.modulation_window_frames()),
            frames_seen: 0,
        })
    }

    pub fn strength(&self) -> f64 {
        self.strength
    }

    pub fn speech_score(&self) -> f64 {
        self.speech_score
    }

    pub fn reset(&mut self) {
        self.speech_score = 0.0;
        self.strength = self.config.strength_min;
        self.peak_level = f64::NEG_INFINITY;
        self.levels.clear();
        self.frames_seen = 0;
    }

    fn adapting(&self) -> bool {
        match self.config.freeze_after_s {
            None => true,
            Some(t) => (self.frames_seen as f64) < t * FRAMES_PER_SECOND,
        }
    }

    pub fn process(&mut self, mel: &MelFrame) -> MelFrame {
        self.process_traced(mel).0
    }

    pub fn process_traced(&mut self, mel: &MelFrame) -> (MelFrame, SeparationTrace) {
        let x = &mel.log_energies;
        let z = mean_variance_normalize(x);
        let sim = cosine(&z, self.signature.as_slice());
        let mask: Vec<f64> = z
            .iter()
            .enumerate()
            .map(|(k, zk)| self.config.bin_mask(zk - self.signature.template(k)))
            .collect();
        let w = self.strength;
        let out = if w == 0.0 {
            mel.clone()
        } else {
            // Linear blend w*m*E + (1-w)*E, applied in the log domain.
            let floor = log_floor();
            MelFrame {
                log_energies: x
                    .iter()
                    .zip(&mask)
                    .map(|(v, m)| (v + (w * m + (1.0 - w)).ln()).max(floor))
                    .collect(),
                frame_index: mel.frame_index,
            }
        };

        let c = self.config;
        let level = frame_level(x);
        self.peak_level = level.max(self.peak_level - PEAK_DECAY);
        if self.levels.len() == c.modulation_window_frames() {
            self.levels.pop_front();
        }
        self.levels.push_back(level);
        let modulation = modulation_depth(self.levels.make_contiguous());
        let evidence = if level < self.peak_level - c.silence_margin {
            OverlapEvidence::Silence
        } else if sim >= c.target_similarity {
            OverlapEvidence::Target
        } else if modulation >= c.speech_modulation {
            OverlapEvidence::Speech
        } else {
            OverlapEvidence::NonSpeech
        };
        if self.adapting() {
            let a = c.smoothing;
            self.speech_score = match evidence {
                OverlapEvidence::Target | OverlapEvidence::Silence => self.speech_score,
                OverlapEvidence::Speech => a * self.speech_score + (1.0 - a),
                OverlapEvidence::NonSpeech => a * self.speech_score,
            };
        }
        self.frames_seen += 1;
        let ramp = ((self.speech_score - c.speech_low) / (c.speech_high - c.speech_low)).clamp(0.0, 1.0);
        self.strength = c.strength_min + ramp * (c.strength_max - c.strength_min);
        (
            out,
            SeparationTrace {
                similarity: sim,
                modulation,
                evidence,
                mean_mask: mask.iter().sum::<f64>() / NUM_MEL as f64,
                strength: w,
            },
        )
    }
}

/// Runs a fresh separator over a whole mel stream.
pub fn separate(config: SeparatorConfig, signature: &SpeakerSignature, mel: &[MelFrame]) -> Result<Vec<MelFrame>> {
    let mut sep = Separator::new(config, signature.clone())?;
    Ok(mel.iter().map(|m| sep.process(m)).collect())
}
