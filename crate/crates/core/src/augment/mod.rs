//! Evaluation-set construction: SNR-controlled mixing, synthetic room
//! impulse responses, multi-microphone scenes with a noise-only prefix, and
//! the seeded synthetic voices used for desk-scale experiments.

pub mod synth;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::audio_io::{AudioBuffer, NoiseSource, Room};
use crate::error::{Error, Result};
use crate::frontend::SAMPLE_RATE_HZ;

pub use synth::{
    parse_phrase, phrase_text, synth_speaker_utterance, word_id, word_samples, word_spans, Voice, LEXICON,
    MAX_WORDS,
};

/// Causal FIR filtering; the output has the input's length.
pub fn fir_filter(taps: &[f64], input: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; input.len()];
    for (n, y) in out.iter_mut().enumerate() {
        let k_max = taps.len().min(n + 1);
        *y = (0..k_max).map(|k| taps[k] * input[n - k]).sum();
    }
    out
}

fn power(x: &[f64], mask: &[bool]) -> f64 {
    let (sum, count) = x
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .fold((0.0, 0usize), |(s, c), (v, _)| (s + v * v, c + 1));
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

/// Repeats or trims `noise` to exactly `len` samples.
pub fn fit_length(noise: &[f64], len: usize) -> Vec<f64> {
    if noise.is_empty() {
        return vec![0.0; len];
    }
    noise.iter().cycle().take(len).copied().collect()
}

/// Gain `g` such that `speech` over `g * noise` has the requested SNR, with
/// powers measured only where `mask` is set.
pub fn snr_gain(speech: &[f64], noise: &[f64], snr_db: f64, mask: &[bool]) -> Result<f64> {
    if !snr_db.is_finite() {
        return Err(Error::Config(format!("SNR {snr_db} is not finite")));
    }
    let ps = power(speech, mask);
    let pn = power(noise, mask);
    if ps <= 0.0 {
        return Err(Error::Degenerate("speech has zero power over the mask".into()));
    }
    if pn <= 0.0 {
        return Err(Error::Degenerate("noise has zero power over the mask".into()));
    }
    Ok((ps / (pn * 10f64.powf(snr_db / 10.0))).sqrt())
}

/// Adds `noise` (looped or trimmed to length) to `speech` at `snr_db`.
///
/// Multi-channel speech is paired channel-by-channel with the noise; a mono
/// noise buffer is shared by all channels. Powers are pooled over channels.
pub fn mix_at_snr(speech: &AudioBuffer, noise: &AudioBuffer, snr_db: f64, active_mask: &[bool]) -> Result<AudioBuffer> {
    if speech.sample_rate_hz() != noise.sample_rate_hz() {
        return Err(Error::SampleRate {
            expected: speech.sample_rate_hz(),
            actual: noise.sample_rate_hz(),
        });
    }
    if active_mask.len() != speech.len() {
        return Err(Error::Config("active mask length differs from speech".into()));
    }
    let n = speech.len();
    let fitted: Vec<Vec<f64>> = (0..speech.num_channels())
        .map(|c| {
            let src = noise.channel(c).unwrap_or_else(|| noise.channel(0).unwrap());
            fit_length(src, n)
        })
        .collect();
    let speech_all: Vec<f64> = speech.channels().concat();
    let noise_all: Vec<f64> = fitted.concat();
    let mask_all: Vec<bool> = active_mask
        .iter()
        .copied()
        .cycle()
        .take(speech_all.len())
        .collect();
    let g = snr_gain(&speech_all, &noise_all, snr_db, &mask_all)?;
    let channels = speech
        .channels()
        .iter()
        .zip(&fitted)
        .map(|(s, nz)| s.iter().zip(nz).map(|(a, b)| a + g * b).collect())
        .collect();
    AudioBuffer::new(channels, speech.sample_rate_hz())
}

pub const RT60_RANGE: (f64, f64) = (0.05, 1.5);

/// Synthetic room impulse response: a unit direct path followed by a seeded
/// white-noise tail under an `exp(-6.9 t / rt60)` envelope, `0.5 * rt60 * fs`
/// taps long, scaled to unit energy. The tail carries `rt60` (in seconds)
/// times the direct-path energy, so short rooms approach an impulse.
pub fn synth_rir(rt60_s: f64, seed: u64) -> Result<Vec<f64>> {
    if !(rt60_s > RT60_RANGE.0 - 1e-12 && rt60_s <= RT60_RANGE.1) {
        return Err(Error::Config(format!("rt60 {rt60_s} s outside (0.05, 1.5]")));
    }
    let fs = f64::from(SAMPLE_RATE_HZ);
    let len = ((0.5 * rt60_s * fs).round() as usize).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0_7e7e_7b);
    let mut tail: Vec<f64> = (0..len)
        .map(|n| {
            let t = n as f64 / fs;
            let g: f64 = rng.sample(StandardNormal);
            if n == 0 {
                0.0
            } else {
                g * (-6.9 * t / rt60_s).exp()
            }
        })
        .collect();
    let tail_energy: f64 = tail.iter().map(|v| v * v).sum();
    if tail_energy > 0.0 {
        let scale = (rt60_s / tail_energy).sqrt();
        tail.iter_mut().for_each(|v| *v *= scale);
    }
    tail[0] = 1.0;
    let energy: f64 = tail.iter().map(|v| v * v).sum();
    let norm = energy.sqrt();
    Ok(tail.into_iter().map(|v| v / norm).collect())
}

/// Convolves every channel with `rir`, truncated to the input length.
pub fn apply_reverb(audio: &AudioBuffer, rir: &[f64]) -> AudioBuffer {
    let channels = audio
        .channels()
        .iter()
        .map(|c| fir_filter(rir, c))
        .collect();
    AudioBuffer::new(channels, audio.sample_rate_hz()).expect("shape preserved")
}

/// Stationary coloured Gaussian noise at [`synth::UTTERANCE_RMS`].
pub fn nonspeech_noise(seed: u64, len: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0015_e0e0);
    let pole: f64 = rng.gen_range(0.3..0.95);
    let shaping: Vec<f64> = (0..16)
        .map(|k| {
            let g: f64 = rng.sample(StandardNormal);
            if k == 0 {
                1.0
            } else {
                0.4 * g * (-(k as f64) / 4.0).exp()
            }
        })
        .collect();
    let white: Vec<f64> = (0..len).map(|_| rng.sample(StandardNormal)).collect();
    let mut state = 0.0;
    let coloured: Vec<f64> = white
        .iter()
        .map(|&w| {
            state = pole * state + (1.0 - pole) * w;
            0.3 * w + state
        })
        .collect();
    let mut out = fir_filter(&shaping, &coloured);
    normalize_rms(&mut out, synth::UTTERANCE_RMS);
    out
}

/// A single interfering talker: random lexicon phrases with short pauses.
pub fn speech_noise(speaker_seed: u64, seed: u64, len: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xbab_b1e);
    let mut out = Vec::with_capacity(len + 32000);
    while out.len() < len {
        let words: Vec<usize> = (0..rng.gen_range(2..=6))
            .map(|_| rng.gen_range(0..LEXICON.len()))
            .collect();
        let jitter = rng.gen_range(0.85..1.15);
        let utt = synth_speaker_utterance(speaker_seed, &words, jitter).expect("valid phrase");
        out.extend_from_slice(utt.channel(0).unwrap());
        let pause = rng.gen_range(800..4000);
        out.extend(std::iter::repeat(0.0).take(pause));
    }
    out.truncate(len);
    out
}

pub fn normalize_rms(x: &mut [f64], target: f64) {
    let rms = (x.iter().map(|v| v * v).sum::<f64>() / x.len().max(1) as f64).sqrt();
    if rms > 0.0 {
        let s = target / rms;
        x.iter_mut().for_each(|v| *v *= s);
    }
}

/// One condition of the multi-style (MTR) evaluation grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MtrSpec {
    pub noise_source: NoiseSource,
    pub snr_db: f64,
    pub room: Room,
    pub prefix_noise_s: f64,
    #[serde(default = "default_rt60")]
    pub rt60_s: f64,
    pub seed: u64,
}

fn default_rt60() -> f64 {
    0.3
}

impl MtrSpec {
    pub fn validate(&self) -> Result<()> {
        if !self.snr_db.is_finite() {
            return Err(Error::Config("snr_db must be finite".into()));
        }
        if !(self.prefix_noise_s >= 0.0) {
            return Err(Error::Config("prefix_noise_s must be >= 0".into()));
        }
        if self.room == Room::Reverb && !(self.rt60_s > RT60_RANGE.0 - 1e-12 && self.rt60_s <= RT60_RANGE.1) {
            return Err(Error::Config(format!("rt60 {} s outside (0.05, 1.5]", self.rt60_s)));
        }
        Ok(())
    }
}

/// Primary and reference microphone signals with their ground-truth parts.
#[derive(Debug, Clone, PartialEq)]
pub struct MicScene {
    pub primary: Vec<f64>,
    pub references: Vec<Vec<f64>>,
    /// Speech part of each channel, primary first.
    pub speech: Vec<Vec<f64>>,
    /// Noise part of each channel, primary first.
    pub noise: Vec<Vec<f64>>,
    /// First sample of the (reverberated) utterance.
    pub speech_start: usize,
    pub noise_gain: f64,
}

impl MicScene {
    pub fn num_refs(&self) -> usize {
        self.references.len()
    }

    pub fn len(&self) -> usize {
        self.primary.len()
    }

    pub fn is_empty(&self) -> bool {
        self.primary.is_empty()
    }

    /// Channels `[primary, ref_1, .., ref_R]` as one buffer.
    pub fn to_audio(&self) -> AudioBuffer {
        let mut channels = vec![self.primary.clone()];
        channels.extend(self.references.iter().cloned());
        AudioBuffer::new(channels, SAMPLE_RATE_HZ).expect("aligned channels")
    }
}

pub const MAX_COUPLING_TAPS: usize = 64;
/// Amplitude of the target speech leaking into every reference microphone.
pub const REFERENCE_LEAKAGE: f64 = 0.1;
/// Uncorrelated sensor noise relative to each channel's coupled noise RMS.
pub const SENSOR_NOISE_LEVEL: f64 = 0.01;

/// Seeded acoustic couplings from one noise source to the primary and to
/// each reference microphone, each at most 64 taps. References sit closer to
/// the source (leading unit tap); the primary path is delayed.
pub fn coupling_firs(seed: u64, num_refs: usize) -> (Vec<f64>, Vec<Vec<f64>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xc0_0b1e);
    let mut tail = |lead: usize, amp: f64| -> Vec<f64> {
        let len = rng.gen_range(24..=MAX_COUPLING_TAPS);
        (0..len)
            .map(|k| {
                if k == lead {
                    1.0
                } else if k < lead {
                    0.0
                } else {
                    let g: f64 = rng.sample(StandardNormal);
                    amp * g * (-((k - lead) as f64) / 10.0).exp()
                }
            })
            .collect()
    };
    let delay = 3 + (seed % 6) as usize;
    let primary = tail(delay, 0.5);
    let refs = (0..num_refs).map(|_| tail(0, 0.25)).collect();
    (primary, refs)
}

/// Builds a multi-microphone scene: `prefix_noise_s` of silence is prepended
/// to the speech, the room is applied to the speech, and the noise reaches
/// every microphone through its coupling filter. Noise is scaled so the
/// primary channel meets `spec.snr_db` over the speech-active region.
pub fn build_scene(speech: &AudioBuffer, noise: &AudioBuffer, spec: &MtrSpec, num_refs: usize) -> Result<MicScene> {
    spec.validate()?;
    if num_refs == 0 {
        return Err(Error::Config("a scene needs at least one reference microphone".into()));
    }
    crate::frontend::check_sample_rate(speech)?;
    crate::frontend::check_sample_rate(noise)?;
    let fs = f64::from(SAMPLE_RATE_HZ);
    let prefix = (spec.prefix_noise_s * fs).round() as usize;
    let utterance = speech.channel(0).unwrap();
    let total = prefix + utterance.len();

    let mut dry = vec![0.0; prefix];
    dry.extend_from_slice(utterance);
    let speech_path = match spec.room {
        Room::Additive => dry,
        Room::Reverb => {
            let rir = synth_rir(spec.rt60_s, spec.seed)?;
            let mut wet = fir_filter(&rir, &dry);
            // Causal filtering keeps the prefix silent.
            wet[..prefix].iter_mut().for_each(|v| *v = 0.0);
            wet
        }
    };

    let source = fit_length(noise.channel(0).unwrap(), total);
    let (h_primary, h_refs) = coupling_firs(spec.seed, num_refs);
    let mut sensor = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5e_5e_5e);
    let mut couple = |h: &[f64]| -> Vec<f64> {
        let mut x = fir_filter(h, &source);
        let rms = (x.iter().map(|v| v * v).sum::<f64>() / x.len().max(1) as f64).sqrt();
        for v in x.iter_mut() {
            let g: f64 = sensor.sample(StandardNormal);
            *v += SENSOR_NOISE_LEVEL * rms * g;
        }
        x
    };
    let primary_noise = couple(&h_primary);
    let ref_noise: Vec<Vec<f64>> = h_refs.iter().map(|h| couple(h)).collect();

    let mask: Vec<bool> = (0..total).map(|i| i >= prefix).collect();
    let g = snr_gain(&speech_path, &primary_noise, spec.snr_db, &mask)?;

    let mut speech_parts = vec![speech_path.clone()];
    let mut noise_parts = vec![primary_noise.iter().map(|v| g * v).collect::<Vec<_>>()];
    for rn in &ref_noise {
        speech_parts.push(speech_path.iter().map(|v| REFERENCE_LEAKAGE * v).collect());
        noise_parts.push(rn.iter().map(|v| g * v).collect());
    }
    let mut channels: Vec<Vec<f64>> = speech_parts
        .iter()
        .zip(&noise_parts)
        .map(|(s, n)| s.iter().zip(n).map(|(a, b)| a + b).collect())
        .collect();
    let primary = channels.remove(0);
    Ok(MicScene {
        primary,
        references: channels,
        speech: speech_parts,
        noise: noise_parts,
        speech_start: prefix,
        noise_gain: g,
    })
}
