//! Seeded synthetic voices speaking a fixed 32-word lexicon.
//!
//! A voice is a pitch contour plus four static resonators; a word is a fixed
//! sequence of three articulation targets driving two moving resonators. Both
//! resonator banks run in parallel over a pulse-train excitation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::audio_io::AudioBuffer;
use crate::error::{Error, Result};
use crate::frontend::SAMPLE_RATE_HZ;

pub const LEXICON: [&str; 32] = [
    "hey", "device", "turn", "on", "off", "the", "lights", "set", "a", "timer", "stop", "remind",
    "me", "to", "an", "alarm", "what", "is", "weather", "tomorrow", "play", "music", "volume", "up",
    "down", "call", "mom", "open", "door", "water", "my", "plants",
];

pub const WORD_DURATION_S: f64 = 0.3;
pub const MAX_WORDS: usize = 8;
pub const JITTER_RANGE: (f64, f64) = (0.75, 1.25);
/// RMS level every synthetic utterance is normalized to.
pub const UTTERANCE_RMS: f64 = 0.05;

const LEXICON_SEED: u64 = 0x5eed_1e71_c0de;
const CONTROL_PERIOD: usize = 32;
const EDGE_RAMP_S: f64 = 0.025;
const SPEAKER_GAIN: f64 = 1.0;
const WORD_GAIN: f64 = 1.0;

pub fn word_id(word: &str) -> Option<usize> {
    LEXICON.iter().position(|w| *w == word)
}

/// Parses a space-separated phrase into word ids.
pub fn parse_phrase(text: &str) -> Result<Vec<usize>> {
    text.split_whitespace()
        .map(|w| {
            word_id(w).ok_or_else(|| Error::Config(format!("word {w:?} is not in the lexicon")))
        })
        .collect()
}

pub fn phrase_text(words: &[usize]) -> String {
    words
        .iter()
        .map(|&w| LEXICON.get(w).copied().unwrap_or("?"))
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn word_samples(rate_jitter: f64) -> usize {
    (WORD_DURATION_S * rate_jitter * f64::from(SAMPLE_RATE_HZ)).round() as usize
}

/// Sample spans `[start, end)` of each word in an utterance.
pub fn word_spans(num_words: usize, rate_jitter: f64) -> Vec<(usize, usize)> {
    let n = word_samples(rate_jitter);
    (0..num_words).map(|i| (i * n, (i + 1) * n)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Resonance {
    pub center_hz: f64,
    pub bandwidth_hz: f64,
    pub gain: f64,
}

/// Speaker identity: mean pitch and four formant-like resonators.
#[derive(Debug, Clone, PartialEq)]
pub struct Voice {
    pub f0_hz: f64,
    pub resonators: [Resonance; 4],
}

impl Voice {
    pub fn from_seed(speaker_seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(speaker_seed ^ 0xa11c_e5ee_d000);
        let bands = [(300.0, 900.0), (1000.0, 2100.0), (2200.0, 3300.0), (3400.0, 5200.0)];
        let f0_hz = rng.gen_range(90.0..240.0);
        let resonators = bands.map(|(lo, hi)| Resonance {
            center_hz: rng.gen_range(lo..hi),
            bandwidth_hz: rng.gen_range(70.0..160.0),
            gain: SPEAKER_GAIN * rng.gen_range(0.7..1.3),
        });
        Self { f0_hz, resonators }
    }
}

#[derive(Debug, Clone, Copy)]
struct Target {
    low_hz: f64,
    high_hz: f64,
    level: f64,
}

fn gesture(word: usize) -> [Target; 3] {
    let mut rng = ChaCha8Rng::seed_from_u64(LEXICON_SEED.wrapping_add(word as u64 * 0x9e37_79b9));
    [(); 3].map(|_| Target {
        low_hz: rng.gen_range(250.0..1100.0),
        high_hz: rng.gen_range(1200.0..4000.0),
        level: rng.gen_range(0.55..1.0),
    })
}

/// Two-pole resonator with zeros at DC and Nyquist and unit peak gain.
#[derive(Debug, Clone, Default)]
struct Resonator {
    b0: f64,
    a1: f64,
    a2: f64,
    x1: f64,
    x2: f64,
    y1: f64,
    y2: f64,
}

impl Resonator {
    fn tune(&mut self, center_hz: f64, bandwidth_hz: f64) {
        let fs = f64::from(SAMPLE_RATE_HZ);
        let r = (-std::f64::consts::PI * bandwidth_hz / fs).exp();
        let theta = 2.0 * std::f64::consts::PI * center_hz / fs;
        self.b0 = (1.0 - r * r) / 2.0;
        self.a1 = 2.0 * r * theta.cos();
        self.a2 = r * r;
    }

    fn step(&mut self, x: f64) -> f64 {
        let y = self.b0 * (x - self.x2) + self.a1 * self.y1 - self.a2 * self.y2;
        self.x2 = self.x1;
        self.x1 = x;
        self.y2 = self.y1;
        self.y1 = y;
        y
    }
}

fn interp_targets(targets: &[Target; 3], pos: f64) -> Target {
    // Targets sit at 1/6, 1/2 and 5/6 of the word.
    let t = ((pos - 1.0 / 6.0) * 3.0).clamp(0.0, 2.0);
    let i = (t.floor() as usize).min(1);
    let frac = t - i as f64;
    let (a, b) = (targets[i], targets[i + 1]);
    Target {
        low_hz: a.low_hz + frac * (b.low_hz - a.low_hz),
        high_hz: a.high_hz + frac * (b.high_hz - a.high_hz),
        level: a.level + frac * (b.level - a.level),
    }
}

/// Renders `phrase` (word ids) in the voice of `speaker_seed`.
///
/// `rate_jitter` scales every word's duration and must lie in `[0.75, 1.25]`.
pub fn synth_speaker_utterance(speaker_seed: u64, phrase: &[usize], rate_jitter: f64) -> Result<AudioBuffer> {
    if phrase.is_empty() || phrase.len() > MAX_WORDS {
        return Err(Error::Config(format!(
            "phrase must hold 1..={MAX_WORDS} words, got {}",
            phrase.len()
        )));
    }
    if let Some(&bad) = phrase.iter().find(|&&w| w >= LEXICON.len()) {
        return Err(Error::UnknownWord(bad));
    }
    if !(JITTER_RANGE.0..=JITTER_RANGE.1).contains(&rate_jitter) {
        return Err(Error::Config(format!("rate jitter {rate_jitter} outside [0.75, 1.25]")));
    }
    let voice = Voice::from_seed(speaker_seed);
    let gestures: Vec<[Target; 3]> = phrase.iter().map(|&w| gesture(w)).collect();
    let word_len = word_samples(rate_jitter);
    let total = word_len * phrase.len();
    let fs = f64::from(SAMPLE_RATE_HZ);
    let ramp = (EDGE_RAMP_S * fs) as usize;

    let mut aspiration = ChaCha8Rng::seed_from_u64(speaker_seed.wrapping_mul(31).wrapping_add(phrase.len() as u64));
    let mut speaker_bank: Vec<Resonator> = voice
        .resonators
        .iter()
        .map(|r| {
            let mut res = Resonator::default();
            res.tune(r.center_hz, r.bandwidth_hz);
            res
        })
        .collect();
    let mut low = Resonator::default();
    let mut high = Resonator::default();
    let mut target = gestures[0][0];

    let mut out = Vec::with_capacity(total);
    let mut phase = 0.0;
    for n in 0..total {
        let word = n / word_len;
        let pos = (n % word_len) as f64 / word_len as f64;
        if n % CONTROL_PERIOD == 0 {
            target = interp_targets(&gestures[word], pos);
            low.tune(target.low_hz, 90.0);
            high.tune(target.high_hz, 140.0);
        }
        // Gentle declination over the utterance.
        let f0 = voice.f0_hz * (1.05 - 0.1 * n as f64 / total as f64);
        phase += f0 / fs;
        let mut excitation = 0.02 * (aspiration.gen::<f64>() - 0.5);
        if phase >= 1.0 {
            phase -= 1.0;
            excitation += 1.0;
        }
        let voiced: f64 = speaker_bank
            .iter_mut()
            .zip(&voice.resonators)
            .map(|(res, r)| r.gain * res.step(excitation))
            .sum::<f64>()
            + WORD_GAIN * (low.step(excitation) + high.step(excitation));

        let k = n % word_len;
        let edge = if k < ramp {
            0.5 * (1.0 - (std::f64::consts::PI * k as f64 / ramp as f64).cos())
        } else if word_len - k <= ramp {
            0.5 * (1.0 - (std::f64::consts::PI * (word_len - k) as f64 / ramp as f64).cos())
        } else {
            1.0
        };
        out.push(voiced * edge * target.level);
    }
    let rms = (out.iter().map(|v| v * v).sum::<f64>() / out.len() as f64).sqrt();
    if rms > 0.0 {
        let scale = UTTERANCE_RMS / rms;
        out.iter_mut().for_each(|v| *v *= scale);
    }
    AudioBuffer::mono(out, SAMPLE_RATE_HZ)
}
