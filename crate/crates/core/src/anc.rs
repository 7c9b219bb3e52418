//! Multi-microphone adaptive noise canceller: joint NLMS over the reference
//! channels while the input is noise only, then a frozen linear filter.

use serde::{Deserialize, Serialize};

use crate::audio_io::AudioBuffer;
use crate::augment::MicScene;
use crate::error::{Error, Result};
use crate::frontend::{check_sample_rate, HOP_LEN, SAMPLE_RATE_HZ};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AncConfig {
    pub filter_taps: usize,
    pub step_size: f64,
    pub regularizer: f64,
    pub adaptation_duration_s: f64,
}

impl Default for AncConfig {
    fn default() -> Self {
        Self {
            filter_taps: 128,
            step_size: 0.5,
            regularizer: 1e-6,
            adaptation_duration_s: 3.0,
        }
    }
}

impl AncConfig {
    pub fn validate(&self) -> Result<()> {
        if self.filter_taps == 0 {
            return Err(Error::Config("anc filter_taps must be >= 1".into()));
        }
        if !(self.step_size > 0.0 && self.step_size < 2.0) {
            return Err(Error::Config(format!(
                "anc step_size {} outside (0, 2)",
                self.step_size
            )));
        }
        if !(self.regularizer > 0.0) {
            return Err(Error::Config("anc regularizer must be > 0".into()));
        }
        if !(self.adaptation_duration_s >= 0.0) {
            return Err(Error::Config("anc adaptation_duration_s must be >= 0".into()));
        }
        Ok(())
    }

    pub fn adaptation_samples(&self) -> usize {
        (self.adaptation_duration_s * f64::from(SAMPLE_RATE_HZ)).round() as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AncMode {
    Adapting,
    Frozen,
}

/// Last `L` samples of one reference channel, newest first.
#[derive(Debug, Clone, PartialEq)]
struct DelayLine {
    // Each sample is stored twice so the window is always one contiguous slice.
    buf: Vec<f64>,
    head: usize,
    len: usize,
}

impl DelayLine {
    fn new(len: usize) -> Self {
        Self {
            buf: vec![0.0; 2 * len],
            head: 0,
            len,
        }
    }

    fn push(&mut self, x: f64) {
        self.head = if self.head == 0 { self.len - 1 } else { self.head - 1 };
        self.buf[self.head] = x;
        self.buf[self.head + self.len] = x;
    }

    fn window(&self) -> &[f64] {
        &self.buf[self.head..self.head + self.len]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AncState {
    config: AncConfig,
    weights: Vec<Vec<f64>>,
    lines: Vec<DelayLine>,
    mode: AncMode,
}

impl AncState {
    pub fn new(config: AncConfig, num_refs: usize) -> Result<Self> {
        config.validate()?;
        if num_refs == 0 {
            return Err(Error::ReferenceCount {
                expected: 1,
                actual: 0,
            });
        }
        let l = config.filter_taps;
        Ok(Self {
            config,
            weights: vec![vec![0.0; l]; num_refs],
            lines: vec![DelayLine::new(l); num_refs],
            mode: AncMode::Adapting,
        })
    }

    pub fn config(&self) -> &AncConfig {
        &self.config
    }

    pub fn num_refs(&self) -> usize {
        self.weights.len()
    }

    pub fn mode(&self) -> AncMode {
        self.mode
    }

    /// Per-reference filter taps, `w_r[k]` multiplying `x_r[n - k]`.
    pub fn weights(&self) -> &[Vec<f64>] {
        &self.weights
    }

    pub fn set_weights(&mut self, weights: Vec<Vec<f64>>) -> Result<()> {
        if weights.len() != self.num_refs() {
            return Err(Error::ReferenceCount {
                expected: self.num_refs(),
                actual: weights.len(),
            });
        }
        if weights.iter().any(|w| w.len() != self.config.filter_taps) {
            return Err(Error::Config("weight vector length differs from filter_taps".into()));
        }
        self.weights = weights;
        Ok(())
    }

    pub fn weight_norm(&self) -> f64 {
        self.weights.iter().flatten().map(|w| w * w).sum::<f64>().sqrt()
    }

    pub fn freeze(&mut self) {
        self.mode = AncMode::Frozen;
    }

    pub fn reset(&mut self) {
        *self = Self::new(self.config, self.num_refs()).expect("config already validated");
    }

    /// One sample: returns `primary - sum_r w_r . x_r`, adapting if not frozen.
    pub fn process(&mut self, primary: f64, references: &[f64]) -> Result<f64> {
        if references.len() != self.num_refs() {
            return Err(Error::ReferenceCount {
                expected: self.num_refs(),
                actual: references.len(),
            });
        }
        for (line, &x) in self.lines.iter_mut().zip(references) {
            line.push(x);
        }
        let estimate: f64 = self
            .weights
            .iter()
            .zip(&self.lines)
            .map(|(w, line)| dot(w, line.window()))
            .sum();
        let y = primary - estimate;
        if self.mode == AncMode::Adapting {
            let energy: f64 = self.lines.iter().map(|l| dot(l.window(), l.window())).sum();
            let g = self.config.step_size * y / (energy + self.config.regularizer);
            for (w, line) in self.weights.iter_mut().zip(&self.lines) {
                w.iter_mut().zip(line.window()).for_each(|(w, x)| *w += g * x);
            }
        }
        Ok(y)
    }

    /// Processes aligned channel slices sample by sample.
    pub fn process_block(&mut self, primary: &[f64], references: &[&[f64]]) -> Result<Vec<f64>> {
        if references.len() != self.num_refs() {
            return Err(Error::ReferenceCount {
                expected: self.num_refs(),
                actual: references.len(),
            });
        }
        if references.iter().any(|r| r.len() != primary.len()) {
            return Err(Error::InvalidBuffer("reference and primary lengths differ".into()));
        }
        let mut frame = vec![0.0; references.len()];
        let mut out = Vec::with_capacity(primary.len());
        for (n, &p) in primary.iter().enumerate() {
            for (slot, r) in frame.iter_mut().zip(references) {
                *slot = r[n];
            }
            out.push(self.process(p, &frame)?);
        }
        Ok(out)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// When the canceller stops adapting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FreezePolicy {
    /// Freeze after `adaptation_duration_s` (the evaluation protocol's known prefix).
    AfterDuration,
    /// Freeze when a speech onset is detected on the primary channel.
    OnSpeechOnset,
}

const ONSET_MARGIN_DB: f64 = 10.0;
const ONSET_RUN: usize = 5;

fn to_db(rms: f64) -> f64 {
    20.0 * rms.max(1e-10).log10()
}

/// Streaming speech-onset detector over 10 ms frame energies. Frame `t` is an
/// onset when frames `t..t+4` all exceed the running median of the energies
/// before `t` by 10 dB.
#[derive(Debug, Clone, Default)]
pub struct OnsetDetector {
    sorted_db: Vec<f64>,
    recent: std::collections::VecDeque<(f64, f64)>,
    frames: usize,
    onset: Option<usize>,
}

impl OnsetDetector {
    pub fn new() -> Self {
        Self::default()
    }

    fn median(&self) -> Option<f64> {
        let n = self.sorted_db.len();
        match n {
            0 => None,
            _ if n % 2 == 1 => Some(self.sorted_db[n / 2]),
            _ => Some(0.5 * (self.sorted_db[n / 2 - 1] + self.sorted_db[n / 2])),
        }
    }

    /// Feeds one frame's RMS; returns the onset frame once it is confirmed.
    pub fn push(&mut self, rms: f64) -> Option<usize> {
        if self.onset.is_some() {
            return self.onset;
        }
        let db = to_db(rms);
        let floor = self.median().unwrap_or(f64::INFINITY);
        self.recent.push_back((db, floor));
        if self.recent.len() > ONSET_RUN {
            self.recent.pop_front();
        }
        let pos = self.sorted_db.partition_point(|&v| v < db);
        self.sorted_db.insert(pos, db);
        self.frames += 1;
        if self.recent.len() == ONSET_RUN {
            let start_floor = self.recent[0].1;
            if self.recent.iter().all(|&(e, _)| e > start_floor + ONSET_MARGIN_DB) {
                self.onset = Some(self.frames - ONSET_RUN);
            }
        }
        self.onset
    }

    pub fn onset(&self) -> Option<usize> {
        self.onset
    }
}

pub fn detect_speech_onset(energies: &[f64]) -> Option<usize> {
    let mut det = OnsetDetector::new();
    energies.iter().find_map(|&e| det.push(e))
}

/// RMS of consecutive non-overlapping 10 ms frames (a trailing partial frame is dropped).
pub fn frame_energies(samples: &[f64]) -> Vec<f64> {
    samples
        .chunks_exact(HOP_LEN)
        .map(|c| (dot(c, c) / HOP_LEN as f64).sqrt())
        .collect()
}

/// Streaming canceller for a `[primary, ref_1, .., ref_R]` stream that also
/// decides when to freeze.
#[derive(Debug, Clone)]
pub struct AncStream {
    state: AncState,
    policy: FreezePolicy,
    consumed: usize,
    onset: OnsetDetector,
    frame_acc: f64,
    frame_fill: usize,
}

impl AncStream {
    pub fn new(config: AncConfig, num_refs: usize, policy: FreezePolicy) -> Result<Self> {
        Ok(Self {
            state: AncState::new(config, num_refs)?,
            policy,
            consumed: 0,
            onset: OnsetDetector::new(),
            frame_acc: 0.0,
            frame_fill: 0,
        })
    }

    pub fn state(&self) -> &AncState {
        &self.state
    }

    /// `channels[0]` is the primary; all channels must have equal length.
    pub fn push(&mut self, channels: &[&[f64]]) -> Result<Vec<f64>> {
        let Some((primary, refs)) = channels.split_first() else {
            return Err(Error::InvalidBuffer("no channels".into()));
        };
        if refs.len() != self.state.num_refs() {
            return Err(Error::ReferenceCount {
                expected: self.state.num_refs(),
                actual: refs.len(),
            });
        }
        if refs.iter().any(|r| r.len() != primary.len()) {
            return Err(Error::InvalidBuffer("channel lengths differ".into()));
        }
        let limit = self.state.config.adaptation_samples();
        let mut frame = vec![0.0; refs.len()];
        let mut out = Vec::with_capacity(primary.len());
        for (n, &p) in primary.iter().enumerate() {
            if self.state.mode == AncMode::Adapting {
                match self.policy {
                    FreezePolicy::AfterDuration if self.consumed >= limit => self.state.freeze(),
                    FreezePolicy::OnSpeechOnset => {
                        self.frame_acc += p * p;
                        self.frame_fill += 1;
                        if self.frame_fill == HOP_LEN {
                            let rms = (self.frame_acc / HOP_LEN as f64).sqrt();
                            self.frame_acc = 0.0;
                            self.frame_fill = 0;
                            if self.onset.push(rms).is_some() {
                                self.state.freeze();
                            }
                        }
                    }
                    _ => {}
                }
            }
            for (slot, r) in frame.iter_mut().zip(refs) {
                *slot = r[n];
            }
            out.push(self.state.process(p, &frame)?);
            self.consumed += 1;
        }
        Ok(out)
    }
}

/// Speech-to-noise ratios on the primary channel before and after
/// cancellation, over the part of a scene after the adaptation segment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AncBenchmark {
    pub snr_in_db: f64,
    pub snr_out_db: f64,
    pub improvement_db: f64,
}

/// Adapts on the scene's first `adaptation_duration_s`, freezes, and splits
/// the frozen canceller's output into speech and noise parts by running the
/// same (linear) filter on each part separately.
pub fn benchmark_scene(scene: &MicScene, config: AncConfig) -> Result<AncBenchmark> {
    let adapt = config.adaptation_samples();
    if adapt + config.filter_taps >= scene.len() {
        return Err(Error::InvalidBuffer(format!(
            "scene of {} samples leaves nothing after {adapt} samples of adaptation",
            scene.len()
        )));
    }
    let refs: Vec<&[f64]> = scene.references.iter().map(|r| &r[..adapt]).collect();
    let mut state = AncState::new(config, scene.num_refs())?;
    state.process_block(&scene.primary[..adapt], &refs)?;
    let weights = state.weights().to_vec();
    let frozen_output = |parts: &[Vec<f64>]| -> Result<Vec<f64>> {
        let mut st = AncState::new(config, scene.num_refs())?;
        st.set_weights(weights.clone())?;
        st.freeze();
        let refs: Vec<&[f64]> = parts[1..].iter().map(Vec::as_slice).collect();
        st.process_block(&parts[0], &refs)
    };
    let power = |x: &[f64]| x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let db = |s: f64, n: f64| 10.0 * (s / n).log10();
    // Skip one filter length so the fresh delay lines hold only real input.
    let tail = adapt + config.filter_taps..scene.len();
    let speech_in = power(&scene.speech[0][tail.clone()]);
    let noise_in = power(&scene.noise[0][tail.clone()]);
    let speech_out = power(&frozen_output(&scene.speech)?[tail.clone()]);
    let noise_out = power(&frozen_output(&scene.noise)?[tail]);
    if speech_in == 0.0 || noise_in == 0.0 || noise_out == 0.0 {
        return Err(Error::Degenerate("scene has a silent speech or noise part".into()));
    }
    let snr_in_db = db(speech_in, noise_in);
    let snr_out_db = db(speech_out, noise_out);
    Ok(AncBenchmark {
        snr_in_db,
        snr_out_db,
        improvement_db: snr_out_db - snr_in_db,
    })
}

/// Cleans a multi-channel buffer (channel 0 primary, the rest references).
pub fn run_anc(audio: &AudioBuffer, config: AncConfig, policy: FreezePolicy) -> Result<AudioBuffer> {
    check_sample_rate(audio)?;
    if audio.num_channels() < 2 {
        return Err(Error::ReferenceCount {
            expected: 1,
            actual: 0,
        });
    }
    let mut stream = AncStream::new(config, audio.num_channels() - 1, policy)?;
    let channels: Vec<&[f64]> = audio.channels().iter().map(|c| c.as_slice()).collect();
    let cleaned = stream.push(&channels)?;
    AudioBuffer::mono(cleaned, audio.sample_rate_hz())
}
