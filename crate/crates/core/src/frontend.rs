//! Shared feature frontend: automatic gain control, 32 ms Hann frames at a
//! 10 ms hop, 128 log-mel energies between 125 Hz and 7500 Hz, and 4-frame
//! stacking with 3-frame subsampling into 512-dim features at a 30 ms rate.
//!
//! Every stage is streaming and carries its state across calls, so feeding a
//! signal in arbitrary chunks yields bit-identical features to a single call.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::audio_io::AudioBuffer;
use crate::error::{Error, Result};

pub const SAMPLE_RATE_HZ: u32 = 16_000;
pub const FRAME_LEN: usize = 512;
pub const HOP_LEN: usize = 160;
pub const FFT_LEN: usize = 512;
pub const NUM_BINS: usize = FFT_LEN / 2 + 1;
pub const NUM_MEL: usize = 128;
pub const MEL_LOW_HZ: f64 = 125.0;
pub const MEL_HIGH_HZ: f64 = 7500.0;
pub const STACK: usize = 4;
pub const SUBSAMPLE: usize = 3;
pub const STACKED_DIM: usize = STACK * NUM_MEL;
pub const ENERGY_FLOOR: f64 = 1e-12;

/// Natural-log floor applied to every filterbank energy.
pub fn log_floor() -> f64 {
    ENERGY_FLOOR.ln()
}

pub fn hz_to_mel(hz: f64) -> f64 {
    1127.0 * (1.0 + hz / 700.0).ln()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * ((mel / 1127.0).exp() - 1.0)
}

/// One 10 ms frame of log-mel energies.
#[derive(Debug, Clone, PartialEq)]
pub struct MelFrame {
    pub log_energies: Vec<f64>,
    /// Index in 10 ms units.
    pub frame_index: usize,
}

/// Four consecutive mel frames, emitted every third mel frame.
#[derive(Debug, Clone, PartialEq)]
pub struct StackedFrame {
    pub features: Vec<f64>,
    /// Index in 30 ms units.
    pub frame_index: usize,
}

/// Feed-forward automatic gain control. A mean-square detector with the
/// attack time constant feeds a level that rises instantly and falls with the
/// release time constant; the gain is `target_rms / level`, applied at once
/// when it drops and slewed by at most `max_step_ratio` per sample when it
/// rises.
#[derive(Debug, Clone, PartialEq)]
pub struct AgcConfig {
    pub target_rms: f64,
    pub attack_s: f64,
    pub release_s: f64,
    pub min_gain: f64,
    pub max_gain: f64,
    /// Largest allowed relative gain increase per sample.
    pub max_step_ratio: f64,
    /// Detector RMS below this level counts as silence and freezes the gain.
    pub silence_rms: f64,
}

impl Default for AgcConfig {
    fn default() -> Self {
        Self {
            target_rms: 0.1,
            attack_s: 0.010,
            release_s: 0.500,
            min_gain: 0.1,
            max_gain: 10.0,
            max_step_ratio: 1e-3,
            silence_rms: 1e-4,
        }
    }
}

fn one_pole(time_constant_s: f64) -> f64 {
    1.0 - (-1.0 / (time_constant_s * f64::from(SAMPLE_RATE_HZ))).exp()
}

#[derive(Debug, Clone)]
pub struct AgcState {
    config: AgcConfig,
    gain: f64,
    mean_square: f64,
    /// Peak-holding mean-square level.
    level: f64,
    attack: f64,
    release: f64,
}

impl AgcState {
    pub fn new(config: AgcConfig) -> Self {
        Self {
            attack: one_pole(config.attack_s),
            release: one_pole(config.release_s),
            config,
            gain: 1.0,
            mean_square: 0.0,
            level: 0.0,
        }
    }

    pub fn gain(&self) -> f64 {
        self.gain
    }

    fn step(&mut self, x: f64) -> f64 {
        let cfg = &self.config;
        self.mean_square += self.attack * (x * x - self.mean_square);
        if self.mean_square > self.level {
            self.level = self.mean_square;
        } else {
            self.level += self.release * (self.mean_square - self.level);
        }
        if self.mean_square.sqrt() >= cfg.silence_rms {
            let target = (cfg.target_rms / self.level.sqrt()).clamp(cfg.min_gain, cfg.max_gain);
            self.gain = target.min(self.gain * (1.0 + cfg.max_step_ratio));
        }
        self.gain * x
    }

    /// Applies the gain to a chunk, advancing the state.
    pub fn process(&mut self, chunk: &[f64]) -> Vec<f64> {
        chunk.iter().map(|&x| self.step(x)).collect()
    }
}

impl Default for AgcState {
    fn default() -> Self {
        Self::new(AgcConfig::default())
    }
}

/// Symmetric Hann window of `FRAME_LEN` points.
pub fn hann_window() -> Vec<f64> {
    let denom = (FRAME_LEN - 1) as f64;
    (0..FRAME_LEN)
        .map(|n| 0.5 * (1.0 - (2.0 * std::f64::consts::PI * n as f64 / denom).cos()))
        .collect()
}

pub fn num_frames(num_samples: usize) -> usize {
    if num_samples < FRAME_LEN {
        0
    } else {
        1 + (num_samples - FRAME_LEN) / HOP_LEN
    }
}

pub fn num_stacked(num_mel: usize) -> usize {
    if num_mel == 0 {
        0
    } else {
        (num_mel - 1) / SUBSAMPLE + 1
    }
}

/// Cuts a signal into Hann-windowed frames; frame `t` covers `[160 t, 160 t + 512)`.
pub fn frame_signal(samples: &[f64]) -> Vec<Vec<f64>> {
    let window = hann_window();
    (0..num_frames(samples.len()))
        .map(|t| {
            samples[t * HOP_LEN..t * HOP_LEN + FRAME_LEN]
                .iter()
                .zip(&window)
                .map(|(s, w)| s * w)
                .collect()
        })
        .collect()
}

#[derive(Debug, Clone)]
struct TriangleFilter {
    start_bin: usize,
    weights: Vec<f64>,
}

/// 128 triangular filters on the mel scale applied to a 512-point power spectrum.
///
/// Filters whose mel-spaced triangle is narrower than one FFT bin (the lowest
/// bands) are widened to reach the neighbouring bins, then every filter is
/// scaled so its largest sampled weight is exactly 1.
#[derive(Clone)]
pub struct MelFilterbank {
    filters: Vec<TriangleFilter>,
    centers_hz: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for MelFilterbank {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MelFilterbank")
            .field("num_filters", &self.filters.len())
            .finish()
    }
}

impl Default for MelFilterbank {
    fn default() -> Self {
        Self::new()
    }
}

impl MelFilterbank {
    pub fn new() -> Self {
        let bin_hz = f64::from(SAMPLE_RATE_HZ) / FFT_LEN as f64;
        let lo_mel = hz_to_mel(MEL_LOW_HZ);
        let hi_mel = hz_to_mel(MEL_HIGH_HZ);
        let step = (hi_mel - lo_mel) / (NUM_MEL + 1) as f64;
        let edges: Vec<f64> = (0..NUM_MEL + 2)
            .map(|i| mel_to_hz(lo_mel + step * i as f64))
            .collect();

        let mut filters = Vec::with_capacity(NUM_MEL);
        let mut centers_hz = Vec::with_capacity(NUM_MEL);
        for k in 0..NUM_MEL {
            let center = edges[k + 1];
            let lower = edges[k].min(center - bin_hz);
            let upper = edges[k + 2].max(center + bin_hz);
            let weight = |f: f64| {
                if f > lower && f <= center {
                    (f - lower) / (center - lower)
                } else if f > center && f < upper {
                    (upper - f) / (upper - center)
                } else {
                    0.0
                }
            };
            let all: Vec<f64> = (0..NUM_BINS).map(|b| weight(b as f64 * bin_hz)).collect();
            let start = all.iter().position(|&w| w > 0.0).expect("filter covers a bin");
            let end = all.iter().rposition(|&w| w > 0.0).unwrap() + 1;
            let peak = all[start..end].iter().cloned().fold(0.0, f64::max);
            filters.push(TriangleFilter {
                start_bin: start,
                weights: all[start..end].iter().map(|w| w / peak).collect(),
            });
            centers_hz.push(center);
        }
        let fft = FftPlanner::new().plan_fft_forward(FFT_LEN);
        Self {
            filters,
            centers_hz,
            fft,
        }
    }

    pub fn centers_hz(&self) -> &[f64] {
        &self.centers_hz
    }

    /// Dense weight row of filter `k` over bins `0..=256`.
    pub fn filter_weights(&self, k: usize) -> Vec<f64> {
        let f = &self.filters[k];
        let mut row = vec![0.0; NUM_BINS];
        row[f.start_bin..f.start_bin + f.weights.len()].copy_from_slice(&f.weights);
        row
    }

    /// Magnitude-squared spectrum, bins `0..=256`.
    pub fn power_spectrum(&self, frame: &[f64]) -> Vec<f64> {
        assert_eq!(frame.len(), FRAME_LEN, "frame must hold {FRAME_LEN} samples");
        let mut buf: Vec<Complex<f64>> = frame.iter().map(|&x| Complex::new(x, 0.0)).collect();
        self.fft.process(&mut buf);
        buf[..NUM_BINS].iter().map(|c| c.norm_sqr()).collect()
    }

    pub fn apply(&self, power: &[f64]) -> Vec<f64> {
        self.filters
            .iter()
            .map(|f| {
                let e: f64 = f
                    .weights
                    .iter()
                    .zip(&power[f.start_bin..])
                    .map(|(w, p)| w * p)
                    .sum();
                e.max(ENERGY_FLOOR).ln()
            })
            .collect()
    }

    /// Log-mel energies of one windowed frame.
    pub fn mel_frame(&self, frame: &[f64], frame_index: usize) -> MelFrame {
        MelFrame {
            log_energies: self.apply(&self.power_spectrum(frame)),
            frame_index,
        }
    }
}

/// Causal stacker: output `k` is `mel[3k-3] ++ mel[3k-2] ++ mel[3k-1] ++ mel[3k]`,
/// with indices before the stream start replaced by `mel[0]`.
#[derive(Debug, Clone, Default)]
pub struct Stacker {
    history: Vec<Vec<f64>>,
    seen: usize,
}

impl Stacker {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, mel: &MelFrame) -> Option<StackedFrame> {
        if self.history.is_empty() {
            self.history = vec![mel.log_energies.clone(); STACK];
        } else {
            self.history.rotate_left(1);
            self.history[STACK - 1].clone_from(&mel.log_energies);
        }
        let index = self.seen;
        self.seen += 1;
        if index % SUBSAMPLE != 0 {
            return None;
        }
        let mut features = Vec::with_capacity(STACKED_DIM);
        for frame in &self.history {
            features.extend_from_slice(frame);
        }
        Some(StackedFrame {
            features,
            frame_index: index / SUBSAMPLE,
        })
    }

    pub fn reset(&mut self) {
        self.history.clear();
        self.seen = 0;
    }
}

pub fn stack_subsample(mel: &[MelFrame]) -> Vec<StackedFrame> {
    let mut stacker = Stacker::new();
    mel.iter().filter_map(|m| stacker.push(m)).collect()
}

/// Features produced by one call to [`Frontend::push`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FrontendOutput {
    pub mel: Vec<MelFrame>,
    pub stacked: Vec<StackedFrame>,
}

/// Streaming frontend for one 16 kHz mono stream.
#[derive(Debug, Clone)]
pub struct Frontend {
    agc: AgcState,
    window: Vec<f64>,
    filterbank: MelFilterbank,
    stacker: Stacker,
    pending: Vec<f64>,
    next_frame: usize,
}

impl Default for Frontend {
    fn default() -> Self {
        Self::new(AgcConfig::default())
    }
}

impl Frontend {
    pub fn new(agc: AgcConfig) -> Self {
        Self {
            agc: AgcState::new(agc),
            window: hann_window(),
            filterbank: MelFilterbank::new(),
            stacker: Stacker::new(),
            pending: Vec::with_capacity(2 * FRAME_LEN),
            next_frame: 0,
        }
    }

    pub fn filterbank(&self) -> &MelFilterbank {
        &self.filterbank
    }

    pub fn push(&mut self, chunk: &[f64]) -> FrontendOutput {
        let gained = self.agc.process(chunk);
        self.pending.extend_from_slice(&gained);
        let mut out = FrontendOutput::default();
        let mut consumed = 0;
        while self.pending.len() - consumed >= FRAME_LEN {
            let frame: Vec<f64> = self.pending[consumed..consumed + FRAME_LEN]
                .iter()
                .zip(&self.window)
                .map(|(s, w)| s * w)
                .collect();
            let mel = self.filterbank.mel_frame(&frame, self.next_frame);
            self.next_frame += 1;
            if let Some(stacked) = self.stacker.push(&mel) {
                out.stacked.push(stacked);
            }
            out.mel.push(mel);
            consumed += HOP_LEN;
        }
        self.pending.drain(..consumed);
        out
    }
}

pub fn check_sample_rate(audio: &AudioBuffer) -> Result<()> {
    if audio.sample_rate_hz() != SAMPLE_RATE_HZ {
        return Err(Error::SampleRate {
            expected: SAMPLE_RATE_HZ,
            actual: audio.sample_rate_hz(),
        });
    }
    Ok(())
}

/// Runs the whole frontend over one channel of a buffer.
pub fn run_frontend(audio: &AudioBuffer, channel: usize) -> Result<(Vec<MelFrame>, Vec<StackedFrame>)> {
    check_sample_rate(audio)?;
    let samples = audio.channel(channel).ok_or(Error::ChannelOutOfRange {
        requested: channel,
        available: audio.num_channels(),
    })?;
    let out = Frontend::default().push(samples);
    Ok((out.mel, out.stacked))
}

/// Writes `(frame_index: u32, dim x f32)` little-endian records.
pub fn write_feature_dump<'a>(
    path: impl AsRef<Path>,
    frames: impl IntoIterator<Item = (usize, &'a [f64])>,
) -> Result<()> {
    let path = path.as_ref();
    let unwritable = |source| Error::Unwritable {
        path: path.to_path_buf(),
        source,
    };
    let mut out = BufWriter::new(File::create(path).map_err(unwritable)?);
    for (index, values) in frames {
        out.write_all(&(index as u32).to_le_bytes()).map_err(unwritable)?;
        for &v in values {
            out.write_all(&(v as f32).to_le_bytes()).map_err(unwritable)?;
        }
    }
    out.flush().map_err(unwritable)
}

/// Reads a dump written by [`write_feature_dump`] with records of `dim` values.
pub fn read_feature_dump(path: impl AsRef<Path>, dim: usize) -> Result<Vec<(u32, Vec<f32>)>> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    BufReader::new(File::open(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?)
    .read_to_end(&mut bytes)
    .map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let record = 4 * (dim + 1);
    if bytes.len() % record != 0 {
        return Err(Error::MalformedBinary {
            path: path.to_path_buf(),
            reason: format!("length {} is not a multiple of {record}", bytes.len()),
        });
    }
    Ok(bytes
        .chunks_exact(record)
        .map(|r| {
            let index = u32::from_le_bytes(r[..4].try_into().unwrap());
            let values = r[4..]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect();
            (index, values)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sine(freq: f64, amp: f64, n: usize) -> Vec<f64> {
        (0..n)
            .map(|i| amp * (2.0 * std::f64::consts::PI * freq * i as f64 / 16000.0).sin())
            .collect()
    }

    fn rms(x: &[f64]) -> f64 {
        (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt()
    }

    #[test]
    fn agc_silence_is_inert() {
        let mut agc = AgcState::default();
        let out = agc.process(&vec![0.0; 4000]);
        assert!(out.iter().all(|&v| v == 0.0));
        assert_eq!(agc.gain(), 1.0);
    }

    #[test]
    fn agc_converges_on_quiet_sine() {
        let x = sine(440.0, 0.02, 32000);
        let mut agc = AgcState::default();
        let y = agc.process(&x);
        // Closed-form RMS of a sine of amplitude A is A / sqrt(2).
        let expected_in = 0.02 / 2f64.sqrt();
        assert!((rms(&x[16000..]) - expected_in).abs() < 1e-4);
        let out = rms(&y[28000..]);
        assert!((out - 0.1).abs() <= 0.01, "output rms {out}");
    }

    #[test]
    fn agc_gain_moves_smoothly_and_stays_bounded() {
        let mut x = sine(300.0, 0.001, 8000);
        x.extend(sine(300.0, 0.9, 8000));
        x.extend(vec![0.0; 4000]);
        let mut agc = AgcState::default();
        let mut prev = agc.gain();
        for &s in &x {
            agc.process(&[s]);
            let g = agc.gain();
            assert!(g / prev <= 1.0 + 1e-3 + 1e-12);
            assert!((0.1..=10.0).contains(&g));
            prev = g;
        }
    }

    #[test]
    fn agc_level_invariance_after_convergence() {
        let x = sine(440.0, 0.02, 48000);
        let x4: Vec<f64> = x.iter().map(|v| 4.0 * v).collect();
        let y = AgcState::default().process(&x);
        let y4 = AgcState::default().process(&x4);
        let worst = y[32000..]
            .iter()
            .zip(&y4[32000..])
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(worst < 1e-2, "max deviation {worst}");
    }

    #[test]
    fn frame_counts() {
        assert_eq!(num_frames(16000), 97);
        assert_eq!(num_frames(511), 0);
        assert_eq!(num_frames(512), 1);
        assert_eq!(frame_signal(&vec![0.0; 16000]).len(), 97);
        assert_eq!(num_stacked(97), 33);
        assert_eq!(num_stacked(1), 1);
        assert_eq!(num_stacked(0), 0);
    }

    #[test]
    fn constant_input_frames_equal_window() {
        let frames = frame_signal(&vec![1.0; 1000]);
        let window = hann_window();
        for f in frames {
            assert_eq!(f, window);
        }
    }

    #[test]
    fn filters_are_well_formed() {
        let fb = MelFilterbank::new();
        let centers = fb.centers_hz();
        assert_eq!(centers.len(), NUM_MEL);
        assert!(centers.windows(2).all(|w| w[1] > w[0]));
        assert!((centers[0] - mel_to_hz(hz_to_mel(125.0) + (hz_to_mel(7500.0) - hz_to_mel(125.0)) / 129.0)).abs() < 1e-9);
        for k in 0..NUM_MEL {
            let row = fb.filter_weights(k);
            assert!(row.iter().all(|&w| w >= 0.0));
            let peak = row.iter().cloned().fold(0.0, f64::max);
            assert_eq!(peak, 1.0);
        }
    }

    #[test]
    fn zero_frame_hits_floor() {
        let fb = MelFilterbank::new();
        let m = fb.mel_frame(&vec![0.0; FRAME_LEN], 0);
        assert_eq!(m.log_energies.len(), NUM_MEL);
        assert!(m.log_energies.iter().all(|&v| v == log_floor()));
    }

    #[test]
    fn stacking_edge_padding() {
        let mel = vec![MelFrame {
            log_energies: (0..NUM_MEL).map(|i| i as f64).collect(),
            frame_index: 0,
        }];
        let stacked = stack_subsample(&mel);
        assert_eq!(stacked.len(), 1);
        assert_eq!(stacked[0].features.len(), STACKED_DIM);
        for block in stacked[0].features.chunks(NUM_MEL) {
            assert_eq!(block, mel[0].log_energies.as_slice());
        }
    }

    #[test]
    fn stacking_concatenates_sources() {
        let mel: Vec<MelFrame> = (0..20)
            .map(|t| MelFrame {
                log_energies: vec![t as f64; NUM_MEL],
                frame_index: t,
            })
            .collect();
        let stacked = stack_subsample(&mel);
        assert_eq!(stacked.len(), num_stacked(20));
        for s in &stacked {
            let k = s.frame_index;
            for (j, block) in s.features.chunks(NUM_MEL).enumerate() {
                let src = (3 * k + j).saturating_sub(3);
                assert_eq!(block, mel[src].log_energies.as_slice(), "k={k} j={j}");
            }
        }
    }

    #[test]
    fn run_frontend_counts_and_rate_check() {
        let audio = AudioBuffer::mono(vec![0.0; 16000], 16000).unwrap();
        let (mel, stacked) = run_frontend(&audio, 0).unwrap();
        assert_eq!(mel.len(), 97);
        assert_eq!(stacked.len(), 33);
        assert!(mel.iter().all(|m| m.log_energies.iter().all(|&v| v == log_floor())));

        let wrong = AudioBuffer::mono(vec![0.0; 8000], 8000).unwrap();
        assert!(matches!(run_frontend(&wrong, 0), Err(Error::SampleRate { .. })));
        assert!(matches!(
            run_frontend(&audio, 1),
            Err(Error::ChannelOutOfRange { .. })
        ));
    }

    #[test]
    fn feature_dump_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("feat.bin");
        let audio = AudioBuffer::mono(sine(700.0, 0.2, 4000), 16000).unwrap();
        let (mel, _) = run_frontend(&audio, 0).unwrap();
        write_feature_dump(
            &path,
            mel.iter().map(|m| (m.frame_index, m.log_energies.as_slice())),
        )
        .unwrap();
        let back = read_feature_dump(&path, NUM_MEL).unwrap();
        assert_eq!(back.len(), mel.len());
        for (m, (idx, vals)) in mel.iter().zip(&back) {
            assert_eq!(*idx as usize, m.frame_index);
            assert_eq!(vals[5], m.log_energies[5] as f32);
        }
    }
}
