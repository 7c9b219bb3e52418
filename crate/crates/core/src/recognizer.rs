//! Streaming recognizers over stacked frames: a transcript replayer for
//! driving the gate from known alignments, and a template matcher built on
//! subsequence DTW.

use std::collections::VecDeque;
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::audio_io::{read_json_lines, write_json_lines};
use crate::error::{Error, Result};
use crate::frontend::{StackedFrame, NUM_MEL, STACKED_DIM};
use crate::speaker::Cursor;

/// A time-stamped piece of recognized text; frames are 30 ms stacked-frame
/// indices counted from the last reset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    pub text: String,
    pub start_frame: usize,
    pub end_frame: usize,
    pub confidence: f64,
    pub is_final: bool,
}

/// A causal recognizer: `push` never returns a hypothesis ending after the
/// frame just consumed.
pub trait Recognizer: Send {
    fn push(&mut self, frame: &StackedFrame) -> Vec<Hypothesis>;

    /// Flushes hypotheses still waiting for look-ahead at the end of a stream.
    fn finish(&mut self) -> Vec<Hypothesis> {
        Vec::new()
    }

    fn reset(&mut self);
}

/// Runs a recognizer over a whole utterance.
pub fn recognize_all(rec: &mut dyn Recognizer, frames: &[StackedFrame]) -> Vec<Hypothesis> {
    let mut out: Vec<Hypothesis> = frames.iter().flat_map(|f| rec.push(f)).collect();
    out.extend(rec.finish());
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlignedWord {
    pub word: String,
    pub start: usize,
    pub end: usize,
}

pub fn read_alignment(path: impl AsRef<Path>) -> Result<Vec<AlignedWord>> {
    read_json_lines(path)
}

pub fn write_alignment(words: &[AlignedWord], path: impl AsRef<Path>) -> Result<()> {
    write_json_lines(words, path)
}

/// Emits each aligned word as a final hypothesis once the stream reaches its
/// end frame.
#[derive(Debug, Clone)]
pub struct ReplayRecognizer {
    alignment: Vec<AlignedWord>,
    next: usize,
    consumed: usize,
}

impl ReplayRecognizer {
    pub fn new(alignment: Vec<AlignedWord>) -> Result<Self> {
        for (i, w) in alignment.iter().enumerate() {
            let after_previous = i == 0 || {
                let p = &alignment[i - 1];
                w.start >= p.start && w.end >= p.end
            };
            if w.start > w.end || !after_previous {
                return Err(Error::NonMonotoneAlignment(i));
            }
        }
        Ok(Self {
            alignment,
            next: 0,
            consumed: 0,
        })
    }
}

impl Recognizer for ReplayRecognizer {
    fn push(&mut self, _frame: &StackedFrame) -> Vec<Hypothesis> {
        let current = self.consumed;
        self.consumed += 1;
        let mut out = Vec::new();
        while let Some(w) = self.alignment.get(self.next).filter(|w| w.end <= current) {
            out.push(Hypothesis {
                text: w.word.clone(),
                start_frame: w.start,
                end_frame: w.end,
                confidence: 1.0,
                is_final: true,
            });
            self.next += 1;
        }
        out
    }

    fn reset(&mut self) {
        self.next = 0;
        self.consumed = 0;
    }
}

/// `1 - cos(a, b)`; a zero vector is treated as orthogonal to everything.
pub fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 1.0;
    }
    (1.0 - dot / (na * nb)).clamp(0.0, 2.0)
}

/// Accumulated cost and path length of one DP cell.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Cell {
    cost: f64,
    len: usize,
}

impl Cell {
    const BLOCKED: Cell = Cell {
        cost: f64::INFINITY,
        len: 0,
    };
}

/// Best of the candidate predecessors: lowest accumulated cost, then
/// shortest path, then the earlier candidate.
fn best(cands: &[Cell]) -> Cell {
    let mut best = Cell::BLOCKED;
    for &c in cands {
        if c.cost < best.cost || (c.cost == best.cost && c.len < best.len) {
            best = c;
        }
    }
    best
}

/// Whether cell `(i, j)` lies within `band` of the diagonal joining the two
/// corners of an `n x m` grid.
fn in_band(i: usize, j: usize, n: usize, m: usize, band: usize) -> bool {
    let u = if n > 1 { i as f64 / (n - 1) as f64 } else { 0.0 };
    let v = if m > 1 { j as f64 / (m - 1) as f64 } else { 0.0 };
    (u - v).abs() * n.max(m) as f64 <= band as f64 + 1e-9
}

/// Path-length-normalized DTW distance with steps (1,0), (0,1), (1,1) and
/// cosine-distance cost, restricted to a band of `band` frames around the
/// corner-to-corner diagonal. Returns infinity if the band admits no path.
pub fn dtw_distance(a: &[Vec<f64>], b: &[Vec<f64>], band: usize) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptyInput("DTW needs two nonempty sequences"));
    }
    let (n, m) = (a.len(), b.len());
    let mut prev = vec![Cell::BLOCKED; m];
    let mut cur = vec![Cell::BLOCKED; m];
    for i in 0..n {
        for j in 0..m {
            if !in_band(i, j, n, m, band) {
                cur[j] = Cell::BLOCKED;
                continue;
            }
            let from = if i == 0 && j == 0 {
                Cell { cost: 0.0, len: 0 }
            } else {
                let up = if i > 0 { prev[j] } else { Cell::BLOCKED };
                let diag = if i > 0 && j > 0 { prev[j - 1] } else { Cell::BLOCKED };
                let left = if j > 0 { cur[j - 1] } else { Cell::BLOCKED };
                best(&[diag, up, left])
            };
            cur[j] = if from.cost.is_finite() {
                Cell {
                    cost: from.cost + cosine_distance(&a[i], &b[j]),
                    len: from.len + 1,
                }
            } else {
                Cell::BLOCKED
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    let end = prev[m - 1];
    Ok(if end.len == 0 {
        f64::INFINITY
    } else {
        end.cost / end.len as f64
    })
}

/// Speaker-robust frame features for template matching.
///
/// Each 128-bin block of a stacked frame is reduced to its first few cosine
/// (cepstral) coefficients, which keeps the spectral envelope and drops pitch
/// harmonics. Coefficients are then mean-normalized over a centered window of
/// frames, restricted to frames within `gate` nats of the window's loudest,
/// which removes static voice and channel colouring. The window makes the
/// output lag the input by `half_window` frames.
#[derive(Debug, Clone)]
pub struct EnvelopeFeatures {
    half_window: usize,
    gate: f64,
    basis: Vec<Vec<f64>>,
    /// Cepstra and levels of buffered frames; index 0 is frame `buffer_start`.
    buffer: VecDeque<(Vec<f64>, f64)>,
    buffer_start: usize,
    /// Next frame to emit.
    next: usize,
    pushed: usize,
}

impl EnvelopeFeatures {
    pub fn new(config: &DtwConfig) -> Self {
        let n = NUM_MEL;
        let first = usize::from(config.level_invariant);
        let basis = (first..config.cepstral_coeffs)
            .map(|q| {
                (0..n)
                    .map(|k| (std::f64::consts::PI * q as f64 * (k as f64 + 0.5) / n as f64).cos())
                    .collect()
            })
            .collect();
        Self {
            half_window: config.cmn_half_window,
            gate: config.cmn_gate,
            basis,
            buffer: VecDeque::new(),
            buffer_start: 0,
            next: 0,
            pushed: 0,
        }
    }

    pub fn reset(&mut self) {
        self.buffer.clear();
        self.buffer_start = 0;
        self.next = 0;
        self.pushed = 0;
    }

    fn cepstra(&self, features: &[f64]) -> Vec<f64> {
        features
            .chunks(NUM_MEL)
            .flat_map(|block| {
                self.basis
                    .iter()
                    .map(move |row| row.iter().zip(block).map(|(c, v)| c * v).sum::<f64>())
            })
            .collect()
    }

    fn emit(&mut self) -> Vec<f64> {
        let c = self.next;
        let lo = c.saturating_sub(self.half_window).max(self.buffer_start);
        let hi = (c + self.half_window).min(self.pushed - 1);
        let window: Vec<&(Vec<f64>, f64)> = (lo..=hi).map(|k| &self.buffer[k - self.buffer_start]).collect();
        let loudest = window.iter().map(|w| w.1).fold(f64::NEG_INFINITY, f64::max);
        let active: Vec<&Vec<f64>> = window
            .iter()
            .filter(|w| w.1 >= loudest - self.gate)
            .map(|w| &w.0)
            .collect();
        let dim = active[0].len();
        let mut mean = vec![0.0; dim];
        for v in &active {
            mean.iter_mut().zip(v.iter()).for_each(|(m, x)| *m += x);
        }
        mean.iter_mut().for_each(|m| *m /= active.len() as f64);
        let out = self.buffer[c - self.buffer_start]
            .0
            .iter()
            .zip(&mean)
            .map(|(x, m)| x - m)
            .collect();
        self.next += 1;
        while self.buffer_start + self.half_window < self.next {
            self.buffer.pop_front();
            self.buffer_start += 1;
        }
        out
    }

    /// Consumes one stacked frame; returns the feature of frame
    /// `pushed - 1 - half_window` once its window is complete.
    pub fn push(&mut self, features: &[f64]) -> Option<Vec<f64>> {
        let level = features.iter().sum::<f64>() / features.len() as f64;
        self.buffer.push_back((self.cepstra(features), level));
        self.pushed += 1;
        (self.pushed > self.next + self.half_window).then(|| self.emit())
    }

    /// Emits the frames still waiting for their right context.
    pub fn finish(&mut self) -> Vec<Vec<f64>> {
        let mut out = Vec::new();
        while self.next < self.pushed {
            out.push(self.emit());
        }
        out
    }

    /// Features of a complete sequence.
    pub fn transform(config: &DtwConfig, frames: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let mut f = Self::new(config);
        let mut out: Vec<Vec<f64>> = frames.iter().filter_map(|x| f.push(x)).collect();
        out.extend(f.finish());
        out
    }
}

/// Stacked-frame matrix of a reference utterance for one keyphrase.
#[derive(Debug, Clone, PartialEq)]
pub struct PhraseTemplate {
    pub keyphrase_id: String,
    pub text: String,
    pub frames: Vec<Vec<f64>>,
}

impl PhraseTemplate {
    pub fn new(keyphrase_id: impl Into<String>, text: impl Into<String>, frames: Vec<Vec<f64>>) -> Result<Self> {
        if frames.len() < 2 {
            return Err(Error::Config("a template needs at least 2 frames".into()));
        }
        if let Some(f) = frames.iter().find(|f| f.len() != STACKED_DIM) {
            return Err(Error::Config(format!(
                "template frames must have {STACKED_DIM} dims, got {}",
                f.len()
            )));
        }
        Ok(Self {
            keyphrase_id: keyphrase_id.into(),
            text: text.into(),
            frames,
        })
    }

    pub fn from_stacked(keyphrase_id: impl Into<String>, text: impl Into<String>, frames: &[StackedFrame]) -> Result<Self> {
        Self::new(keyphrase_id, text, frames.iter().map(|f| f.features.clone()).collect())
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

const TEMPLATE_MAGIC: &[u8; 4] = b"KPTM";
const TEMPLATE_VERSION: u32 = 1;

/// Template file layout (little-endian): `"KPTM" | version u32 | id_len u32 |
/// id | text_len u32 | text | T u32 | T x 512 f32`.
pub fn write_template(template: &PhraseTemplate, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let unwritable = |source| Error::Unwritable {
        path: path.to_path_buf(),
        source,
    };
    let mut buf = Vec::new();
    buf.extend_from_slice(TEMPLATE_MAGIC);
    buf.extend_from_slice(&TEMPLATE_VERSION.to_le_bytes());
    for s in [&template.keyphrase_id, &template.text] {
        buf.extend_from_slice(&(s.len() as u32).to_le_bytes());
        buf.extend_from_slice(s.as_bytes());
    }
    buf.extend_from_slice(&(template.frames.len() as u32).to_le_bytes());
    for v in template.frames.iter().flatten() {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    let mut out = BufWriter::new(File::create(path).map_err(unwritable)?);
    out.write_all(&buf).map_err(unwritable)?;
    out.flush().map_err(unwritable)
}

pub fn read_template(path: impl AsRef<Path>) -> Result<PhraseTemplate> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let io = |source| Error::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut bytes = Vec::new();
    File::open(path).map_err(io)?.read_to_end(&mut bytes).map_err(io)?;
    let malformed = |reason: &str| Error::MalformedBinary {
        path: path.to_path_buf(),
        reason: reason.into(),
    };
    let mut cur = Cursor { bytes: &bytes, pos: 0 };
    if cur.take(4) != Some(TEMPLATE_MAGIC.as_slice()) {
        return Err(malformed("bad magic"));
    }
    if cur.u32() != Some(TEMPLATE_VERSION) {
        return Err(malformed("unsupported version"));
    }
    let string = |cur: &mut Cursor| -> Result<String> {
        let len = cur.u32().ok_or_else(|| malformed("truncated"))? as usize;
        cur.take(len)
            .and_then(|b| std::str::from_utf8(b).ok())
            .map(str::to_owned)
            .ok_or_else(|| malformed("bad string"))
    };
    let id = string(&mut cur)?;
    let text = string(&mut cur)?;
    let t = cur.u32().ok_or_else(|| malformed("truncated"))? as usize;
    let data = cur.f32s(t * STACKED_DIM).ok_or_else(|| malformed("truncated frames"))?;
    if cur.pos != bytes.len() {
        return Err(malformed("trailing bytes"));
    }
    PhraseTemplate::new(id, text, data.chunks(STACKED_DIM).map(<[f64]>::to_vec).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DtwConfig {
    /// Match threshold on the normalized distance.
    pub distance_threshold: f64,
    /// Sakoe-Chiba band as a fraction of template length.
    pub band_ratio: f64,
    /// A match must be the lowest distance within this many frames either side.
    pub local_min_horizon: usize,
    /// Cepstral coefficients kept per 128-bin block.
    pub cepstral_coeffs: usize,
    /// Drop coefficient 0 (the frame level) from every block.
    pub level_invariant: bool,
    /// Half-width, in stacked frames, of the mean-normalization window.
    pub cmn_half_window: usize,
    /// Frames more than this many nats below the loudest in the window are
    /// left out of the mean.
    pub cmn_gate: f64,
}

impl Default for DtwConfig {
    fn default() -> Self {
        Self {
            distance_threshold: 0.3,
            band_ratio: 0.2,
            local_min_horizon: 10,
            cepstral_coeffs: 13,
            level_invariant: true,
            cmn_half_window: 10,
            cmn_gate: 3.0,
        }
    }
}

impl DtwConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.distance_threshold > 0.0 && self.distance_threshold.is_finite()) {
            return Err(Error::Config("distance_threshold must be > 0".into()));
        }
        if !(self.band_ratio > 0.0 && self.band_ratio <= 1.0) {
            return Err(Error::Config("band_ratio must lie in (0, 1]".into()));
        }
        if !(1 + usize::from(self.level_invariant)..=NUM_MEL).contains(&self.cepstral_coeffs) {
            return Err(Error::Config(format!("cepstral_coeffs must lie in 1..={NUM_MEL}")));
        }
        if !(self.cmn_gate > 0.0) {
            return Err(Error::Config("cmn_gate must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct StreamCell {
    cost: f64,
    len: usize,
    start: usize,
}

impl StreamCell {
    const BLOCKED: StreamCell = StreamCell {
        cost: f64::INFINITY,
        len: 0,
        start: 0,
    };
}

/// Result of the subsequence DP at one stream frame.
#[derive(Debug, Clone, Copy, PartialEq)]
struct EndPoint {
    distance: f64,
    start: usize,
}

/// Subsequence-DTW state of one template against the stream.
#[derive(Debug, Clone)]
struct TemplateTrack {
    frames: Vec<Vec<f64>>,
    band: usize,
    column: Vec<StreamCell>,
    /// Recent end points, oldest first; index 0 is stream frame `history_start`.
    history: VecDeque<EndPoint>,
    history_start: usize,
}

impl TemplateTrack {
    fn new(template: &PhraseTemplate, config: &DtwConfig) -> Self {
        let frames = EnvelopeFeatures::transform(config, &template.frames);
        let band = (config.band_ratio * frames.len() as f64).ceil() as usize;
        Self {
            column: vec![StreamCell::BLOCKED; frames.len()],
            frames,
            band,
            history: VecDeque::new(),
            history_start: 0,
        }
    }

    fn reset(&mut self) {
        self.column.iter_mut().for_each(|c| *c = StreamCell::BLOCKED);
        self.history.clear();
        self.history_start = 0;
    }

    /// Advances the DP by stream frame `i` and records its end point.
    fn step(&mut self, i: usize, x: &[f64]) {
        let t = self.frames.len();
        let allowed = |j: usize, start: usize| (j as isize - (i - start) as isize).unsigned_abs() <= self.band;
        let prev = std::mem::replace(&mut self.column, vec![StreamCell::BLOCKED; t]);
        for j in 0..t {
            let from = if j == 0 {
                StreamCell { cost: 0.0, len: 0, start: i }
            } else {
                let mut best = StreamCell::BLOCKED;
                for c in [prev[j - 1], prev[j], self.column[j - 1]] {
                    if !c.cost.is_finite() || !allowed(j, c.start) {
                        continue;
                    }
                    if c.cost < best.cost || (c.cost == best.cost && c.len < best.len) {
                        best = c;
                    }
                }
                best
            };
            if from.cost.is_finite() {
                self.column[j] = StreamCell {
                    cost: from.cost + cosine_distance(x, &self.frames[j]),
                    len: from.len + 1,
                    start: from.start,
                };
            }
        }
        let end = self.column[t - 1];
        self.history.push_back(EndPoint {
            distance: if end.len == 0 { f64::INFINITY } else { end.cost / end.len as f64 },
            start: end.start,
        });
    }

    /// Decides whether frame `c` (whose look-ahead is complete or cut by the
    /// end of the stream) is a local minimum below `threshold`.
    fn decide(&self, c: usize, horizon: usize, threshold: f64) -> Option<EndPoint> {
        let at = |k: usize| self.history[k - self.history_start];
        let p = at(c);
        if !(p.distance < threshold) {
            return None;
        }
        let lo = c.saturating_sub(horizon).max(self.history_start);
        let hi = (c + horizon).min(self.history_start + self.history.len() - 1);
        // Ties go to the earliest frame.
        let earlier_ok = (lo..c).all(|k| at(k).distance > p.distance);
        let later_ok = (c + 1..=hi).all(|k| at(k).distance >= p.distance);
        (earlier_ok && later_ok).then_some(p)
    }

    fn trim(&mut self, keep_from: usize) {
        while self.history_start < keep_from && !self.history.is_empty() {
            self.history.pop_front();
            self.history_start += 1;
        }
    }
}

/// Keyphrase spotting by subsequence DTW of every template against the
/// incoming stream. A hypothesis for frame `e` is emitted once `e + horizon`
/// frames have been consumed.
#[derive(Debug, Clone)]
pub struct DtwRecognizer {
    config: DtwConfig,
    texts: Vec<String>,
    features: EnvelopeFeatures,
    tracks: Vec<TemplateTrack>,
    /// Feature frames fed to the tracks so far.
    stepped: usize,
    /// Next end frame awaiting a decision.
    pending: usize,
    /// Hypotheses may not start at or before this frame (already claimed).
    claimed_until: Option<usize>,
}

impl DtwRecognizer {
    pub fn new(templates: &[PhraseTemplate], config: DtwConfig) -> Result<Self> {
        config.validate()?;
        if templates.is_empty() {
            return Err(Error::Config("DTW recognizer needs at least one template".into()));
        }
        Ok(Self {
            config,
            texts: templates.iter().map(|t| t.text.clone()).collect(),
            features: EnvelopeFeatures::new(&config),
            tracks: templates.iter().map(|t| TemplateTrack::new(t, &config)).collect(),
            stepped: 0,
            pending: 0,
            claimed_until: None,
        })
    }

    pub fn config(&self) -> DtwConfig {
        self.config
    }

    /// Decides every pending end frame up to and including `last`.
    fn decide_through(&mut self, last: usize) -> Vec<Hypothesis> {
        let mut out = Vec::new();
        let (h, delta) = (self.config.local_min_horizon, self.config.distance_threshold);
        while self.pending <= last && self.pending < self.stepped {
            let c = self.pending;
            let winner = self
                .tracks
                .iter()
                .enumerate()
                .filter_map(|(k, tr)| tr.decide(c, h, delta).map(|p| (k, p)))
                .filter(|(_, p)| self.claimed_until.map_or(true, |u| p.start > u))
                .min_by(|a, b| a.1.distance.total_cmp(&b.1.distance).then(a.0.cmp(&b.0)));
            if let Some((k, p)) = winner {
                out.push(Hypothesis {
                    text: self.texts[k].clone(),
                    start_frame: p.start,
                    end_frame: c,
                    confidence: (1.0 - p.distance / delta).clamp(0.0, 1.0),
                    is_final: true,
                });
                self.claimed_until = Some(c);
            }
            self.pending += 1;
        }
        let keep = self.pending.saturating_sub(h);
        self.tracks.iter_mut().for_each(|t| t.trim(keep));
        out
    }

    fn step(&mut self, x: &[f64]) {
        let i = self.stepped;
        self.tracks.iter_mut().for_each(|t| t.step(i, x));
        self.stepped += 1;
    }
}

impl Recognizer for DtwRecognizer {
    fn push(&mut self, frame: &StackedFrame) -> Vec<Hypothesis> {
        let Some(x) = self.features.push(&frame.features) else {
            return Vec::new();
        };
        self.step(&x);
        match (self.stepped - 1).checked_sub(self.config.local_min_horizon) {
            Some(last) => self.decide_through(last),
            None => Vec::new(),
        }
    }

    fn finish(&mut self) -> Vec<Hypothesis> {
        for x in self.features.finish() {
            self.step(&x);
        }
        match self.stepped.checked_sub(1) {
            Some(last) => self.decide_through(last),
            None => Vec::new(),
        }
    }

    fn reset(&mut self) {
        self.features.reset();
        self.tracks.iter_mut().for_each(TemplateTrack::reset);
        self.stepped = 0;
        self.pending = 0;
        self.claimed_until = None;
    }
}
