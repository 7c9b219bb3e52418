//! Keyphrase gating: regex matching over final recognizer hypotheses, fused
//! with speaker verification of the matched span.

use std::collections::VecDeque;
use std::path::Path;
use std::sync::Arc;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::anc::{AncConfig, AncStream, FreezePolicy};
use crate::audio_io::AudioBuffer;
use crate::error::{Error, Result};
use crate::frontend::{check_sample_rate, Frontend, StackedFrame, Stacker, FRAME_LEN, SAMPLE_RATE_HZ};
use crate::recognizer::{Hypothesis, Recognizer};
use crate::separation::{Separator, SeparatorConfig};
use crate::speaker::{score, Embedder, EnrollmentProfile};

/// Samples between consecutive stacked frames.
const STACKED_HOP: usize = 480;
/// 10 s of 30 ms frames.
pub const MATCH_WINDOW_FRAMES: usize = 333;
/// 300 ms either side of a match.
pub const SV_PADDING_FRAMES: usize = 10;
/// Extra stacked frames of SV-path history kept beyond the match window.
const RETENTION_SLACK: usize = 200;

/// Lowercases, strips punctuation, collapses whitespace runs to one space
/// and trims.
pub fn normalize_text(s: &str) -> String {
    let kept: String = s
        .chars()
        .filter(|c| c.is_alphanumeric() || c.is_whitespace())
        .flat_map(char::to_lowercase)
        .collect();
    kept.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// One phrase-set entry as stored in a config file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhraseSpec {
    pub id: String,
    pub pattern: String,
    pub canonical_text: String,
}

#[derive(Debug, Clone)]
pub struct Keyphrase {
    pub id: String,
    pub pattern: Regex,
    pub canonical_text: String,
}

#[derive(Debug, Clone, Default)]
pub struct PhraseSet {
    phrases: Vec<Keyphrase>,
}

impl PhraseSet {
    pub fn new(specs: &[PhraseSpec]) -> Result<Self> {
        let mut phrases: Vec<Keyphrase> = Vec::with_capacity(specs.len());
        for spec in specs {
            if spec.id.is_empty() {
                return Err(Error::PhraseSet("empty keyphrase id".into()));
            }
            if phrases.iter().any(|p| p.id == spec.id) {
                return Err(Error::PhraseSet(format!("duplicate keyphrase id {:?}", spec.id)));
            }
            let pattern = Regex::new(&spec.pattern)
                .map_err(|e| Error::PhraseSet(format!("pattern for {:?}: {e}", spec.id)))?;
            phrases.push(Keyphrase {
                id: spec.id.clone(),
                pattern,
                canonical_text: spec.canonical_text.clone(),
            });
        }
        Ok(Self { phrases })
    }

    /// Whole-word pattern for each `(id, text)`.
    pub fn from_canonical(entries: &[(&str, &str)]) -> Result<Self> {
        let specs: Vec<PhraseSpec> = entries
            .iter()
            .map(|(id, text)| PhraseSpec {
                id: (*id).into(),
                pattern: canonical_pattern(text),
                canonical_text: normalize_text(text),
            })
            .collect();
        Self::new(&specs)
    }

    pub fn specs(&self) -> Vec<PhraseSpec> {
        self.phrases
            .iter()
            .map(|p| PhraseSpec {
                id: p.id.clone(),
                pattern: p.pattern.as_str().into(),
                canonical_text: p.canonical_text.clone(),
            })
            .collect()
    }

    pub fn get(&self, id: &str) -> Option<&Keyphrase> {
        self.phrases.iter().find(|p| p.id == id)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Keyphrase> {
        self.phrases.iter()
    }

    pub fn len(&self) -> usize {
        self.phrases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phrases.is_empty()
    }
}

/// `\bw1\s+w2...\b` for a normalized phrase.
pub fn canonical_pattern(text: &str) -> String {
    let words: Vec<String> = normalize_text(text).split(' ').map(regex::escape).collect();
    format!(r"\b{}\b", words.join(r"\s+"))
}

/// Reads a phrase set stored as a JSON array of `{id, pattern, canonical_text}`.
pub fn read_phrase_set(path: impl AsRef<Path>) -> Result<PhraseSet> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let specs: Vec<PhraseSpec> =
        serde_json::from_str(&text).map_err(|e| Error::PhraseSet(format!("{}: {e}", path.display())))?;
    PhraseSet::new(&specs)
}

pub fn write_phrase_set(phrases: &PhraseSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let json = serde_json::to_string_pretty(&phrases.specs()).expect("phrase specs serialize");
    std::fs::write(path, json + "\n").map_err(|source| Error::Unwritable {
        path: path.to_path_buf(),
        source,
    })
}

/// A keyphrase found in the hypothesis text, before speaker verification.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextMatch {
    pub keyphrase_id: String,
    pub start_frame: usize,
    pub end_frame: usize,
    pub matched_text: String,
}

#[derive(Debug, Clone)]
struct WindowEntry {
    text: String,
    start: usize,
    end: usize,
}

/// Rolling regex matcher over final hypotheses. Hypotheses older than the
/// window are dropped; a match consumes every hypothesis up to the last one
/// it touches.
#[derive(Debug, Clone)]
pub struct Matcher {
    phrases: PhraseSet,
    window_frames: usize,
    entries: VecDeque<WindowEntry>,
}

impl Matcher {
    pub fn new(phrases: PhraseSet, window_frames: usize) -> Self {
        Self {
            phrases,
            window_frames,
            entries: VecDeque::new(),
        }
    }

    pub fn phrases(&self) -> &PhraseSet {
        &self.phrases
    }

    pub fn reset(&mut self) {
        self.entries.clear();
    }

    pub fn push(&mut self, hyp: &Hypothesis) -> Vec<TextMatch> {
        if !hyp.is_final {
            return Vec::new();
        }
        let text = normalize_text(&hyp.text);
        if text.is_empty() {
            return Vec::new();
        }
        while self
            .entries
            .front()
            .is_some_and(|e| e.end + self.window_frames < hyp.end_frame)
        {
            self.entries.pop_front();
        }
        self.entries.push_back(WindowEntry {
            text,
            start: hyp.start_frame,
            end: hyp.end_frame,
        });
        let mut out = Vec::new();
        while let Some(m) = self.scan() {
            out.push(m);
        }
        out
    }

    /// Finds the leftmost match (longest on ties, then phrase order) and
    /// consumes the hypotheses through the last one it covers.
    fn scan(&mut self) -> Option<TextMatch> {
        let mut window = String::new();
        let mut ranges = Vec::with_capacity(self.entries.len());
        for e in &self.entries {
            if !window.is_empty() {
                window.push(' ');
            }
            ranges.push((window.len(), window.len() + e.text.len()));
            window.push_str(&e.text);
        }
        let mut best: Option<(usize, usize, &Keyphrase)> = None;
        for p in self.phrases.iter() {
            let Some(m) = p.pattern.find_iter(&window).find(|m| !m.is_empty()) else {
                continue;
            };
            let better = match best {
                None => true,
                Some((s, e, _)) => m.start() < s || (m.start() == s && m.end() > e),
            };
            if better {
                best = Some((m.start(), m.end(), p));
            }
        }
        let (ms, me, phrase) = best?;
        let covered: Vec<usize> = ranges
            .iter()
            .enumerate()
            .filter(|(_, (s, e))| *s < me && ms < *e)
            .map(|(i, _)| i)
            .collect();
        let first = *covered.first()?;
        let last = *covered.last()?;
        let m = TextMatch {
            keyphrase_id: phrase.id.clone(),
            start_frame: (first..=last).map(|i| self.entries[i].start).min()?,
            end_frame: (first..=last).map(|i| self.entries[i].end).max()?,
            matched_text: window[ms..me].to_owned(),
        };
        self.entries.drain(..=last);
        Some(m)
    }
}

/// Matches a complete hypothesis sequence with the default 10 s window.
pub fn match_stream(phrases: &PhraseSet, hyps: &[Hypothesis]) -> Vec<TextMatch> {
    let mut m = Matcher::new(phrases.clone(), MATCH_WINDOW_FRAMES);
    hyps.iter().flat_map(|h| m.push(h)).collect()
}

/// A keyphrase accepted by the gate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionEvent {
    pub keyphrase_id: String,
    pub start_frame: usize,
    pub end_frame: usize,
    /// Verification score of the padded span; `None` when verification is off.
    pub sv_score: Option<f64>,
    pub matched_text: String,
}

impl DetectionEvent {
    /// First audio sample covered by the start frame, in seconds.
    pub fn start_s(&self) -> f64 {
        (self.start_frame * STACKED_HOP).saturating_sub(STACKED_HOP) as f64 / f64::from(SAMPLE_RATE_HZ)
    }

    /// One past the last audio sample covered by the end frame, in seconds.
    pub fn end_s(&self) -> f64 {
        (self.end_frame * STACKED_HOP + FRAME_LEN) as f64 / f64::from(SAMPLE_RATE_HZ)
    }
}

/// Stacked-frame range `[lo, hi]` scored for a match, clipped to the
/// `available` frames of the stream.
pub fn sv_window(start: usize, end: usize, padding: usize, available: usize) -> (usize, usize) {
    let hi = (end + padding).min(available.saturating_sub(1));
    (start.saturating_sub(padding).min(hi), hi)
}

/// Which path consumes separated features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeparationRoute {
    None,
    /// Verification uses separated features; recognition does not.
    #[default]
    Sv,
    /// Recognition uses separated features; verification does not.
    Asr,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorConfig {
    pub anc: bool,
    pub anc_config: AncConfig,
    pub freeze_policy: FreezePolicy,
    pub sv: bool,
    pub separation_route: SeparationRoute,
    pub separator: SeparatorConfig,
    pub threshold: f64,
    pub sv_padding_frames: usize,
    pub match_window_frames: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            anc: false,
            anc_config: AncConfig::default(),
            freeze_policy: FreezePolicy::AfterDuration,
            sv: true,
            separation_route: SeparationRoute::Sv,
            separator: SeparatorConfig::default(),
            threshold: 0.5,
            sv_padding_frames: SV_PADDING_FRAMES,
            match_window_frames: MATCH_WINDOW_FRAMES,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        self.anc_config.validate()?;
        self.separator.validate()?;
        if !self.threshold.is_finite() || !(-1.0..=1.0).contains(&self.threshold) {
            return Err(Error::Config("threshold must lie in [-1, 1]".into()));
        }
        if self.match_window_frames == 0 {
            return Err(Error::Config("match_window_frames must be > 0".into()));
        }
        if self.separation_route == SeparationRoute::Sv && !self.sv {
            return Err(Error::Config("separation_route sv requires sv on".into()));
        }
        Ok(())
    }
}

/// Streaming detection pipeline for one stream: optional ANC, frontend,
/// separation on one path, recognition, matching and verification.
pub struct Detector {
    config: DetectorConfig,
    profile: EnrollmentProfile,
    embedder: Arc<dyn Embedder>,
    recognizer: Box<dyn Recognizer>,
    matcher: Matcher,
    anc: Option<AncStream>,
    num_channels: usize,
    frontend: Frontend,
    separator: Option<Separator>,
    separated_stacker: Stacker,
    /// SV-path frames; index 0 is stream frame `sv_offset`.
    sv_frames: VecDeque<StackedFrame>,
    sv_offset: usize,
    pending: VecDeque<TextMatch>,
}

impl Detector {
    /// Validates everything before any audio is seen. With ANC on, channel 0
    /// is the primary and the remaining `num_channels - 1` are references.
    pub fn new(
        config: DetectorConfig,
        profile: EnrollmentProfile,
        phrases: PhraseSet,
        recognizer: Box<dyn Recognizer>,
        embedder: Arc<dyn Embedder>,
        num_channels: usize,
    ) -> Result<Self> {
        config.validate()?;
        if num_channels == 0 {
            return Err(Error::InvalidBuffer("no channels".into()));
        }
        let anc = if config.anc {
            if num_channels < 2 {
                return Err(Error::ReferenceCount {
                    expected: 1,
                    actual: 0,
                });
            }
            Some(AncStream::new(config.anc_config, num_channels - 1, config.freeze_policy)?)
        } else {
            None
        };
        let separator = match config.separation_route {
            SeparationRoute::None => None,
            _ => {
                let signature = profile.signature.clone().ok_or_else(|| {
                    Error::Config(format!(
                        "profile {:?} has no spectral signature; separation needs one",
                        profile.speaker_id
                    ))
                })?;
                Some(Separator::new(config.separator, signature)?)
            }
        };
        Ok(Self {
            matcher: Matcher::new(phrases, config.match_window_frames),
            config,
            profile,
            embedder,
            recognizer,
            anc,
            num_channels,
            frontend: Frontend::default(),
            separator,
            separated_stacker: Stacker::new(),
            sv_frames: VecDeque::new(),
            sv_offset: 0,
            pending: VecDeque::new(),
        })
    }

    fn sv_available(&self) -> usize {
        self.sv_offset + self.sv_frames.len()
    }

    /// Feeds one chunk of every channel; returns the events decided so far.
    pub fn push(&mut self, channels: &[&[f64]]) -> Result<Vec<DetectionEvent>> {
        if channels.len() != self.num_channels {
            return Err(Error::InvalidBuffer(format!(
                "expected {} channels, got {}",
                self.num_channels,
                channels.len()
            )));
        }
        let mono = match &mut self.anc {
            Some(anc) => anc.push(channels)?,
            None => channels[0].to_vec(),
        };
        let out = self.frontend.push(&mono);
        let separated: Vec<StackedFrame> = match &mut self.separator {
            Some(sep) => out
                .mel
                .iter()
                .filter_map(|m| self.separated_stacker.push(&sep.process(m)))
                .collect(),
            None => Vec::new(),
        };
        let (asr, sv) = match self.config.separation_route {
            SeparationRoute::None => (&out.stacked, &out.stacked),
            SeparationRoute::Sv => (&out.stacked, &separated),
            SeparationRoute::Asr => (&separated, &out.stacked),
        };
        self.sv_frames.extend(sv.iter().cloned());
        for frame in asr {
            for hyp in self.recognizer.push(frame) {
                self.pending.extend(self.matcher.push(&hyp));
            }
        }
        let events = self.resolve(false)?;
        let keep = self.config.match_window_frames + 2 * self.config.sv_padding_frames + RETENTION_SLACK;
        while self.sv_frames.len() > keep {
            self.sv_frames.pop_front();
            self.sv_offset += 1;
        }
        Ok(events)
    }

    /// Flushes the recognizer and decides every outstanding match.
    pub fn finish(&mut self) -> Result<Vec<DetectionEvent>> {
        for hyp in self.recognizer.finish() {
            self.pending.extend(self.matcher.push(&hyp));
        }
        self.resolve(true)
    }

    /// Verifies pending matches whose right padding has arrived (or all of
    /// them at end of stream).
    fn resolve(&mut self, end_of_stream: bool) -> Result<Vec<DetectionEvent>> {
        let pad = self.config.sv_padding_frames;
        let mut events = Vec::new();
        while let Some(m) = self.pending.front() {
            if !end_of_stream && self.sv_available() <= m.end_frame + pad {
                break;
            }
            let m = self.pending.pop_front().expect("front exists");
            let sv_score = if self.config.sv {
                let (lo, hi) = sv_window(m.start_frame, m.end_frame, pad, self.sv_available());
                let lo = lo.max(self.sv_offset);
                if self.sv_frames.is_empty() || hi < lo {
                    continue;
                }
                let frames: Vec<StackedFrame> = self
                    .sv_frames
                    .range(lo - self.sv_offset..=hi - self.sv_offset)
                    .cloned()
                    .collect();
                let s = score(&self.profile, &self.embedder.embed(&frames)?);
                if s < self.config.threshold {
                    continue;
                }
                Some(s)
            } else {
                None
            };
            events.push(DetectionEvent {
                keyphrase_id: m.keyphrase_id,
                start_frame: m.start_frame,
                end_frame: m.end_frame,
                sv_score,
                matched_text: m.matched_text,
            });
        }
        Ok(events)
    }
}

/// Runs a fresh detector over a whole buffer.
pub fn detect(
    audio: &AudioBuffer,
    config: DetectorConfig,
    profile: EnrollmentProfile,
    phrases: PhraseSet,
    recognizer: Box<dyn Recognizer>,
    embedder: Arc<dyn Embedder>,
) -> Result<Vec<DetectionEvent>> {
    check_sample_rate(audio)?;
    let mut det = Detector::new(config, profile, phrases, recognizer, embedder, audio.num_channels())?;
    let channels: Vec<&[f64]> = audio.channels().iter().map(Vec::as_slice).collect();
    let mut events = det.push(&channels)?;
    events.extend(det.finish()?);
    Ok(events)
}
