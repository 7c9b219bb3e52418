//! Seeded synthetic evaluation corpus: enrolled speakers with keyphrase
//! utterances, a development set for threshold selection, recognizer
//! templates, and long imposter streams for false-accept measurement.
//!
//! Everything is a recipe; audio is rendered on demand so that hours of
//! negatives never need to sit in memory at once.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio_io::AudioBuffer;
use crate::augment::{parse_phrase, phrase_text, synth_speaker_utterance, word_samples, LEXICON, MAX_WORDS};
use crate::error::{Error, Result};
use crate::frontend::{run_frontend, FRAME_LEN, SAMPLE_RATE_HZ};
use crate::gate::PhraseSet;
use crate::recognizer::{AlignedWord, PhraseTemplate};

/// Default keyphrases as `(id, canonical text)`.
pub const DEFAULT_PHRASES: [(&str, &str); 6] = [
    ("lights_off", "turn off the lights"),
    ("set_timer", "set a timer"),
    ("play_music", "play music"),
    ("call_mom", "call mom"),
    ("open_door", "open the door"),
    ("water_plants", "water my plants"),
];

const EVAL_SEED_BASE: u64 = 1000;
const DEV_SEED_BASE: u64 = 2000;
const TEMPLATE_SEED_BASE: u64 = 3000;
const IMPOSTER_SEED_BASE: u64 = 4000;
/// Speaker seeds of interfering talkers start here.
pub const INTERFERER_SEED_BASE: u64 = 5000;
pub const NUM_INTERFERERS: u64 = 100;
const STACKED_HOP: usize = 480;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    pub seed: u64,
    pub eval_speakers: usize,
    pub positives_per_speaker: usize,
    pub enroll_per_speaker: usize,
    pub dev_speakers: usize,
    pub dev_positives_per_speaker: usize,
    pub template_speakers: usize,
    pub imposter_speakers: usize,
    /// Total duration of the imposter streams, split evenly over the
    /// evaluation speakers they claim to be.
    pub negative_hours: f64,
    /// Fraction of imposter utterances that contain a keyphrase.
    pub imposter_keyphrase_rate: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            eval_speakers: 32,
            positives_per_speaker: 20,
            enroll_per_speaker: 4,
            dev_speakers: 8,
            dev_positives_per_speaker: 8,
            template_speakers: 4,
            imposter_speakers: 16,
            negative_hours: 2.0,
            imposter_keyphrase_rate: 0.35,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.eval_speakers < 2 || self.dev_speakers < 2 {
            return Err(Error::Config("need at least 2 evaluation and 2 dev speakers".into()));
        }
        if self.enroll_per_speaker == 0 || self.template_speakers == 0 || self.imposter_speakers == 0 {
            return Err(Error::Config(
                "enrollment, template and imposter counts must be > 0".into(),
            ));
        }
        if !(self.negative_hours >= 0.0 && self.negative_hours.is_finite()) {
            return Err(Error::Config("negative_hours must be finite and >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.imposter_keyphrase_rate) {
            return Err(Error::Config("imposter_keyphrase_rate must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// One synthetic utterance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtteranceSpec {
    pub id: String,
    pub speaker_id: String,
    pub speaker_seed: u64,
    pub words: Vec<usize>,
    pub jitter: f64,
    pub keyphrase_id: Option<String>,
}

impl UtteranceSpec {
    pub fn render(&self) -> Result<AudioBuffer> {
        synth_speaker_utterance(self.speaker_seed, &self.words, self.jitter)
    }

    pub fn transcript(&self) -> String {
        phrase_text(&self.words)
    }

    pub fn num_samples(&self) -> usize {
        word_samples(self.jitter) * self.words.len()
    }

    /// Word alignment in stacked frames when the utterance starts at sample
    /// `offset` of a stream.
    pub fn alignment(&self, offset: usize) -> Vec<AlignedWord> {
        let n = word_samples(self.jitter);
        self.words
            .iter()
            .enumerate()
            .map(|(i, &w)| AlignedWord {
                word: LEXICON[w].to_owned(),
                start: first_frame_covering(offset + i * n),
                end: last_frame_ending_by(offset + (i + 1) * n),
            })
            .collect()
    }
}

/// Lowest stacked frame whose span reaches sample `s`.
fn first_frame_covering(s: usize) -> usize {
    // Frame k spans [480k - 480, 480k + 512).
    (s + 1).saturating_sub(FRAME_LEN).div_ceil(STACKED_HOP)
}

/// Lowest stacked frame whose span covers everything before sample `s`.
fn last_frame_ending_by(s: usize) -> usize {
    s.saturating_sub(FRAME_LEN).div_ceil(STACKED_HOP)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeakerSet {
    pub speaker_id: String,
    pub speaker_seed: u64,
    pub enroll: Vec<UtteranceSpec>,
    pub positives: Vec<UtteranceSpec>,
}

/// Imposter utterances separated by pauses, all claiming to be one enrolled
/// speaker.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NegativeStream {
    pub id: String,
    pub claimed_speaker: String,
    /// Each utterance with the silence that precedes it, in samples.
    pub segments: Vec<(usize, UtteranceSpec)>,
    /// Trailing silence in samples.
    pub tail: usize,
}

impl NegativeStream {
    pub fn num_samples(&self) -> usize {
        self.segments.iter().map(|(p, u)| p + u.num_samples()).sum::<usize>() + self.tail
    }

    pub fn duration_s(&self) -> f64 {
        self.num_samples() as f64 / f64::from(SAMPLE_RATE_HZ)
    }

    pub fn render(&self) -> Result<AudioBuffer> {
        let mut out = Vec::with_capacity(self.num_samples());
        for (pause, utt) in &self.segments {
            out.resize(out.len() + pause, 0.0);
            out.extend_from_slice(utt.render()?.channel(0).expect("mono"));
        }
        out.resize(out.len() + self.tail, 0.0);
        AudioBuffer::mono(out, SAMPLE_RATE_HZ)
    }

    pub fn alignment(&self) -> Vec<AlignedWord> {
        let mut pos = 0;
        let mut out = Vec::new();
        for (pause, utt) in &self.segments {
            pos += pause;
            out.extend(utt.alignment(pos));
            pos += utt.num_samples();
        }
        out
    }

    /// Keyphrase utterances the imposters speak.
    pub fn num_keyphrases(&self) -> usize {
        self.segments.iter().filter(|(_, u)| u.keyphrase_id.is_some()).count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub config: CorpusConfig,
    pub phrases: Vec<(String, String)>,
    pub eval: Vec<SpeakerSet>,
    pub dev: Vec<SpeakerSet>,
    pub templates: Vec<UtteranceSpec>,
    pub negatives: Vec<NegativeStream>,
}

struct Generator {
    rng: ChaCha8Rng,
    phrases: Vec<(String, Vec<usize>)>,
    /// Words that occur in no keyphrase.
    fillers: Vec<usize>,
}

impl Generator {
    fn jitter(&mut self) -> f64 {
        self.rng.gen_range(0.85..1.15)
    }

    fn fillers(&mut self, n: usize) -> Vec<usize> {
        (0..n).map(|_| *self.fillers.choose(&mut self.rng).expect("fillers")).collect()
    }

    /// Filler-only utterance of 3 to 6 words.
    fn filler_utterance(&mut self, id: String, speaker: &str, seed: u64) -> UtteranceSpec {
        let n = self.rng.gen_range(3..=6);
        UtteranceSpec {
            id,
            speaker_id: speaker.into(),
            speaker_seed: seed,
            words: self.fillers(n),
            jitter: self.jitter(),
            keyphrase_id: None,
        }
    }

    /// Keyphrase `k`, optionally with one filler word either side.
    fn keyphrase_utterance(&mut self, id: String, speaker: &str, seed: u64, k: usize) -> UtteranceSpec {
        let (kid, words) = self.phrases[k].clone();
        let mut all = Vec::new();
        if self.rng.gen_bool(0.5) {
            all.extend(self.fillers(1));
        }
        all.extend(words);
        if self.rng.gen_bool(0.5) && all.len() < MAX_WORDS {
            all.extend(self.fillers(1));
        }
        UtteranceSpec {
            id,
            speaker_id: speaker.into(),
            speaker_seed: seed,
            words: all,
            jitter: self.jitter(),
            keyphrase_id: Some(kid),
        }
    }

    fn speaker_set(&mut self, name: String, seed: u64, enroll: usize, positives: usize) -> SpeakerSet {
        let k0 = self.rng.gen_range(0..self.phrases.len());
        SpeakerSet {
            enroll: (0..enroll)
                .map(|u| self.filler_utterance(format!("{name}-enroll-{u}"), &name, seed))
                .collect(),
            positives: (0..positives)
                .map(|u| {
                    let k = (k0 + u) % self.phrases.len();
                    self.keyphrase_utterance(format!("{name}-pos-{u}"), &name, seed, k)
                })
                .collect(),
            speaker_id: name,
            speaker_seed: seed,
        }
    }
}

impl Corpus {
    pub fn generate(config: CorpusConfig) -> Result<Self> {
        Self::with_phrases(config, &DEFAULT_PHRASES)
    }

    pub fn with_phrases(config: CorpusConfig, phrases: &[(&str, &str)]) -> Result<Self> {
        config.validate()?;
        if phrases.is_empty() {
            return Err(Error::PhraseSet("corpus needs at least one keyphrase".into()));
        }
        let parsed: Vec<(String, Vec<usize>)> = phrases
            .iter()
            .map(|(id, text)| Ok(((*id).to_owned(), parse_phrase(text)?)))
            .collect::<Result<_>>()?;
        let fillers: Vec<usize> = (0..LEXICON.len())
            .filter(|w| !parsed.iter().any(|(_, p)| p.contains(w)))
            .collect();
        if fillers.is_empty() {
            return Err(Error::PhraseSet("keyphrases use the whole lexicon".into()));
        }
        let mut g = Generator {
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            phrases: parsed,
            fillers,
        };

        let eval: Vec<SpeakerSet> = (0..config.eval_speakers)
            .map(|s| {
                g.speaker_set(
                    format!("spk{s:02}"),
                    EVAL_SEED_BASE + s as u64,
                    config.enroll_per_speaker,
                    config.positives_per_speaker,
                )
            })
            .collect();
        let dev: Vec<SpeakerSet> = (0..config.dev_speakers)
            .map(|s| {
                g.speaker_set(
                    format!("dev{s:02}"),
                    DEV_SEED_BASE + s as u64,
                    config.enroll_per_speaker,
                    config.dev_positives_per_speaker,
                )
            })
            .collect();
        let templates: Vec<UtteranceSpec> = (0..config.template_speakers)
            .flat_map(|t| (0..g.phrases.len()).map(move |k| (t, k)))
            .map(|(t, k)| UtteranceSpec {
                id: format!("tpl{t}-{}", g.phrases[k].0),
                speaker_id: format!("tpl{t}"),
                speaker_seed: TEMPLATE_SEED_BASE + t as u64,
                words: g.phrases[k].1.clone(),
                jitter: 1.0,
                keyphrase_id: Some(g.phrases[k].0.clone()),
            })
            .collect();

        let per_speaker = config.negative_hours * 3600.0 / config.eval_speakers as f64;
        let target_samples = (per_speaker * f64::from(SAMPLE_RATE_HZ)) as usize;
        let mut negatives = Vec::with_capacity(eval.len());
        for (s, claimed) in eval.iter().enumerate() {
            let id = format!("neg{s:02}");
            let mut segments = Vec::new();
            let mut len = 0;
            let mut u = 0;
            loop {
                let pause = g.rng.gen_range(4800..16000);
                let imp = g.rng.gen_range(0..config.imposter_speakers) as u64;
                let (name, seed) = (format!("imp{imp:02}"), IMPOSTER_SEED_BASE + imp);
                let uid = format!("{id}-{u}");
                let utt = if g.rng.gen_bool(config.imposter_keyphrase_rate) {
                    let k = g.rng.gen_range(0..g.phrases.len());
                    g.keyphrase_utterance(uid, &name, seed, k)
                } else {
                    g.filler_utterance(uid, &name, seed)
                };
                if len + pause + utt.num_samples() > target_samples {
                    break;
                }
                len += pause + utt.num_samples();
                segments.push((pause, utt));
                u += 1;
            }
            negatives.push(NegativeStream {
                id,
                claimed_speaker: claimed.speaker_id.clone(),
                segments,
                tail: target_samples - len,
            });
        }

        Ok(Self {
            config,
            phrases: phrases.iter().map(|(a, b)| ((*a).into(), (*b).into())).collect(),
            eval,
            dev,
            templates,
            negatives,
        })
    }

    pub fn phrase_set(&self) -> Result<PhraseSet> {
        let entries: Vec<(&str, &str)> = self.phrases.iter().map(|(a, b)| (a.as_str(), b.as_str())).collect();
        PhraseSet::from_canonical(&entries)
    }

    /// Canonical text of a keyphrase id.
    pub fn phrase_text(&self, id: &str) -> Option<&str> {
        self.phrases.iter().find(|(k, _)| k == id).map(|(_, t)| t.as_str())
    }

    pub fn build_templates(&self) -> Result<Vec<PhraseTemplate>> {
        self.templates
            .iter()
            .map(|t| {
                let kid = t.keyphrase_id.clone().expect("templates carry their keyphrase");
                let (_, stacked) = run_frontend(&t.render()?, 0)?;
                PhraseTemplate::from_stacked(kid, t.transcript(), &stacked)
            })
            .collect()
    }

    pub fn negative_hours(&self) -> f64 {
        self.negatives.iter().map(NegativeStream::duration_s).sum::<f64>() / 3600.0
    }
}
