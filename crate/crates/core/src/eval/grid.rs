//! The evaluation grid: per-utterance pipeline runs under each noise
//! condition and run configuration, aggregated into report tables.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{compute_eer, compute_frr, fa_per_hour, ScoredTrial};
use crate::audio_io::{AudioBuffer, NoiseSource, Room};
use crate::augment::{build_scene, nonspeech_noise, speech_noise, MtrSpec};
use crate::corpus::{Corpus, UtteranceSpec, INTERFERER_SEED_BASE, NUM_INTERFERERS};
use crate::error::{Error, Result};
use crate::frontend::{run_frontend, stack_subsample, SAMPLE_RATE_HZ};
use crate::gate::{detect, DetectionEvent, DetectorConfig, PhraseSet, SeparationRoute};
use crate::recognizer::{AlignedWord, DtwConfig, DtwRecognizer, PhraseTemplate, Recognizer, ReplayRecognizer};
use crate::separation::Separator;
use crate::speaker::{enroll_audio, score, Embedder, EnrollmentProfile, ReferenceEmbedder};

/// Noise-only (or silent) lead-in before every evaluated utterance.
pub const PREFIX_S: f64 = 3.0;
/// Reference microphones in every simulated scene.
pub const NUM_REFS: usize = 2;
pub const REVERB_RT60_S: f64 = 0.4;
/// Non-target profiles scored against each verification trial.
pub const NONTARGETS_PER_TRIAL: usize = 7;
/// Stacked frames skipped after the speech start in verification trials.
const TRIAL_SKIP_FRAMES: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecognizerChoice {
    #[default]
    Dtw,
    /// Oracle hypotheses from the corpus word alignment.
    Replay,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub name: String,
    pub anc: bool,
    pub sv: bool,
    pub separation_route: SeparationRoute,
    /// `None` picks the dev-set EER threshold for this configuration.
    pub threshold: Option<f64>,
    pub recognizer: RecognizerChoice,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            name: "default".into(),
            anc: false,
            sv: true,
            separation_route: SeparationRoute::Sv,
            threshold: None,
            recognizer: RecognizerChoice::Dtw,
        }
    }
}

impl RunConfig {
    pub fn new(name: &str, anc: bool, sv: bool, separation_route: SeparationRoute) -> Self {
        Self {
            name: name.into(),
            anc,
            sv,
            separation_route,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() {
            return Err(Error::Config("run config needs a name".into()));
        }
        if self.separation_route == SeparationRoute::Sv && !self.sv {
            return Err(Error::Config(format!(
                "{}: separation_route sv requires sv on",
                self.name
            )));
        }
        if let Some(t) = self.threshold {
            if !(-1.0..=1.0).contains(&t) {
                return Err(Error::Config(format!("{}: threshold {t} outside [-1, 1]", self.name)));
            }
        }
        Ok(())
    }

    /// Ablation columns: no verification, verification without separation,
    /// separation on either path, and the full system with ANC.
    pub fn standard() -> Vec<Self> {
        vec![
            Self::new("no_sv", false, false, SeparationRoute::None),
            Self::new("sv", false, true, SeparationRoute::None),
            Self::new("sep_asr", false, true, SeparationRoute::Asr),
            Self::new("sep_sv", false, true, SeparationRoute::Sv),
            Self::new("sep_sv_anc", true, true, SeparationRoute::Sv),
        ]
    }
}

/// One evaluation condition; `noise_source: None` is clean audio.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Condition {
    pub noise_source: Option<NoiseSource>,
    pub room: Room,
    pub snr_db: Option<f64>,
}

impl Condition {
    pub const CLEAN: Self = Self {
        noise_source: None,
        room: Room::Additive,
        snr_db: None,
    };

    pub fn noisy(noise_source: NoiseSource, room: Room, snr_db: f64) -> Self {
        Self {
            noise_source: Some(noise_source),
            room,
            snr_db: Some(snr_db),
        }
    }

    /// Clean first, then {speech, nonspeech} x {additive, reverb} x {-5, 0, 5} dB.
    pub fn mtr_grid() -> Vec<Self> {
        let mut out = vec![Self::CLEAN];
        for source in [NoiseSource::Speech, NoiseSource::Nonspeech] {
            for room in [Room::Additive, Room::Reverb] {
                for snr in [-5.0, 0.0, 5.0] {
                    out.push(Self::noisy(source, room, snr));
                }
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        match (self.noise_source, self.snr_db) {
            (None, None) => Ok(()),
            (Some(_), Some(s)) if s.is_finite() => Ok(()),
            _ => Err(Error::Config(
                "a condition needs both noise_source and a finite snr_db, or neither".into(),
            )),
        }
    }

    pub fn label(&self) -> String {
        match (self.noise_source, self.snr_db) {
            (Some(src), Some(snr)) => format!("{}/{}/{snr}dB", source_name(Some(src)), room_name(self.room)),
            _ => "clean".into(),
        }
    }

    /// Directory-safe name, e.g. `speech_reverb_-5dB`.
    pub fn dir_name(&self) -> String {
        self.label().replace('/', "_")
    }

    /// Stable key mixed into noise seeds.
    fn seed_key(&self) -> u64 {
        fnv1a(self.label().as_bytes())
    }
}

fn source_name(s: Option<NoiseSource>) -> &'static str {
    match s {
        None => "clean",
        Some(NoiseSource::Speech) => "speech",
        Some(NoiseSource::Nonspeech) => "nonspeech",
    }
}

fn room_name(r: Room) -> &'static str {
    match r {
        Room::Additive => "additive",
        Room::Reverb => "reverb",
    }
}

/// 64-bit FNV-1a; stable across platforms and toolchains, unlike the std hasher.
fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

fn mix(a: u64, b: u64) -> u64 {
    // splitmix64 finalizer over the combined words.
    let mut z = a ^ b.rotate_left(29) ^ 0x9e37_79b9_7f4a_7c15;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Noise seed for one utterance under one condition.
pub fn condition_seed(base: u64, utterance_id: &str, cond: &Condition) -> u64 {
    mix(mix(base, fnv1a(utterance_id.as_bytes())), cond.seed_key())
}

fn prefix_samples() -> usize {
    (PREFIX_S * f64::from(SAMPLE_RATE_HZ)).round() as usize
}

/// Microphone signals for one utterance under `cond`: `[primary, refs..]`
/// when `multichannel`, else the primary alone. Clean audio gets a silent
/// prefix and silent references.
pub fn condition_audio(speech: &AudioBuffer, cond: &Condition, seed: u64, multichannel: bool) -> Result<AudioBuffer> {
    cond.validate()?;
    let (Some(source), Some(snr_db)) = (cond.noise_source, cond.snr_db) else {
        let mut primary = vec![0.0; prefix_samples()];
        primary.extend_from_slice(speech.channel(0).expect("at least one channel"));
        let mut channels = vec![primary];
        if multichannel {
            channels.extend(vec![vec![0.0; channels[0].len()]; NUM_REFS]);
        }
        return AudioBuffer::new(channels, SAMPLE_RATE_HZ);
    };
    let total = prefix_samples() + speech.len();
    let noise = match source {
        NoiseSource::Speech => speech_noise(INTERFERER_SEED_BASE + seed % NUM_INTERFERERS, seed, total),
        NoiseSource::Nonspeech => nonspeech_noise(seed, total),
    };
    let spec = MtrSpec {
        noise_source: source,
        snr_db,
        room: cond.room,
        prefix_noise_s: PREFIX_S,
        rt60_s: REVERB_RT60_S,
        seed,
    };
    let scene = build_scene(speech, &AudioBuffer::mono(noise, SAMPLE_RATE_HZ)?, &spec, NUM_REFS)?;
    if multichannel {
        Ok(scene.to_audio())
    } else {
        AudioBuffer::mono(scene.primary, SAMPLE_RATE_HZ)
    }
}

/// Which grid parts to compute.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridSpec {
    /// Conditions for FRR on the positive set.
    pub conditions: Vec<Condition>,
    /// FA/h on the (clean) negative streams.
    pub negatives: bool,
    /// Conditions for the verification EER with and without separation.
    pub eer_conditions: Vec<Condition>,
    /// Positives per speaker used as verification trials.
    pub eer_utterances_per_speaker: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        let grid = Condition::mtr_grid();
        Self {
            conditions: grid.clone(),
            negatives: true,
            eer_conditions: grid,
            eer_utterances_per_speaker: 8,
        }
    }
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        self.conditions.iter().chain(&self.eer_conditions).try_for_each(Condition::validate)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    EerPercent,
    FrrPercent,
    FaPerHour,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportCell {
    pub config: String,
    pub metric: Metric,
    pub noise_source: String,
    pub room: String,
    pub snr_db: Option<f64>,
    pub value: f64,
    /// Positives missed, events fired, or trials scored, by metric.
    pub count: usize,
    /// Positives, hours of audio, or trials, by metric.
    pub total: f64,
}

impl ReportCell {
    fn new(config: &str, metric: Metric, cond: &Condition, value: f64, count: usize, total: f64) -> Self {
        Self {
            config: config.into(),
            metric,
            noise_source: source_name(cond.noise_source).into(),
            room: room_name(cond.room).into(),
            snr_db: cond.snr_db,
            value,
            count,
            total,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub corpus_seed: u64,
    /// Verification threshold per configuration (`None` with SV off).
    pub thresholds: BTreeMap<String, Option<f64>>,
    pub cells: Vec<ReportCell>,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self)
            .map(|s| s + "\n")
            .map_err(|e| Error::Config(format!("report serialization: {e}")))
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["config", "metric", "noise_source", "room", "snr_db", "value", "count", "total"])
            .map_err(csv_error)?;
        for c in &self.cells {
            let metric = match c.metric {
                Metric::EerPercent => "eer_percent",
                Metric::FrrPercent => "frr_percent",
                Metric::FaPerHour => "fa_per_hour",
            };
            w.write_record([
                c.config.clone(),
                metric.into(),
                c.noise_source.clone(),
                c.room.clone(),
                c.snr_db.map(|s| s.to_string()).unwrap_or_default(),
                format!("{:.6}", c.value),
                c.count.to_string(),
                format!("{:.6}", c.total),
            ])
            .map_err(csv_error)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Config(format!("csv: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv of UTF-8 fields"))
    }

    /// Writes `report.json` and `report.csv` into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        let unwritable = |path: &Path| {
            let path = path.to_path_buf();
            move |source| Error::Unwritable { path, source }
        };
        std::fs::create_dir_all(dir).map_err(unwritable(dir))?;
        for (name, body) in [("report.json", self.to_json()?), ("report.csv", self.to_csv()?)] {
            let path = dir.join(name);
            std::fs::write(&path, body).map_err(unwritable(&path))?;
        }
        Ok(())
    }

    pub fn cell(&self, config: &str, metric: Metric, cond: &Condition) -> Option<&ReportCell> {
        self.cells.iter().find(|c| {
            c.config == config
                && c.metric == metric
                && c.noise_source == source_name(cond.noise_source)
                && c.room == room_name(cond.room)
                && c.snr_db == cond.snr_db
        })
    }
}

fn csv_error(e: csv::Error) -> Error {
    Error::Config(format!("csv: {e}"))
}

/// Detections in one positive utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct PositiveRun {
    pub speaker: usize,
    pub utterance_id: String,
    pub keyphrase_id: String,
    pub events: Vec<DetectionEvent>,
}

/// Everything shared by the grid's runs: the corpus, enrolled profiles and
/// recognizer templates.
pub struct EvalSetup {
    pub corpus: Corpus,
    pub phrases: PhraseSet,
    pub templates: Vec<PhraseTemplate>,
    pub embedder: Arc<dyn Embedder>,
    /// Eval speakers first, then dev speakers, in corpus order.
    pub profiles: BTreeMap<String, EnrollmentProfile>,
    pub dtw: DtwConfig,
    /// Base detector settings; the run config's toggles override these.
    pub detector: DetectorConfig,
}

impl EvalSetup {
    pub fn new(corpus: Corpus) -> Result<Self> {
        let embedder: Arc<dyn Embedder> = Arc::new(ReferenceEmbedder::new());
        let templates = corpus.build_templates()?;
        let phrases = corpus.phrase_set()?;
        let profiles = corpus
            .eval
            .par_iter()
            .chain(corpus.dev.par_iter())
            .map(|s| {
                let audio = s.enroll.iter().map(UtteranceSpec::render).collect::<Result<Vec<_>>>()?;
                Ok((s.speaker_id.clone(), enroll_audio(&s.speaker_id, &audio, embedder.as_ref())?))
            })
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .collect();
        let mut detector = DetectorConfig::default();
        detector.anc_config.adaptation_duration_s = PREFIX_S;
        detector.separator.freeze_after_s = Some(PREFIX_S);
        Ok(Self {
            corpus,
            phrases,
            templates,
            embedder,
            profiles,
            dtw: DtwConfig::default(),
            detector,
        })
    }

    fn profile(&self, speaker_id: &str) -> Result<&EnrollmentProfile> {
        self.profiles
            .get(speaker_id)
            .ok_or_else(|| Error::MissingProfile(speaker_id.into()))
    }

    fn utterance_seed(&self, id: &str, cond: &Condition) -> u64 {
        condition_seed(self.corpus.config.seed, id, cond)
    }

    fn recognizer(&self, run: &RunConfig, alignment: Vec<AlignedWord>) -> Result<Box<dyn Recognizer>> {
        Ok(match run.recognizer {
            RecognizerChoice::Dtw => Box::new(DtwRecognizer::new(&self.templates, self.dtw)?),
            RecognizerChoice::Replay => Box::new(ReplayRecognizer::new(alignment)?),
        })
    }

    fn detector_config(&self, run: &RunConfig, threshold: Option<f64>) -> DetectorConfig {
        DetectorConfig {
            anc: run.anc,
            sv: run.sv,
            separation_route: run.separation_route,
            threshold: threshold.unwrap_or(-1.0),
            ..self.detector
        }
    }

    fn run_utterance(
        &self,
        run: &RunConfig,
        threshold: Option<f64>,
        profile: &EnrollmentProfile,
        utt: &UtteranceSpec,
        cond: &Condition,
    ) -> Result<Vec<DetectionEvent>> {
        let audio = condition_audio(&utt.render()?, cond, self.utterance_seed(&utt.id, cond), run.anc)?;
        detect(
            &audio,
            self.detector_config(run, threshold),
            profile.clone(),
            self.phrases.clone(),
            self.recognizer(run, utt.alignment(prefix_samples()))?,
            self.embedder.clone(),
        )
    }

    /// Threshold at the equal error rate of detection-window scores on the
    /// clean dev set: each dev positive is run against every dev profile, and
    /// the best score among events of the right keyphrase is one trial.
    pub fn dev_threshold(&self, run: &RunConfig) -> Result<f64> {
        let probe = RunConfig {
            sv: true,
            ..run.clone()
        };
        let jobs: Vec<(&UtteranceSpec, &str, bool)> = self
            .corpus
            .dev
            .iter()
            .flat_map(|s| s.positives.iter().map(move |u| (s, u)))
            .flat_map(|(s, u)| {
                self.corpus
                    .dev
                    .iter()
                    .map(move |p| (u, p.speaker_id.as_str(), p.speaker_id == s.speaker_id))
            })
            .collect();
        let trials: Vec<Option<ScoredTrial>> = jobs
            .par_iter()
            .map(|&(u, p, is_target)| {
                let events = self.run_utterance(&probe, Some(-1.0), self.profile(p)?, u, &Condition::CLEAN)?;
                let kid = u.keyphrase_id.as_deref();
                Ok(events
                    .iter()
                    .filter(|e| Some(e.keyphrase_id.as_str()) == kid)
                    .filter_map(|e| e.sv_score)
                    .reduce(f64::max)
                    .map(|score| ScoredTrial { score, is_target }))
            })
            .collect::<Result<_>>()?;
        let trials: Vec<ScoredTrial> = trials.into_iter().flatten().collect();
        Ok(compute_eer(&trials)?.1)
    }

    /// The run's threshold: its own, the dev EER point, or none with SV off.
    pub fn resolve_threshold(&self, run: &RunConfig) -> Result<Option<f64>> {
        if !run.sv {
            return Ok(None);
        }
        match run.threshold {
            Some(t) => Ok(Some(t)),
            None => self.dev_threshold(run).map(Some),
        }
    }

    /// Every evaluation positive under `cond`, in corpus order.
    pub fn positive_runs(&self, run: &RunConfig, threshold: Option<f64>, cond: &Condition) -> Result<Vec<PositiveRun>> {
        let jobs: Vec<(usize, &UtteranceSpec)> = self
            .corpus
            .eval
            .iter()
            .enumerate()
            .flat_map(|(i, s)| s.positives.iter().map(move |u| (i, u)))
            .collect();
        jobs.par_iter()
            .map(|&(i, u)| {
                let profile = self.profile(&self.corpus.eval[i].speaker_id)?;
                Ok(PositiveRun {
                    speaker: i,
                    utterance_id: u.id.clone(),
                    keyphrase_id: u.keyphrase_id.clone().expect("positives carry a keyphrase"),
                    events: self.run_utterance(run, threshold, profile, u, cond)?,
                })
            })
            .collect()
    }

    /// Events on each clean negative stream, scored against the profile the
    /// stream claims. Streams get the same silent prefix as positives; event
    /// frames count from the start of the prefix.
    pub fn negative_runs(&self, run: &RunConfig, threshold: Option<f64>) -> Result<Vec<Vec<DetectionEvent>>> {
        self.corpus
            .negatives
            .par_iter()
            .map(|n| {
                let profile = self.profile(&n.claimed_speaker)?;
                let audio = condition_audio(&n.render()?, &Condition::CLEAN, 0, run.anc)?;
                let alignment: Vec<AlignedWord> = n
                    .alignment()
                    .into_iter()
                    .map(|w| shift(w, prefix_samples()))
                    .collect();
                detect(
                    &audio,
                    self.detector_config(run, threshold),
                    profile.clone(),
                    self.phrases.clone(),
                    self.recognizer(run, alignment)?,
                    self.embedder.clone(),
                )
            })
            .collect()
    }

    /// Verification trials on whole positive utterances under `cond`: each
    /// is scored against its speaker and `NONTARGETS_PER_TRIAL` others,
    /// without and with separation. Returns `(plain, separated)`.
    pub fn sv_trials(&self, cond: &Condition, utterances_per_speaker: usize) -> Result<(Vec<ScoredTrial>, Vec<ScoredTrial>)> {
        let speakers = &self.corpus.eval;
        let jobs: Vec<(usize, &UtteranceSpec)> = speakers
            .iter()
            .enumerate()
            .flat_map(|(i, s)| s.positives.iter().take(utterances_per_speaker).map(move |u| (i, u)))
            .collect();
        let per_job: Vec<Vec<(ScoredTrial, ScoredTrial)>> = jobs
            .par_iter()
            .map(|&(i, u)| {
                let seed = self.utterance_seed(&u.id, cond);
                let audio = condition_audio(&u.render()?, cond, seed, false)?;
                let (mel, stacked) = run_frontend(&audio, 0)?;
                let k0 = prefix_samples() / 480 + TRIAL_SKIP_FRAMES;
                let plain = self.embedder.embed(&stacked[k0.min(stacked.len() - 1)..])?;
                let mut others: Vec<usize> = (0..speakers.len()).filter(|&o| o != i).collect();
                others.sort_by_key(|&o| mix(seed, o as u64));
                others.truncate(NONTARGETS_PER_TRIAL);
                std::iter::once(i)
                    .chain(others)
                    .map(|p| {
                        let profile = self.profile(&speakers[p].speaker_id)?;
                        let signature = profile.signature.clone().ok_or_else(|| {
                            Error::Config(format!("profile {:?} has no signature", profile.speaker_id))
                        })?;
                        let mut sep = Separator::new(self.detector.separator, signature)?;
                        let cleaned: Vec<_> = mel.iter().map(|m| sep.process(m)).collect();
                        let separated = stack_subsample(&cleaned);
                        let d = self.embedder.embed(&separated[k0.min(separated.len() - 1)..])?;
                        let is_target = p == i;
                        Ok((
                            ScoredTrial {
                                score: score(profile, &plain),
                                is_target,
                            },
                            ScoredTrial {
                                score: score(profile, &d),
                                is_target,
                            },
                        ))
                    })
                    .collect()
            })
            .collect::<Result<_>>()?;
        Ok(per_job.into_iter().flatten().unzip())
    }
}

fn shift(w: AlignedWord, samples: usize) -> AlignedWord {
    // The prefix is a whole number of stacked hops.
    let frames = samples / 480;
    AlignedWord {
        start: w.start + frames,
        end: w.end + frames,
        ..w
    }
}

/// Unweighted mean over speakers of each speaker's FRR.
pub fn speaker_mean_frr(runs: &[PositiveRun]) -> Result<(f64, usize)> {
    let mut by_speaker: BTreeMap<usize, Vec<&PositiveRun>> = BTreeMap::new();
    for r in runs {
        by_speaker.entry(r.speaker).or_default().push(r);
    }
    if by_speaker.is_empty() {
        return Err(Error::EmptyInput("FRR needs at least one positive"));
    }
    let mut sum = 0.0;
    let mut misses = 0;
    for rs in by_speaker.values() {
        let positives: Vec<(&str, &str)> = rs
            .iter()
            .map(|r| (r.utterance_id.as_str(), r.keyphrase_id.as_str()))
            .collect();
        let detections = rs
            .iter()
            .flat_map(|r| r.events.iter().map(move |e| (r.utterance_id.as_str(), e)));
        let frr = compute_frr(detections, &positives)?;
        misses += (frr * positives.len() as f64).round() as usize;
        sum += frr;
    }
    Ok((sum / by_speaker.len() as f64, misses))
}

/// Runs every configuration over the grid.
pub fn run_grid(setup: &EvalSetup, configs: &[RunConfig], grid: &GridSpec) -> Result<EvalReport> {
    grid.validate()?;
    configs.iter().try_for_each(RunConfig::validate)?;
    let mut names: Vec<&str> = configs.iter().map(|c| c.name.as_str()).collect();
    names.sort_unstable();
    if names.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::Config("run config names must be unique".into()));
    }
    let mut report = EvalReport {
        corpus_seed: setup.corpus.config.seed,
        thresholds: BTreeMap::new(),
        cells: Vec::new(),
    };
    for run in configs {
        let threshold = setup.resolve_threshold(run)?;
        report.thresholds.insert(run.name.clone(), threshold);
        for cond in &grid.conditions {
            let runs = setup.positive_runs(run, threshold, cond)?;
            let (frr, misses) = speaker_mean_frr(&runs)?;
            report
                .cells
                .push(ReportCell::new(&run.name, Metric::FrrPercent, cond, 100.0 * frr, misses, runs.len() as f64));
        }
        if grid.negatives && !setup.corpus.negatives.is_empty() {
            let events = setup.negative_runs(run, threshold)?;
            let mut sum = 0.0;
            for (n, ev) in setup.corpus.negatives.iter().zip(&events) {
                sum += fa_per_hour(ev.len() as f64, n.duration_s())?;
            }
            let fired = events.iter().map(Vec::len).sum();
            report.cells.push(ReportCell::new(
                &run.name,
                Metric::FaPerHour,
                &Condition::CLEAN,
                sum / events.len() as f64,
                fired,
                setup.corpus.negative_hours(),
            ));
        }
    }
    if grid.eer_utterances_per_speaker > 0 {
        for cond in &grid.eer_conditions {
            let (plain, separated) = setup.sv_trials(cond, grid.eer_utterances_per_speaker)?;
            for (name, trials) in [("no_separation", plain), ("separation", separated)] {
                let (eer, _) = compute_eer(&trials)?;
                report
                    .cells
                    .push(ReportCell::new(name, Metric::EerPercent, cond, 100.0 * eer, trials.len(), trials.len() as f64));
            }
        }
    }
    Ok(report)
}
