use std::path::{Path, PathBuf};
use std::sync::Arc;

use keyphrase::anc::benchmark_scene;
use keyphrase::audio_io::{
    read_manifest, read_wav, write_manifest, write_wav, AudioBuffer, ManifestEntry, NoiseMeta,
    NoiseSource, Room,
};
use keyphrase::augment::{build_scene, nonspeech_noise, parse_phrase, synth_speaker_utterance, MtrSpec};
use keyphrase::corpus::{Corpus, CorpusConfig, UtteranceSpec, DEFAULT_PHRASES};
use keyphrase::eval::{
    condition_audio, condition_seed, run_grid, Condition, EvalSetup, GridSpec, RecognizerChoice, RunConfig, NUM_REFS,
    REVERB_RT60_S,
};
use keyphrase::frontend::{run_frontend, SAMPLE_RATE_HZ};
use keyphrase::gate::{detect as run_detector, read_phrase_set, write_phrase_set, SeparationRoute};
use keyphrase::recognizer::{
    read_alignment, read_template, write_template, DtwRecognizer, PhraseTemplate, Recognizer, ReplayRecognizer,
};
use keyphrase::speaker::{cosine, enroll_audio, read_profile, write_profile, Embedder, ReferenceEmbedder};
use keyphrase::{Error, Result};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{read_json, write_json, PipelineConfig};
use crate::{AncBenchArgs, CorpusArgs, DetectArgs, EnrollArgs, EvaluateArgs, SimulateArgs};

fn init_pool(jobs: Option<usize>) -> Result<()> {
    let Some(n) = jobs else { return Ok(()) };
    if n == 0 {
        return Err(Error::Config("jobs must be > 0".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

fn print_line<T: Serialize>(record: &T) {
    println!("{}", serde_json::to_string(record).expect("records serialize"));
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|source| Error::Unwritable {
        path: path.to_path_buf(),
        source,
    })
}

pub fn enroll(args: EnrollArgs, jobs: Option<usize>) -> Result<()> {
    init_pool(jobs)?;
    if args.audio.is_empty() {
        return Err(Error::EmptyInput("enroll needs at least one audio file"));
    }
    let audio = args.audio.iter().map(read_wav).collect::<Result<Vec<_>>>()?;
    let embedder = ReferenceEmbedder::new();
    let profile = enroll_audio(&args.speaker_id, &audio, &embedder)?;
    let vectors = audio
        .iter()
        .map(|a| embedder.embed(&run_frontend(a, 0)?.1))
        .collect::<Result<Vec<_>>>()?;
    write_profile(&profile, &args.out)?;
    for i in 0..vectors.len() {
        for j in i + 1..vectors.len() {
            print_line(&serde_json::json!({
                "i": i,
                "j": j,
                "cosine": cosine(&vectors[i], &vectors[j]),
            }));
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct EventLine<'a> {
    id: &'a str,
    start_s: f64,
    end_s: f64,
    sv_score: Option<f64>,
}

fn read_templates(dir: &Path) -> Result<Vec<PhraseTemplate>> {
    if !dir.is_dir() {
        return Err(Error::MissingFile(dir.to_path_buf()));
    }
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|source| Error::Io {
            path: dir.to_path_buf(),
            source,
        })?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "tpl"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Config(format!("no .tpl files in {}", dir.display())));
    }
    paths.iter().map(read_template).collect()
}

pub fn detect(args: DetectArgs, jobs: Option<usize>) -> Result<()> {
    let mut config = match &args.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if args.phrases.is_some() {
        config.phrases = args.phrases.clone();
    }
    if args.templates.is_some() {
        config.templates = args.templates.clone();
    }
    if let Some(t) = args.threshold {
        config.detector.threshold = t;
    }
    if args.anc {
        config.detector.anc = true;
    }
    if args.no_sv {
        config.detector.sv = false;
        if config.detector.separation_route == SeparationRoute::Sv {
            config.detector.separation_route = SeparationRoute::None;
        }
    }
    if let Some(route) = args.route {
        config.detector.separation_route = route;
    }
    if args.alignment.is_some() {
        config.recognizer = RecognizerChoice::Replay;
    }
    config.validate()?;
    let phrases_path = config
        .phrases
        .as_ref()
        .ok_or_else(|| Error::Config("a phrase set is required (--phrases or config `phrases`)".into()))?;
    let recognizer: Box<dyn Recognizer> = match config.recognizer {
        RecognizerChoice::Dtw => {
            let dir = config
                .templates
                .as_ref()
                .ok_or_else(|| Error::Config("the template recognizer needs --templates".into()))?;
            Box::new(DtwRecognizer::new(&read_templates(dir)?, config.dtw)?)
        }
        RecognizerChoice::Replay => {
            let path = args
                .alignment
                .as_ref()
                .ok_or_else(|| Error::Config("the replay recognizer needs --alignment".into()))?;
            Box::new(ReplayRecognizer::new(read_alignment(path)?)?)
        }
    };
    let phrases = read_phrase_set(phrases_path)?;
    let profile = read_profile(&args.profile)?;
    init_pool(jobs.or(config.jobs))?;
    let audio = read_wav(&args.audio)?;
    let embedder: Arc<dyn Embedder> = Arc::new(ReferenceEmbedder::new());
    let events = run_detector(&audio, config.detector, profile, phrases, recognizer, embedder)?;
    for e in &events {
        print_line(&EventLine {
            id: &e.keyphrase_id,
            start_s: e.start_s(),
            end_s: e.end_s(),
            sv_score: e.sv_score,
        });
    }
    Ok(())
}

fn manifest_entry(spec: &UtteranceSpec, audio_path: String) -> ManifestEntry {
    ManifestEntry {
        audio_path,
        speaker_id: spec.speaker_id.clone(),
        transcript: spec.transcript(),
        keyphrase_id: spec.keyphrase_id.clone(),
        noise_meta: None,
    }
}

pub fn corpus(args: CorpusArgs, jobs: Option<usize>) -> Result<()> {
    let mut config: CorpusConfig = match &args.config {
        Some(path) => read_json(path)?,
        None => CorpusConfig::default(),
    };
    if let Some(v) = args.seed {
        config.seed = v;
    }
    if let Some(v) = args.eval_speakers {
        config.eval_speakers = v;
    }
    if let Some(v) = args.positives_per_speaker {
        config.positives_per_speaker = v;
    }
    if let Some(v) = args.dev_speakers {
        config.dev_speakers = v;
    }
    if let Some(v) = args.imposter_speakers {
        config.imposter_speakers = v;
    }
    if let Some(v) = args.negative_hours {
        config.negative_hours = v;
    }
    config.validate()?;
    init_pool(jobs)?;
    let corpus = Corpus::generate(config)?;
    let out = &args.out;
    create_dir(out)?;
    write_json(&corpus, &out.join("corpus.json"))?;
    write_phrase_set(&corpus.phrase_set()?, out.join("phrases.json"))?;

    let tpl_dir = out.join("templates");
    create_dir(&tpl_dir)?;
    for (i, tpl) in corpus.build_templates()?.iter().enumerate() {
        write_template(tpl, tpl_dir.join(format!("{i:03}_{}.tpl", tpl.keyphrase_id)))?;
    }
    if args.no_audio {
        return Ok(());
    }

    let utterances: Vec<&UtteranceSpec> = corpus
        .eval
        .iter()
        .chain(&corpus.dev)
        .flat_map(|s| s.enroll.iter().chain(&s.positives))
        .collect();
    let entries = utterances
        .par_iter()
        .map(|u| {
            let rel = format!("audio/{}/{}.wav", u.speaker_id, u.id);
            let path = out.join(&rel);
            create_dir(path.parent().expect("nested path"))?;
            write_wav(&u.render()?, &path)?;
            Ok(manifest_entry(u, rel))
        })
        .collect::<Result<Vec<_>>>()?;
    write_manifest(&entries, out.join("manifest.jsonl"))?;

    if args.negatives {
        let entries = corpus
            .negatives
            .par_iter()
            .map(|n| {
                let rel = format!("negatives/{}.wav", n.id);
                let path = out.join(&rel);
                create_dir(path.parent().expect("nested path"))?;
                write_wav(&n.render()?, &path)?;
                let transcript: Vec<String> = n.segments.iter().map(|(_, u)| u.transcript()).collect();
                Ok(ManifestEntry {
                    audio_path: rel,
                    speaker_id: n.claimed_speaker.clone(),
                    transcript: transcript.join(" "),
                    keyphrase_id: None,
                    noise_meta: None,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        write_manifest(&entries, out.join("negatives.jsonl"))?;
    }
    Ok(())
}

/// Output location of `audio_path` inside a condition directory: relative
/// paths are mirrored, absolute ones keep only the file name.
fn mirrored(audio_path: &str) -> Result<PathBuf> {
    let p = Path::new(audio_path);
    if p.is_relative() && !p.components().any(|c| matches!(c, std::path::Component::ParentDir)) {
        return Ok(p.to_path_buf());
    }
    p.file_name()
        .map(PathBuf::from)
        .ok_or_else(|| Error::Config(format!("manifest path {audio_path:?} has no file name")))
}

pub fn simulate(args: SimulateArgs, jobs: Option<usize>) -> Result<()> {
    let entries = read_manifest(&args.manifest)?;
    if entries.is_empty() {
        return Err(Error::EmptyInput("manifest has no entries"));
    }
    let base = args.manifest.parent().unwrap_or(Path::new("."));
    let rels = entries.iter().map(|e| mirrored(&e.audio_path)).collect::<Result<Vec<_>>>()?;
    init_pool(jobs)?;
    let conditions: Vec<Condition> = Condition::mtr_grid().into_iter().filter(|c| c.noise_source.is_some()).collect();
    let jobs: Vec<(&Condition, usize)> = conditions.iter().flat_map(|c| (0..entries.len()).map(move |i| (c, i))).collect();
    let out = &args.out;
    let written = jobs
        .par_iter()
        .map(|&(cond, i)| {
            let entry = &entries[i];
            let speech = read_wav(base.join(&entry.audio_path))?;
            let speech = AudioBuffer::mono(speech.channel(0).expect("non-empty").to_vec(), speech.sample_rate_hz())?;
            let seed = condition_seed(args.seed, &entry.audio_path, cond);
            let audio = condition_audio(&speech, cond, seed, true)?;
            let rel = Path::new(&cond.dir_name()).join(&rels[i]);
            let path = out.join(&rel);
            create_dir(path.parent().expect("nested path"))?;
            write_wav(&audio, &path)?;
            Ok(ManifestEntry {
                audio_path: rel.to_string_lossy().into_owned(),
                noise_meta: Some(NoiseMeta {
                    source: cond.noise_source.expect("noisy condition"),
                    snr_db: cond.snr_db.expect("noisy condition"),
                    room: cond.room,
                }),
                ..entry.clone()
            })
        })
        .collect::<Result<Vec<_>>>()?;
    write_manifest(&written, out.join("manifest.jsonl"))
}

pub fn evaluate(args: EvaluateArgs, jobs: Option<usize>) -> Result<()> {
    let corpus: Corpus = read_json(&args.manifest)?;
    corpus.config.validate()?;
    let mut configs = match &args.configs {
        Some(path) => read_json::<Vec<RunConfig>>(path)?,
        None => RunConfig::standard(),
    };
    if let Some(t) = args.threshold {
        for c in configs.iter_mut().filter(|c| c.sv) {
            c.threshold = Some(t);
        }
    }
    configs.iter().try_for_each(RunConfig::validate)?;
    let grid = match &args.grid {
        Some(path) => read_json::<GridSpec>(path)?,
        None => GridSpec::default(),
    };
    grid.validate()?;
    init_pool(jobs)?;
    let setup = EvalSetup::new(corpus)?;
    let report = run_grid(&setup, &configs, &grid)?;
    report.write(&args.out)?;
    print_line(&serde_json::json!({
        "report_json": args.out.join("report.json"),
        "report_csv": args.out.join("report.csv"),
        "cells": report.cells.len(),
    }));
    Ok(())
}

#[derive(Serialize)]
struct BenchLine {
    scene: usize,
    seed: u64,
    snr_in_db: f64,
    snr_out_db: f64,
    improvement_db: f64,
}

pub fn anc_bench(args: AncBenchArgs, jobs: Option<usize>) -> Result<()> {
    let config = match &args.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    config.validate()?;
    if args.scenes == 0 {
        return Err(Error::Config("--scenes must be > 0".into()));
    }
    if !args.snr.is_finite() {
        return Err(Error::Config("--snr must be finite".into()));
    }
    init_pool(jobs.or(config.jobs))?;
    let anc = config.detector.anc_config;
    let lines = (0..args.scenes)
        .into_par_iter()
        .map(|i| {
            let seed = args.seed.wrapping_add(i as u64);
            let (_, text) = DEFAULT_PHRASES[i % DEFAULT_PHRASES.len()];
            let speech = synth_speaker_utterance(seed, &parse_phrase(text)?, 1.0)?;
            let spec = MtrSpec {
                noise_source: NoiseSource::Nonspeech,
                snr_db: args.snr,
                room: Room::Additive,
                prefix_noise_s: anc.adaptation_duration_s,
                rt60_s: REVERB_RT60_S,
                seed,
            };
            let len = (anc.adaptation_duration_s * f64::from(SAMPLE_RATE_HZ)).round() as usize + speech.len();
            let noise = AudioBuffer::mono(nonspeech_noise(seed, len), SAMPLE_RATE_HZ)?;
            let scene = build_scene(&speech, &noise, &spec, NUM_REFS)?;
            let b = benchmark_scene(&scene, anc)?;
            Ok(BenchLine {
                scene: i,
                seed,
                snr_in_db: b.snr_in_db,
                snr_out_db: b.snr_out_db,
                improvement_db: b.improvement_db,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    lines.iter().for_each(print_line);
    Ok(())
}
