//! One PASS/FAIL line per acceptance criterion. Lines go straight to stdout
//! so they show up without `--nocapture`.

mod common;

use std::collections::HashMap;
use std::io::Write;
use std::time::Instant;

use common::{apply_filter, brute_force_eer, db, dft_power, power, textbook_filter_for, trial_set, wiener_oracle};
use keyphrase::anc::{AncConfig, AncState};
use keyphrase::audio_io::{AudioBuffer, NoiseSource, Room};
use keyphrase::augment::{build_scene, nonspeech_noise, synth_speaker_utterance, MtrSpec};
use keyphrase::corpus::{Corpus, CorpusConfig};
use keyphrase::eval::*;
use keyphrase::frontend::*;
use keyphrase::gate::{match_stream, sv_window, DetectionEvent, SeparationRoute};
use keyphrase::recognizer::Hypothesis;
use keyphrase::separation::Separator;
use keyphrase::speaker::score;
use keyphrase::Result;
use rand::{Rng, SeedableRng};

// Pinned tolerances.
const LN4_TOL: f64 = 1e-6;
const ANC_MIN_DB: f64 = 15.0;
const ANC_ORACLE_GAP_DB: f64 = 3.0;
const LINEARITY_TOL: f64 = 1e-9;
const EER_TOL: f64 = 1e-9;
const SEP_RATIO: f64 = 0.7;
const SEP_NEUTRAL_PP: f64 = 0.5;
const SV_FA_RATIO: f64 = 0.2;
const ANC_REL_GAIN: f64 = 0.2;
const RESCORE_TOL: f64 = 1e-9;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Result<Outcome> {
    Ok(Outcome { pass, detail })
}

fn emit(id: usize, name: &str, started: Instant, result: Result<Outcome>) -> bool {
    let (pass, detail) = match result {
        Ok(o) => (o.pass, o.detail),
        Err(e) => (false, format!("error: {e}")),
    };
    let line = format!(
        "{} C{id} {name}: {detail} [{:.1} s]\n",
        if pass { "PASS" } else { "FAIL" },
        started.elapsed().as_secs_f64()
    );
    let mut out = std::io::stdout().lock();
    out.write_all(line.as_bytes()).unwrap();
    out.flush().unwrap();
    pass
}

fn rng(seed: u64) -> rand_chacha::ChaCha8Rng {
    rand_chacha::ChaCha8Rng::seed_from_u64(seed)
}

fn noise(seed: u64, n: usize) -> Vec<f64> {
    let mut r = rng(seed);
    (0..n).map(|_| r.gen_range(-0.3..0.3)).collect()
}

fn c1_frontend() -> Result<Outcome> {
    let mut r = rng(1);
    let mut count_errors = 0;
    for _ in 0..200 {
        let n = r.gen_range(0..24_000);
        let brute = (0..).take_while(|t| t * HOP_LEN + FRAME_LEN <= n).count();
        let audio = AudioBuffer::mono(vec![0.01; n], SAMPLE_RATE_HZ)?;
        let (mel, stacked) = run_frontend(&audio, 0)?;
        let closed = if n < FRAME_LEN { 0 } else { (n - FRAME_LEN) / HOP_LEN + 1 };
        if mel.len() != brute || num_frames(n) != closed || stacked.len() != (brute + SUBSAMPLE - 1) / SUBSAMPLE {
            count_errors += 1;
        }
    }

    let fb = MelFilterbank::new();
    let tone: Vec<f64> = (0..FRAME_LEN)
        .map(|i| 0.5 * (2.0 * std::f64::consts::PI * 1000.0 * i as f64 / 16_000.0).sin())
        .collect();
    let frame = &frame_signal(&tone)[0];
    let slow = dft_power(frame);
    let oracle_energies: Vec<f64> = (0..NUM_MEL)
        .map(|k| fb.filter_weights(k).iter().zip(&slow).map(|(w, p)| w * p).sum())
        .collect();
    let argmax = |v: &[f64]| (0..v.len()).max_by(|&i, &j| v[i].total_cmp(&v[j])).unwrap();
    let expected = textbook_filter_for(1000.0);
    let tone_ok = argmax(&fb.mel_frame(frame, 0).log_energies) == expected && argmax(&oracle_energies) == expected;

    let mut ln4_err: f64 = 0.0;
    for seed in 0..50 {
        let x = noise(seed, FRAME_LEN);
        let x2: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
        let a = fb.mel_frame(&frame_signal(&x)[0], 0).log_energies;
        let b = fb.mel_frame(&frame_signal(&x2)[0], 0).log_energies;
        for (p, q) in a.iter().zip(&b) {
            ln4_err = ln4_err.max((q - p - 4f64.ln()).abs());
        }
    }

    let mut chunk_mismatch = 0;
    for seed in 0..20 {
        let x = noise(100 + seed, 24_000);
        let whole = Frontend::default().push(&x);
        let mut fe = Frontend::default();
        let mut got = FrontendOutput::default();
        let mut pos = 0;
        while pos < x.len() {
            let end = (pos + r.gen_range(1..3000)).min(x.len());
            let out = fe.push(&x[pos..end]);
            got.mel.extend(out.mel);
            got.stacked.extend(out.stacked);
            pos = end;
        }
        if got != whole {
            chunk_mismatch += 1;
        }
    }
    outcome(
        count_errors == 0 && tone_ok && ln4_err <= LN4_TOL && chunk_mismatch == 0,
        format!(
            "frame-count mismatches {count_errors}/200, 1 kHz peak in filter {expected} {}, \
             max |dlog - ln4| {ln4_err:.1e} (tol {LN4_TOL:.0e}), chunked mismatches {chunk_mismatch}/20",
            if tone_ok { "ok" } else { "WRONG" }
        ),
    )
}

fn c2_anc() -> Result<Outcome> {
    let cfg = AncConfig::default();
    let adapt = cfg.adaptation_samples();
    let (mut worst_db, mut worst_gap) = (f64::INFINITY, f64::NEG_INFINITY);
    for seed in 0..3u64 {
        let speech = synth_speaker_utterance(100 + seed, &[2, 4, 5, 6], 1.0)?;
        let noise = AudioBuffer::mono(nonspeech_noise(seed, 80_000), SAMPLE_RATE_HZ)?;
        let spec = MtrSpec {
            noise_source: NoiseSource::Nonspeech,
            snr_db: 0.0,
            room: Room::Additive,
            prefix_noise_s: 3.0,
            rt60_s: 0.3,
            seed,
        };
        let scene = build_scene(&speech, &noise, &spec, 2)?;
        let refs: Vec<&[f64]> = scene.references.iter().map(Vec::as_slice).collect();
        let mut st = AncState::new(cfg, 2)?;
        let head: Vec<&[f64]> = refs.iter().map(|r| &r[..adapt]).collect();
        st.process_block(&scene.primary[..adapt], &head)?;
        st.freeze();
        let noise_refs: Vec<&[f64]> = scene.noise[1..].iter().map(Vec::as_slice).collect();
        let total = scene.len();
        let residual = apply_filter(&scene.noise[0], &noise_refs, st.weights(), adapt..total);
        let w = wiener_oracle(&scene.primary, &refs, cfg.filter_taps, 0..adapt);
        let oracle = apply_filter(&scene.noise[0], &noise_refs, &w, adapt..total);
        let base = power(&scene.noise[0][adapt..]);
        let got = db(base / power(&residual));
        let best = db(base / power(&oracle));
        worst_db = worst_db.min(got);
        worst_gap = worst_gap.max(best - got);
    }

    // Frozen-filter linearity on random signals.
    let mut trained = AncState::new(cfg, 2)?;
    let p = noise(7, 20_000);
    let r1 = noise(8, 20_000);
    let r2 = noise(9, 20_000);
    trained.process_block(&p, &[&r1, &r2])?;
    let mut frozen = AncState::new(cfg, 2)?;
    frozen.set_weights(trained.weights().to_vec())?;
    frozen.freeze();
    let run = |p: &[f64], r: &[Vec<f64>]| -> Result<Vec<f64>> {
        let mut s = frozen.clone();
        s.process_block(p, &r.iter().map(Vec::as_slice).collect::<Vec<_>>())
    };
    let (a, b) = (0.7, -1.3);
    let mix = |x: &[f64], y: &[f64]| -> Vec<f64> { x.iter().zip(y).map(|(u, v)| a * u + b * v).collect() };
    let (p1, p2) = (noise(10, 8000), noise(11, 8000));
    let (q1, q2) = (vec![noise(12, 8000), noise(13, 8000)], vec![noise(14, 8000), noise(15, 8000)]);
    let lhs = run(&mix(&p1, &p2), &[mix(&q1[0], &q2[0]), mix(&q1[1], &q2[1])])?;
    let rhs = mix(&run(&p1, &q1)?, &run(&p2, &q2)?);
    let scale = lhs.iter().map(|v| v.abs()).fold(0.0, f64::max);
    let lin_err = lhs.iter().zip(&rhs).map(|(l, r)| (l - r).abs()).fold(0.0, f64::max) / scale;
    outcome(
        worst_db >= ANC_MIN_DB && worst_gap <= ANC_ORACLE_GAP_DB && lin_err <= LINEARITY_TOL,
        format!(
            "worst reduction {worst_db:.1} dB (>= {ANC_MIN_DB}), worst gap to Wiener {worst_gap:.2} dB \
             (<= {ANC_ORACLE_GAP_DB}), superposition rel err {lin_err:.1e} (tol {LINEARITY_TOL:.0e})"
        ),
    )
}

fn c3_eer() -> Result<Outcome> {
    let mut worst: f64 = 0.0;
    for seed in 0..1000 {
        let trials = trial_set(seed);
        worst = worst.max((compute_eer(&trials)?.0 - brute_force_eer(&trials)).abs());
    }
    let t = |score, is_target| ScoredTrial { score, is_target };
    let separated = compute_eer(&[t(0.9, true), t(0.7, true), t(0.2, false), t(0.1, false)])?.0;
    let tied = compute_eer(&[t(0.5, true), t(0.5, false), t(0.5, false)])?.0;
    outcome(
        worst <= EER_TOL && separated == 0.0 && (tied - 0.5).abs() < 1e-12,
        format!("max |EER - oracle| over 1000 sets {worst:.1e} (tol {EER_TOL:.0e}), separated {separated}, all tied {tied}"),
    )
}

fn eer_pct(trials: &[ScoredTrial]) -> Result<f64> {
    Ok(100.0 * compute_eer(trials)?.0)
}

fn c4_separation(setup: &EvalSetup) -> Result<Outcome> {
    let per_speaker = GridSpec::default().eer_utterances_per_speaker;
    let mut rows = Vec::new();
    for cond in [
        Condition::noisy(NoiseSource::Speech, Room::Additive, 0.0),
        Condition::noisy(NoiseSource::Nonspeech, Room::Additive, 0.0),
        Condition::CLEAN,
    ] {
        let (plain, separated) = setup.sv_trials(&cond, per_speaker)?;
        rows.push((cond.label(), eer_pct(&plain)?, eer_pct(&separated)?));
    }
    let (_, sp_plain, sp_sep) = rows[0];
    let speech_ok = sp_sep <= SEP_RATIO * sp_plain;
    let neutral_ok = rows[1..].iter().all(|(_, a, b)| (a - b).abs() <= SEP_NEUTRAL_PP);
    let detail: Vec<String> = rows
        .iter()
        .map(|(l, a, b)| format!("{l} EER {a:.2}% -> {b:.2}%"))
        .collect();
    outcome(
        speech_ok && neutral_ok,
        format!(
            "{} (need speech ratio <= {SEP_RATIO}, others |d| <= {SEP_NEUTRAL_PP} pp)",
            detail.join(", ")
        ),
    )
}

struct GatingRuns {
    threshold: f64,
    on: Vec<Vec<DetectionEvent>>,
}

fn c5_sv_gating(setup: &EvalSetup) -> Result<(Outcome, GatingRuns)> {
    let off_cfg = RunConfig::new("no_sv", false, false, SeparationRoute::None);
    let on_cfg = RunConfig::new("sep_sv", false, true, SeparationRoute::Sv);
    let threshold = setup.resolve_threshold(&on_cfg)?.expect("sv on");
    let off = setup.negative_runs(&off_cfg, None)?;
    let on = setup.negative_runs(&on_cfg, Some(threshold))?;
    let seconds = setup.corpus.negative_hours() * 3600.0;
    let n_off: usize = off.iter().map(Vec::len).sum();
    let n_on: usize = on.iter().map(Vec::len).sum();
    let fa_off = fa_per_hour(n_off as f64, seconds)?;
    let fa_on = fa_per_hour(n_on as f64, seconds)?;
    let key = |e: &DetectionEvent| (e.keyphrase_id.clone(), e.start_frame, e.end_frame, e.matched_text.clone());
    let subset = on
        .iter()
        .zip(&off)
        .all(|(a, b)| a.iter().all(|e| b.iter().any(|f| key(f) == key(e))));
    let o = Outcome {
        pass: fa_off > 0.0 && fa_on <= SV_FA_RATIO * fa_off && subset,
        detail: format!(
            "{:.2} h negatives, FA/h {fa_off:.2} ({n_off} events) -> {fa_on:.3} ({n_on}) at dev theta {threshold:.4} \
             (ratio {:.4}, need <= {SV_FA_RATIO}), SV-on subset of SV-off: {subset}",
            seconds / 3600.0,
            if fa_off > 0.0 { fa_on / fa_off } else { f64::NAN }
        ),
    };
    Ok((o, GatingRuns { threshold, on }))
}

fn c6_anc_frr(setup: &EvalSetup, threshold_no_anc: f64) -> Result<Outcome> {
    let no_anc = RunConfig::new("sep_sv", false, true, SeparationRoute::Sv);
    let anc = RunConfig::new("sep_sv_anc", true, true, SeparationRoute::Sv);
    let threshold_anc = setup.resolve_threshold(&anc)?;
    let mut rows = Vec::new();
    for snr in [-5.0, 0.0] {
        let cond = Condition::noisy(NoiseSource::Nonspeech, Room::Additive, snr);
        let (without, _) = speaker_mean_frr(&setup.positive_runs(&no_anc, Some(threshold_no_anc), &cond)?)?;
        let (with, _) = speaker_mean_frr(&setup.positive_runs(&anc, threshold_anc, &cond)?)?;
        rows.push((snr, 100.0 * without, 100.0 * with));
    }
    let lower = rows.iter().all(|(_, a, b)| b < a);
    let (_, a, b) = rows[0];
    let rel = if a > 0.0 { (a - b) / a } else { 0.0 };
    let detail: Vec<String> = rows
        .iter()
        .map(|(s, a, b)| format!("{s} dB FRR {a:.1}% -> {b:.1}%"))
        .collect();
    outcome(
        lower && rel >= ANC_REL_GAIN,
        format!(
            "nonspeech additive: {}; relative reduction at -5 dB {:.1}% (need >= {:.0}%)",
            detail.join(", "),
            100.0 * rel,
            100.0 * ANC_REL_GAIN
        ),
    )
}

/// Re-derives both gate conditions for every event: the matched text matches
/// its keyphrase on its own, and the separated-feature score of the padded
/// span, recomputed offline, equals the reported one and clears theta.
fn c7_conjunction(setup: &EvalSetup, gating: &GatingRuns) -> Result<Outcome> {
    let run = RunConfig::new("sep_sv", false, true, SeparationRoute::Sv);
    let theta = gating.threshold;
    let positives = setup.positive_runs(&run, Some(theta), &Condition::CLEAN)?;
    // (audio, speaker id, events)
    let mut jobs: Vec<(AudioBuffer, String, &[DetectionEvent])> = Vec::new();
    let utterances: HashMap<&str, _> = setup
        .corpus
        .eval
        .iter()
        .flat_map(|s| s.positives.iter().map(move |u| (u.id.as_str(), u)))
        .collect();
    for r in positives.iter().filter(|r| !r.events.is_empty()) {
        let audio = condition_audio(&utterances[r.utterance_id.as_str()].render()?, &Condition::CLEAN, 0, false)?;
        jobs.push((audio, setup.corpus.eval[r.speaker].speaker_id.clone(), &r.events));
    }
    for (stream, events) in setup.corpus.negatives.iter().zip(&gating.on) {
        if !events.is_empty() {
            let audio = condition_audio(&stream.render()?, &Condition::CLEAN, 0, false)?;
            jobs.push((audio, stream.claimed_speaker.clone(), events));
        }
    }
    let (mut checked, mut text_fail, mut score_fail) = (0, 0, 0);
    let mut worst: f64 = 0.0;
    for (audio, speaker, events) in &jobs {
        let profile = &setup.profiles[speaker];
        let (mel, _) = run_frontend(audio, 0)?;
        let mut sep = Separator::new(setup.detector.separator, profile.signature.clone().expect("signature"))?;
        let cleaned: Vec<_> = mel.iter().map(|m| sep.process(m)).collect();
        let stacked = stack_subsample(&cleaned);
        for e in events.iter() {
            checked += 1;
            let hyp = Hypothesis {
                text: e.matched_text.clone(),
                start_frame: e.start_frame,
                end_frame: e.end_frame,
                confidence: 1.0,
                is_final: true,
            };
            let rematch = match_stream(&setup.phrases, &[hyp]);
            let pattern_ok = setup.phrases.get(&e.keyphrase_id).is_some_and(|p| p.pattern.is_match(&e.matched_text));
            if !pattern_ok || rematch.first().map(|m| m.keyphrase_id.as_str()) != Some(e.keyphrase_id.as_str()) {
                text_fail += 1;
            }
            let (lo, hi) = sv_window(e.start_frame, e.end_frame, setup.detector.sv_padding_frames, stacked.len());
            let s = score(profile, &setup.embedder.embed(&stacked[lo..=hi])?);
            let reported = e.sv_score.unwrap_or(f64::NAN);
            worst = worst.max((s - reported).abs());
            if !((s - reported).abs() <= RESCORE_TOL && s >= theta) {
                score_fail += 1;
            }
        }
    }
    outcome(
        checked > 0 && text_fail == 0 && score_fail == 0,
        format!(
            "{checked} events (clean positives + SV-on negatives) at theta {theta:.4}: regex failures {text_fail}, \
             score failures {score_fail}, max rescoring error {worst:.1e} (tol {RESCORE_TOL:.0e})"
        ),
    )
}

fn c8_determinism() -> Result<Outcome> {
    let config = CorpusConfig {
        seed: 99,
        eval_speakers: 3,
        positives_per_speaker: 2,
        dev_speakers: 2,
        dev_positives_per_speaker: 2,
        imposter_speakers: 2,
        negative_hours: 0.01,
        ..Default::default()
    };
    let grid = GridSpec {
        eer_utterances_per_speaker: 2,
        ..Default::default()
    };
    let mut outputs = Vec::new();
    for _ in 0..2 {
        let setup = EvalSetup::new(Corpus::generate(config.clone())?)?;
        let report = run_grid(&setup, &RunConfig::standard(), &grid)?;
        outputs.push((report.to_json()?, report.to_csv()?, report.cells.len()));
    }
    let same = outputs[0].0 == outputs[1].0 && outputs[0].1 == outputs[1].1;
    outcome(
        same,
        format!(
            "full grid ({} cells) on a seeded small corpus twice: JSON {} bytes, CSV {} bytes, identical: {same}",
            outputs[0].2,
            outputs[0].0.len(),
            outputs[0].1.len()
        ),
    )
}

fn c9_formulas() -> Result<Outcome> {
    let ev = |id: &str| DetectionEvent {
        keyphrase_id: id.into(),
        start_frame: 0,
        end_frame: 1,
        sv_score: None,
        matched_text: String::new(),
    };
    let half_hour = compute_fa_per_hour(&[ev("k")], 1800.0)?;
    let table = fa_per_hour(0.395 * 156.0, 156.0 * 3600.0)?;
    let zero = compute_fa_per_hour(&[], 7200.0)?;
    let ids: Vec<String> = (0..10).map(|i| format!("u{i}")).collect();
    let positives: Vec<(&str, &str)> = ids.iter().map(|u| (u.as_str(), "k")).collect();
    let (hit, wrong) = (ev("k"), ev("x"));
    let mut dets: Vec<(&str, &DetectionEvent)> = ids[..7].iter().map(|u| (u.as_str(), &hit)).collect();
    dets.push((ids[9].as_str(), &wrong));
    let frr = compute_frr(dets, &positives)?;
    let ok = half_hour == 2.0 && (table - 0.395).abs() < 1e-12 && zero == 0.0 && (frr - 0.3).abs() < 1e-12;
    outcome(
        ok,
        format!(
            "1 event / 30 min = {half_hour} FA/h, 61.62 events / 156 h = {table:.6} FA/h, \
             7 of 10 hits plus a wrong-id event = FRR {frr:.3}"
        ),
    )
}

#[test]
fn acceptance_criteria() {
    let total = Instant::now();
    let mut passed = Vec::new();
    let t = Instant::now();
    passed.push(emit(1, "frontend oracles", t, c1_frontend()));
    let t = Instant::now();
    passed.push(emit(2, "ANC cancellation", t, c2_anc()));
    let t = Instant::now();
    passed.push(emit(3, "EER oracle", t, c3_eer()));

    let t = Instant::now();
    let setup = Corpus::generate(CorpusConfig::default()).and_then(EvalSetup::new);
    let setup = match setup {
        Ok(s) => s,
        Err(e) => {
            for (id, name) in [(4, "separation trend"), (5, "SV gating"), (6, "ANC FRR"), (7, "gate conjunction")] {
                emit(id, name, t, Err(keyphrase::Error::Config(format!("corpus setup failed: {e}"))));
            }
            panic!("corpus setup failed: {e}");
        }
    };
    let c = &setup.corpus.config;
    let mut out = std::io::stdout().lock();
    writeln!(
        out,
        "corpus: seed {}, {} eval speakers x {} positives, {} dev speakers, {:.2} h negatives; setup {:.1} s",
        c.seed,
        c.eval_speakers,
        c.positives_per_speaker,
        c.dev_speakers,
        setup.corpus.negative_hours(),
        t.elapsed().as_secs_f64()
    )
    .unwrap();
    drop(out);

    let t = Instant::now();
    passed.push(emit(4, "separation trend", t, c4_separation(&setup)));
    let t = Instant::now();
    let gating = match c5_sv_gating(&setup) {
        Ok((o, g)) => {
            passed.push(emit(5, "SV gating", t, Ok(o)));
            Some(g)
        }
        Err(e) => {
            passed.push(emit(5, "SV gating", t, Err(e)));
            None
        }
    };
    let t = Instant::now();
    let theta = match &gating {
        Some(g) => Ok(g.threshold),
        None => setup
            .resolve_threshold(&RunConfig::new("sep_sv", false, true, SeparationRoute::Sv))
            .map(|t| t.expect("sv on")),
    };
    passed.push(emit(6, "ANC FRR", t, theta.and_then(|th| c6_anc_frr(&setup, th))));
    let t = Instant::now();
    let c7 = match &gating {
        Some(g) => c7_conjunction(&setup, g),
        None => Err(keyphrase::Error::Config("needs the SV gating runs".into())),
    };
    passed.push(emit(7, "gate conjunction", t, c7));
    let t = Instant::now();
    passed.push(emit(8, "determinism", t, c8_determinism()));
    let t = Instant::now();
    passed.push(emit(9, "metric formulas", t, c9_formulas()));

    let n = passed.iter().filter(|p| **p).count();
    writeln!(
        std::io::stdout().lock(),
        "acceptance: {n}/{} criteria passed in {:.1} s",
        passed.len(),
        total.elapsed().as_secs_f64()
    )
    .unwrap();
    assert_eq!(n, passed.len(), "some acceptance criteria failed");
}
