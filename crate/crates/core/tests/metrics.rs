mod common;

use common::{brute_force_eer, trial_set};
use keyphrase::eval::*;
use keyphrase::gate::DetectionEvent;
use proptest::prelude::*;

#[test]
fn eer_matches_brute_force_on_1000_fuzzed_sets() {
    for seed in 0..1000 {
        let trials = trial_set(seed);
        let (eer, _) = compute_eer(&trials).unwrap();
        let oracle = brute_force_eer(&trials);
        assert!((eer - oracle).abs() <= 1e-9, "seed {seed}: {eer} vs {oracle}");
    }
}

#[test]
fn eer_edge_cases() {
    let t = |score, is_target| ScoredTrial { score, is_target };
    let separated = [t(0.9, true), t(0.8, true), t(0.1, false), t(0.2, false)];
    assert_eq!(compute_eer(&separated).unwrap().0, 0.0);
    let ties = [t(0.5, true), t(0.5, true), t(0.5, false), t(0.5, false), t(0.5, false)];
    assert!((compute_eer(&ties).unwrap().0 - 0.5).abs() < 1e-12);
    let inverted = [t(0.1, true), t(0.9, false)];
    assert_eq!(compute_eer(&inverted).unwrap().0, 1.0);
    assert!(compute_eer(&[t(0.3, true)]).is_err());
    assert!(compute_eer(&[t(f64::NAN, true), t(0.1, false)]).is_err());
}

fn event(id: &str, sv: f64) -> DetectionEvent {
    DetectionEvent {
        keyphrase_id: id.into(),
        start_frame: 0,
        end_frame: 10,
        sv_score: Some(sv),
        matched_text: String::new(),
    }
}

#[test]
fn frr_examples() {
    let positives: Vec<(String, String)> = (0..10).map(|i| (format!("u{i}"), "k".to_string())).collect();
    let pos: Vec<(&str, &str)> = positives.iter().map(|(a, b)| (a.as_str(), b.as_str())).collect();
    let hit = event("k", 0.9);
    let wrong = event("other", 0.9);
    let mut det: Vec<(&str, &DetectionEvent)> = pos[..7].iter().map(|(u, _)| (*u, &hit)).collect();
    assert!((compute_frr(det.iter().copied(), &pos).unwrap() - 0.3).abs() < 1e-12);
    // A wrong keyphrase id is still a rejection; a duplicate hit changes nothing.
    det.push((pos[8].0, &wrong));
    det.push((pos[0].0, &hit));
    assert!((compute_frr(det.iter().copied(), &pos).unwrap() - 0.3).abs() < 1e-12);
    assert!(compute_frr(det.iter().copied(), &[]).is_err());
}

#[test]
fn fa_per_hour_examples() {
    assert_eq!(compute_fa_per_hour(&[event("k", 0.9)], 1800.0).unwrap(), 2.0);
    assert_eq!(compute_fa_per_hour(&[], 3600.0).unwrap(), 0.0);
    // 61.62 events over 156 hours.
    assert!((fa_per_hour(61.62, 156.0 * 3600.0).unwrap() - 0.395).abs() < 1e-12);
    assert!(fa_per_hour(1.0, 0.0).is_err());
    assert!(fa_per_hour(-1.0, 10.0).is_err());
}

proptest! {
    #[test]
    fn eer_is_bounded_by_the_sweep(seed in any::<u64>()) {
        let trials = trial_set(seed);
        let (eer, _) = compute_eer(&trials).unwrap();
        let points = operating_points(&trials).unwrap();
        let min_max = points.iter().map(|p| p.far.max(p.frr)).fold(f64::INFINITY, f64::min);
        let min_mean = points.iter().map(|p| 0.5 * (p.far + p.frr)).fold(f64::INFINITY, f64::min);
        prop_assert!(eer <= min_max + 1e-12 && eer >= min_mean - 1e-12);
        prop_assert!(points.windows(2).all(|w| w[1].far <= w[0].far && w[1].frr >= w[0].frr));
    }

    #[test]
    fn eer_is_invariant_to_monotone_rescaling(seed in any::<u64>(), a in 0.1f64..10.0, b in -5.0f64..5.0) {
        let trials = trial_set(seed);
        let scaled: Vec<ScoredTrial> = trials
            .iter()
            .map(|t| ScoredTrial { score: a * t.score + b, is_target: t.is_target })
            .collect();
        let (e1, _) = compute_eer(&trials).unwrap();
        let (e2, _) = compute_eer(&scaled).unwrap();
        prop_assert!((e1 - e2).abs() < 1e-9);
    }

    #[test]
    fn frr_and_fa_are_monotone_in_threshold(
        pos_scores in prop::collection::vec(-1.0f64..1.0, 1..40),
        neg_scores in prop::collection::vec(-1.0f64..1.0, 0..40),
        lo in -1.0f64..1.0,
        delta in 0.0f64..1.0,
    ) {
        let hi = (lo + delta).min(1.0);
        let ids: Vec<String> = (0..pos_scores.len()).map(|i| format!("u{i}")).collect();
        let positives: Vec<(&str, &str)> = ids.iter().map(|u| (u.as_str(), "k")).collect();
        let pos_events: Vec<DetectionEvent> = pos_scores.iter().map(|&s| event("k", s)).collect();
        let neg_events: Vec<DetectionEvent> = neg_scores.iter().map(|&s| event("k", s)).collect();
        let gate = |theta: f64| {
            let frr = compute_frr(
                ids.iter().zip(&pos_events).filter(|(_, e)| e.sv_score.unwrap() >= theta).map(|(u, e)| (u.as_str(), e)),
                &positives,
            )
            .unwrap();
            let kept: Vec<DetectionEvent> = neg_events.iter().filter(|e| e.sv_score.unwrap() >= theta).cloned().collect();
            (frr, compute_fa_per_hour(&kept, 7200.0).unwrap())
        };
        let (frr_lo, fa_lo) = gate(lo);
        let (frr_hi, fa_hi) = gate(hi);
        prop_assert!(frr_hi >= frr_lo);
        prop_assert!(fa_hi <= fa_lo);
    }
}
