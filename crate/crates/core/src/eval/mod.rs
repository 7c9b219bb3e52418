//! Detection metrics: EER for verification, FRR and FA/h for detection.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gate::DetectionEvent;

mod grid;

pub use grid::*;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredTrial {
    pub score: f64,
    pub is_target: bool,
}

/// One point of the threshold sweep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OperatingPoint {
    pub threshold: f64,
    pub far: f64,
    pub frr: f64,
}

/// FAR (non-targets scoring `>= threshold`) and FRR (targets `< threshold`)
/// for each threshold: `score - 1` below the lowest score, every midpoint
/// between adjacent distinct scores, and `score + 1` above the highest.
pub fn operating_points(trials: &[ScoredTrial]) -> Result<Vec<OperatingPoint>> {
    if trials.iter().any(|t| !t.score.is_finite()) {
        return Err(Error::InvalidBuffer("trial scores must be finite".into()));
    }
    let num_targets = trials.iter().filter(|t| t.is_target).count();
    let num_nontargets = trials.len() - num_targets;
    if num_targets == 0 || num_nontargets == 0 {
        return Err(Error::Degenerate(
            "EER needs at least one target and one non-target trial".into(),
        ));
    }
    let mut sorted = trials.to_vec();
    sorted.sort_by(|a, b| a.score.total_cmp(&b.score));

    let mut points = Vec::with_capacity(sorted.len() + 1);
    // Counts of trials strictly below the current threshold.
    let (mut targets_below, mut nontargets_below) = (0usize, 0usize);
    let mut push = |threshold: f64, tb: usize, nb: usize| {
        points.push(OperatingPoint {
            threshold,
            far: (num_nontargets - nb) as f64 / num_nontargets as f64,
            frr: tb as f64 / num_targets as f64,
        })
    };
    push(sorted[0].score - 1.0, 0, 0);
    let mut i = 0;
    while i < sorted.len() {
        let s = sorted[i].score;
        while i < sorted.len() && sorted[i].score == s {
            if sorted[i].is_target {
                targets_below += 1;
            } else {
                nontargets_below += 1;
            }
            i += 1;
        }
        let threshold = if i < sorted.len() {
            0.5 * (s + sorted[i].score)
        } else {
            s + 1.0
        };
        push(threshold, targets_below, nontargets_below);
    }
    Ok(points)
}

/// Equal error rate and its threshold, interpolated linearly between the
/// adjacent operating points where `FAR - FRR` changes sign.
pub fn compute_eer(trials: &[ScoredTrial]) -> Result<(f64, f64)> {
    let points = operating_points(trials)?;
    let diff = |p: &OperatingPoint| p.far - p.frr;
    for pair in points.windows(2) {
        let (a, b) = (pair[0], pair[1]);
        if diff(&a) == 0.0 {
            return Ok((a.far, a.threshold));
        }
        if diff(&a) > 0.0 && diff(&b) <= 0.0 {
            let t = diff(&a) / (diff(&a) - diff(&b));
            let eer = a.far + t * (b.far - a.far);
            return Ok((eer, a.threshold + t * (b.threshold - a.threshold)));
        }
    }
    // The last point always has FAR = 0 and FRR = 1.
    unreachable!("FAR - FRR runs from +1 to -1 across the sweep")
}

/// Fraction of positives `(utterance_id, keyphrase_id)` with no detection of
/// that keyphrase in that utterance. An event with the wrong keyphrase id does
/// not count as a detection.
pub fn compute_frr<'a>(
    detections: impl IntoIterator<Item = (&'a str, &'a DetectionEvent)>,
    positives: &[(&str, &str)],
) -> Result<f64> {
    if positives.is_empty() {
        return Err(Error::EmptyInput("FRR needs at least one positive"));
    }
    let hits: HashSet<(&str, &str)> = detections
        .into_iter()
        .map(|(utt, e)| (utt, e.keyphrase_id.as_str()))
        .collect();
    let misses = positives.iter().filter(|p| !hits.contains(*p)).count();
    Ok(misses as f64 / positives.len() as f64)
}

/// False accepts per hour for a (possibly averaged, hence real) event count.
pub fn fa_per_hour(num_events: f64, total_audio_s: f64) -> Result<f64> {
    if !(total_audio_s > 0.0 && total_audio_s.is_finite()) {
        return Err(Error::Degenerate(format!(
            "FA/h needs a positive audio duration, got {total_audio_s} s"
        )));
    }
    if !(num_events >= 0.0 && num_events.is_finite()) {
        return Err(Error::InvalidBuffer(format!("invalid event count {num_events}")));
    }
    Ok(num_events / (total_audio_s / 3600.0))
}

/// Every event on a keyphrase-free corpus is a false accept.
pub fn compute_fa_per_hour(events: &[DetectionEvent], total_audio_s: f64) -> Result<f64> {
    fa_per_hour(events.len() as f64, total_audio_s)
}
