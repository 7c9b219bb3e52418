#![allow(dead_code)]

use keyphrase::eval::ScoredTrial;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};

/// Least-squares multichannel FIR fit of `target` from `refs` over `range`:
/// `w_r[k]` multiplies `refs[r][n - k]`.
pub fn wiener_oracle(target: &[f64], refs: &[&[f64]], taps: usize, range: std::ops::Range<usize>) -> Vec<Vec<f64>> {
    let dim = taps * refs.len();
    let mut ata = DMatrix::<f64>::zeros(dim, dim);
    let mut atb = DVector::<f64>::zeros(dim);
    let mut row = vec![0.0; dim];
    for n in range {
        for (r, x) in refs.iter().enumerate() {
            for k in 0..taps {
                row[r * taps + k] = if n >= k { x[n - k] } else { 0.0 };
            }
        }
        for i in 0..dim {
            let ri = row[i];
            if ri == 0.0 {
                continue;
            }
            atb[i] += ri * target[n];
            for j in i..dim {
                ata[(i, j)] += ri * row[j];
            }
        }
    }
    for i in 0..dim {
        for j in 0..i {
            ata[(i, j)] = ata[(j, i)];
        }
    }
    let w = ata
        .cholesky()
        .expect("normal equations are positive definite")
        .solve(&atb);
    (0..refs.len())
        .map(|r| w.as_slice()[r * taps..(r + 1) * taps].to_vec())
        .collect()
}

/// `target[n] - sum_r sum_k w_r[k] refs[r][n - k]` over `range`.
pub fn apply_filter(target: &[f64], refs: &[&[f64]], weights: &[Vec<f64>], range: std::ops::Range<usize>) -> Vec<f64> {
    range
        .map(|n| {
            let est: f64 = refs
                .iter()
                .zip(weights)
                .map(|(x, w)| {
                    w.iter()
                        .enumerate()
                        .filter(|(k, _)| n >= *k)
                        .map(|(k, wk)| wk * x[n - k])
                        .sum::<f64>()
                })
                .sum();
            target[n] - est
        })
        .collect()
}

pub fn power(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>() / x.len().max(1) as f64
}

pub fn db(ratio: f64) -> f64 {
    10.0 * ratio.log10()
}

/// Sweep by direct counting: every candidate threshold, FAR and FRR
/// recounted from scratch, then linear interpolation at the first sign
/// change of FAR - FRR.
pub fn brute_force_eer(trials: &[ScoredTrial]) -> f64 {
    let mut scores: Vec<f64> = trials.iter().map(|t| t.score).collect();
    scores.sort_by(f64::total_cmp);
    scores.dedup();
    let mut thresholds = vec![scores[0] - 1.0];
    thresholds.extend(scores.windows(2).map(|w| 0.5 * (w[0] + w[1])));
    thresholds.push(scores[scores.len() - 1] + 1.0);
    let nt = trials.iter().filter(|t| t.is_target).count() as f64;
    let nn = trials.len() as f64 - nt;
    let rates: Vec<(f64, f64)> = thresholds
        .iter()
        .map(|&th| {
            let fa = trials.iter().filter(|t| !t.is_target && t.score >= th).count() as f64 / nn;
            let fr = trials.iter().filter(|t| t.is_target && t.score < th).count() as f64 / nt;
            (fa, fr)
        })
        .collect();
    for w in rates.windows(2) {
        let (d0, d1) = (w[0].0 - w[0].1, w[1].0 - w[1].1);
        if d0 == 0.0 {
            return w[0].0;
        }
        if d0 > 0.0 && d1 <= 0.0 {
            let t = d0 / (d0 - d1);
            return w[0].0 + t * (w[1].0 - w[0].0);
        }
    }
    unreachable!()
}

/// Seeded trial set with 2 to 59 trials, at least one of each kind, and
/// coarse (tied) scores on about a third of the seeds.
pub fn trial_set(seed: u64) -> Vec<ScoredTrial> {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(2..60);
    let levels = if rng.gen_bool(0.3) { Some(rng.gen_range(2..6)) } else { None };
    let mut trials: Vec<ScoredTrial> = (0..n)
        .map(|_| {
            let is_target = rng.gen_bool(0.5);
            let mut score: f64 = rng.gen_range(-1.0..1.0) + if is_target { 0.4 } else { 0.0 };
            if let Some(l) = levels {
                score = (score * f64::from(l)).round() / f64::from(l);
            }
            ScoredTrial { score, is_target }
        })
        .collect();
    trials[0].is_target = true;
    trials[1].is_target = false;
    trials
}

/// Naive DFT power spectrum, bins `0..=N/2`.
pub fn dft_power(frame: &[f64]) -> Vec<f64> {
    let n = frame.len();
    (0..=n / 2)
        .map(|k| {
            let (mut re, mut im) = (0.0, 0.0);
            for (t, x) in frame.iter().enumerate() {
                let ph = -2.0 * std::f64::consts::PI * (k * t % n) as f64 / n as f64;
                re += x * ph.cos();
                im += x * ph.sin();
            }
            re * re + im * im
        })
        .collect()
}

/// Mel filter whose triangle (built from the textbook log10 mel formula)
/// gives frequency `hz` the largest weight.
pub fn textbook_filter_for(hz: f64) -> usize {
    let mel = |f: f64| 2595.0 * (1.0 + f / 700.0).log10();
    let inv = |m: f64| 700.0 * (10f64.powf(m / 2595.0) - 1.0);
    let (lo, hi) = (mel(125.0), mel(7500.0));
    let edge = |i: usize| inv(lo + (hi - lo) * i as f64 / 129.0);
    (0..128)
        .map(|k| {
            let (a, c, b) = (edge(k), edge(k + 1), edge(k + 2));
            let w = if hz > a && hz <= c {
                (hz - a) / (c - a)
            } else if hz > c && hz < b {
                (b - hz) / (b - c)
            } else {
                0.0
            };
            (k, w)
        })
        .max_by(|x, y| x.1.total_cmp(&y.1))
        .unwrap()
        .0
}
