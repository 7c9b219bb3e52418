//! Speaker embeddings (d-vectors), enrollment and cosine verification.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::audio_io::AudioBuffer;
use crate::frontend::{run_frontend, MelFrame, StackedFrame, STACKED_DIM};
use crate::separation::SpeakerSignature;

pub const DVECTOR_DIM: usize = 256;
const STATS_DIM: usize = 2 * STACKED_DIM;
const UNIT_NORM_TOL: f64 = 1e-6;
/// Seed of the shipped projection matrix; changing it changes every embedding.
pub const PROJECTION_SEED: u64 = 0x00d0_7ec7_0125;

fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Unit-norm 256-dim speaker embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct DVector(Vec<f64>);

impl DVector {
    /// Wraps an already unit-norm vector.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() != DVECTOR_DIM {
            return Err(Error::Config(format!(
                "d-vector must have {DVECTOR_DIM} dims, got {}",
                values.len()
            )));
        }
        let norm = l2_norm(&values);
        if (norm - 1.0).abs() > UNIT_NORM_TOL {
            return Err(Error::NotUnitNorm(norm));
        }
        Ok(Self(values))
    }

    /// Scales `values` to unit norm; fails on a (near-)zero vector.
    pub fn normalized(values: Vec<f64>) -> Result<Self> {
        let norm = l2_norm(&values);
        if !(norm > 1e-12) || !norm.is_finite() {
            return Err(Error::Degenerate("cannot normalize a zero vector".into()));
        }
        Self::new(values.into_iter().map(|v| v / norm).collect())
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dot(&self, other: &DVector) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }
}

/// Maps a feature sequence to a d-vector. Implementations must be
/// deterministic and always return unit-norm vectors.
pub trait Embedder: Send + Sync {
    fn embed(&self, frames: &[StackedFrame]) -> Result<DVector>;
}

/// Training-free embedder: per-dimension mean and standard deviation of the
/// stacked features, projected by a fixed random matrix with orthonormal rows.
#[derive(Clone)]
pub struct ReferenceEmbedder {
    /// Row-major `DVECTOR_DIM x STATS_DIM`.
    projection: Vec<f64>,
    pooling: Pooling,
}

/// Silence padding around short verification windows otherwise dominates
/// the statistics.
pub const DEFAULT_POOLING: Pooling = Pooling::Vad { range: 3.0 };

/// How frames are weighted when pooling statistics over time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Pooling {
    Uniform,
    /// Weight `exp(beta * (level - max level))`, level = mean log energy of the frame.
    EnergyWeighted { beta: f64 },
    /// Only frames within `range` nats of the loudest frame.
    Vad { range: f64 },
}

impl std::fmt::Debug for ReferenceEmbedder {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("ReferenceEmbedder")
    }
}

impl Default for ReferenceEmbedder {
    fn default() -> Self {
        Self::new()
    }
}

impl ReferenceEmbedder {
    pub fn new() -> Self {
        Self::with_seed(PROJECTION_SEED)
    }

    pub fn with_seed(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rows: Vec<Vec<f64>> = Vec::with_capacity(DVECTOR_DIM);
        while rows.len() < DVECTOR_DIM {
            let mut v: Vec<f64> = (0..STATS_DIM).map(|_| StandardNormal.sample(&mut rng)).collect();
            // Modified Gram-Schmidt, twice for numerical orthogonality.
            for _ in 0..2 {
                for r in &rows {
                    let d: f64 = v.iter().zip(r).map(|(a, b)| a * b).sum();
                    v.iter_mut().zip(r).for_each(|(a, b)| *a -= d * b);
                }
            }
            let n = l2_norm(&v);
            if n > 1e-8 {
                v.iter_mut().for_each(|a| *a /= n);
                rows.push(v);
            }
        }
        Self {
            projection: rows.concat(),
            pooling: DEFAULT_POOLING,
        }
    }

    pub fn with_pooling(mut self, pooling: Pooling) -> Self {
        self.pooling = pooling;
        self
    }

    pub fn pooling(&self) -> Pooling {
        self.pooling
    }

    fn frame_weights(&self, frames: &[StackedFrame]) -> Vec<f64> {
        let level = |f: &StackedFrame| f.features.iter().sum::<f64>() / STACKED_DIM as f64;
        let levels: Vec<f64> = frames.iter().map(level).collect();
        let top = levels.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        match self.pooling {
            Pooling::Uniform => vec![1.0; frames.len()],
            Pooling::EnergyWeighted { beta } => levels.iter().map(|l| (beta * (l - top)).exp()).collect(),
            Pooling::Vad { range } => levels
                .iter()
                .map(|&l| if l >= top - range { 1.0 } else { 0.0 })
                .collect(),
        }
    }

    pub fn projection_row(&self, i: usize) -> &[f64] {
        &self.projection[i * STATS_DIM..(i + 1) * STATS_DIM]
    }

    /// Mean and standard deviation of each feature dimension.
    pub fn pooled_stats(&self, frames: &[StackedFrame]) -> Vec<f64> {
        let weights = self.frame_weights(frames);
        let total: f64 = weights.iter().sum();
        let mut stats = vec![0.0; STATS_DIM];
        let (mean, std) = stats.split_at_mut(STACKED_DIM);
        for (f, w) in frames.iter().zip(&weights) {
            mean.iter_mut().zip(&f.features).for_each(|(m, x)| *m += w * x);
        }
        mean.iter_mut().for_each(|m| *m /= total);
        for (f, w) in frames.iter().zip(&weights) {
            std.iter_mut()
                .zip(mean.iter().zip(&f.features))
                .for_each(|(s, (m, x))| *s += w * (x - m) * (x - m));
        }
        std.iter_mut().for_each(|s| *s = (*s / total).sqrt());
        stats
    }
}

impl Embedder for ReferenceEmbedder {
    fn embed(&self, frames: &[StackedFrame]) -> Result<DVector> {
        if frames.is_empty() {
            return Err(Error::EmptyInput("embedding needs at least one frame"));
        }
        let stats = self.pooled_stats(frames);
        let projected: Vec<f64> = self
            .projection
            .chunks_exact(STATS_DIM)
            .map(|row| row.iter().zip(&stats).map(|(a, b)| a * b).sum())
            .collect();
        DVector::normalized(projected)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnrollmentProfile {
    pub speaker_id: String,
    pub d_vector: DVector,
    pub num_utterances: usize,
    /// Side input for the separator, when enrollment audio was available.
    pub signature: Option<SpeakerSignature>,
}

/// Averages enrollment d-vectors and renormalizes.
pub fn enroll(speaker_id: impl Into<String>, utterances: &[DVector]) -> Result<EnrollmentProfile> {
    if utterances.is_empty() {
        return Err(Error::EmptyInput("enrollment needs at least one utterance"));
    }
    let mut mean = vec![0.0; DVECTOR_DIM];
    for d in utterances {
        mean.iter_mut().zip(d.as_slice()).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= utterances.len() as f64);
    let norm = l2_norm(&mean);
    if norm < 1e-9 {
        return Err(Error::Degenerate(
            "enrollment vectors cancel out; mean has zero norm".into(),
        ));
    }
    Ok(EnrollmentProfile {
        speaker_id: speaker_id.into(),
        d_vector: DVector::normalized(mean)?,
        num_utterances: utterances.len(),
        signature: None,
    })
}

/// Enrolls from raw utterances (channel 0 of each), keeping the spectral
/// signature needed by the separator.
pub fn enroll_audio(
    speaker_id: impl Into<String>,
    utterances: &[AudioBuffer],
    embedder: &dyn Embedder,
) -> Result<EnrollmentProfile> {
    let mut vectors = Vec::with_capacity(utterances.len());
    let mut mels = Vec::with_capacity(utterances.len());
    for audio in utterances {
        let (mel, stacked) = run_frontend(audio, 0)?;
        vectors.push(embedder.embed(&stacked)?);
        mels.push(mel);
    }
    let mut profile = enroll(speaker_id, &vectors)?;
    let refs: Vec<&[MelFrame]> = mels.iter().map(Vec::as_slice).collect();
    profile.signature = Some(SpeakerSignature::from_mel(&refs)?);
    Ok(profile)
}

/// Cosine similarity of two unit vectors, clamped to `[-1, 1]`.
pub fn cosine(a: &DVector, b: &DVector) -> f64 {
    a.dot(b).clamp(-1.0, 1.0)
}

pub fn score(profile: &EnrollmentProfile, test: &DVector) -> f64 {
    cosine(&profile.d_vector, test)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    Accept,
    Reject,
}

pub fn verify(profile: &EnrollmentProfile, test: &DVector, threshold: f64) -> Decision {
    if score(profile, test) >= threshold {
        Decision::Accept
    } else {
        Decision::Reject
    }
}

const PROFILE_MAGIC: &[u8; 4] = b"KPSP";
const PROFILE_VERSION: u32 = 1;

/// Profile file layout (little-endian):
/// `"KPSP" | version u32 | id_len u32 | id utf-8 | 256 x f32 | num_utterances u32 |
///  has_signature u8 | [128 x f32]`.
pub fn write_profile(profile: &EnrollmentProfile, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let unwritable = |source| Error::Unwritable {
        path: path.to_path_buf(),
        source,
    };
    let mut buf = Vec::new();
    buf.extend_from_slice(PROFILE_MAGIC);
    buf.extend_from_slice(&PROFILE_VERSION.to_le_bytes());
    buf.extend_from_slice(&(profile.speaker_id.len() as u32).to_le_bytes());
    buf.extend_from_slice(profile.speaker_id.as_bytes());
    for &v in profile.d_vector.as_slice() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    buf.extend_from_slice(&(profile.num_utterances as u32).to_le_bytes());
    match &profile.signature {
        Some(sig) => {
            buf.push(1);
            for &v in sig.as_slice() {
                buf.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        None => buf.push(0),
    }
    let mut out = BufWriter::new(File::create(path).map_err(unwritable)?);
    out.write_all(&buf).map_err(unwritable)?;
    out.flush().map_err(unwritable)
}

pub(crate) struct Cursor<'a> {
    pub(crate) bytes: &'a [u8],
    pub(crate) pos: usize,
}

impl<'a> Cursor<'a> {
    pub(crate) fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let s = self.bytes.get(self.pos..self.pos + n)?;
        self.pos += n;
        Some(s)
    }

    pub(crate) fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }

    pub(crate) fn f32s(&mut self, n: usize) -> Option<Vec<f64>> {
        let b = self.take(4 * n)?;
        Some(
            b.chunks_exact(4)
                .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
                .collect(),
        )
    }
}

pub fn read_profile(path: impl AsRef<Path>) -> Result<EnrollmentProfile> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
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
    let malformed = |reason: &str| Error::MalformedBinary {
        path: path.to_path_buf(),
        reason: reason.into(),
    };
    let mut cur = Cursor { bytes: &bytes, pos: 0 };
    if cur.take(4) != Some(PROFILE_MAGIC.as_slice()) {
        return Err(malformed("bad magic"));
    }
    if cur.u32() != Some(PROFILE_VERSION) {
        return Err(malformed("unsupported version"));
    }
    let id_len = cur.u32().ok_or_else(|| malformed("truncated"))? as usize;
    let id = cur
        .take(id_len)
        .and_then(|b| std::str::from_utf8(b).ok())
        .ok_or_else(|| malformed("bad speaker id"))?
        .to_string();
    let values = cur.f32s(DVECTOR_DIM).ok_or_else(|| malformed("truncated d-vector"))?;
    let num_utterances = cur.u32().ok_or_else(|| malformed("truncated"))? as usize;
    if num_utterances == 0 {
        return Err(malformed("profile built from zero utterances"));
    }
    let signature = match cur.take(1) {
        Some([1]) => {
            let sig = cur
                .f32s(crate::frontend::NUM_MEL)
                .ok_or_else(|| malformed("truncated signature"))?;
            Some(SpeakerSignature::normalized(sig)?)
        }
        Some([0]) | None => None,
        Some(_) => return Err(malformed("bad signature flag")),
    };
    // Stored as f32; renormalize in f64.
    Ok(EnrollmentProfile {
        speaker_id: id,
        d_vector: DVector::normalized(values)?,
        num_utterances,
        signature,
    })
}
