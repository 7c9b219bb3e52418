//! PCM audio buffers, WAV files and line-delimited dataset manifests.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Multi-channel PCM audio with amplitudes nominally in [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct AudioBuffer {
    channels: Vec<Vec<f64>>,
    sample_rate_hz: u32,
}

impl AudioBuffer {
    pub fn new(channels: Vec<Vec<f64>>, sample_rate_hz: u32) -> Result<Self> {
        if sample_rate_hz == 0 {
            return Err(Error::InvalidBuffer("sample rate must be positive".into()));
        }
        if channels.is_empty() {
            return Err(Error::InvalidBuffer("at least one channel required".into()));
        }
        let len = channels[0].len();
        if channels.iter().any(|c| c.len() != len) {
            return Err(Error::InvalidBuffer("channels differ in length".into()));
        }
        Ok(Self {
            channels,
            sample_rate_hz,
        })
    }

    pub fn mono(samples: Vec<f64>, sample_rate_hz: u32) -> Result<Self> {
        Self::new(vec![samples], sample_rate_hz)
    }

    pub fn sample_rate_hz(&self) -> u32 {
        self.sample_rate_hz
    }

    pub fn num_channels(&self) -> usize {
        self.channels.len()
    }

    /// Samples per channel.
    pub fn len(&self) -> usize {
        self.channels[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn duration_s(&self) -> f64 {
        self.len() as f64 / f64::from(self.sample_rate_hz)
    }

    pub fn channel(&self, index: usize) -> Option<&[f64]> {
        self.channels.get(index).map(Vec::as_slice)
    }

    pub fn channels(&self) -> &[Vec<f64>] {
        &self.channels
    }

    pub fn into_channels(self) -> Vec<Vec<f64>> {
        self.channels
    }
}

fn map_hound(path: &Path, err: hound::Error) -> Error {
    let path = path.to_path_buf();
    match err {
        hound::Error::FormatError(reason) => Error::MalformedHeader {
            path,
            reason: reason.to_string(),
        },
        hound::Error::UnfinishedSample => Error::MalformedHeader {
            path,
            reason: "truncated sample data".into(),
        },
        hound::Error::Unsupported | hound::Error::TooWide | hound::Error::InvalidSampleFormat => {
            Error::UnsupportedEncoding {
                path,
                reason: err.to_string(),
            }
        }
        hound::Error::IoError(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => {
            Error::MalformedHeader {
                path,
                reason: "unexpected end of file".into(),
            }
        }
        hound::Error::IoError(source) => Error::Io { path, source },
    }
}

/// Reads a PCM16 or IEEE float32 WAV file with 1 to 8 channels.
pub fn read_wav(path: impl AsRef<Path>) -> Result<AudioBuffer> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let mut reader = hound::WavReader::open(path).map_err(|e| map_hound(path, e))?;
    let spec = reader.spec();
    let nch = usize::from(spec.channels);
    if !(1..=8).contains(&nch) {
        return Err(Error::UnsupportedEncoding {
            path: path.to_path_buf(),
            reason: format!("{nch} channels"),
        });
    }
    if spec.sample_rate == 0 {
        return Err(Error::MalformedHeader {
            path: path.to_path_buf(),
            reason: "zero sample rate".into(),
        });
    }
    let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .map(|s| s.map(|v| f64::from(v) / 32768.0))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| map_hound(path, e))?,
        (hound::SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .map(|s| s.map(f64::from))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| map_hound(path, e))?,
        (fmt, bits) => {
            return Err(Error::UnsupportedEncoding {
                path: path.to_path_buf(),
                reason: format!("{fmt:?} {bits}-bit"),
            })
        }
    };
    let frames = interleaved.len() / nch;
    let mut channels = vec![Vec::with_capacity(frames); nch];
    for frame in interleaved.chunks_exact(nch) {
        for (ch, &s) in channels.iter_mut().zip(frame) {
            ch.push(s);
        }
    }
    AudioBuffer::new(channels, spec.sample_rate)
}

fn to_pcm16(x: f64) -> i16 {
    (x * 32768.0).round().clamp(-32768.0, 32767.0) as i16
}

/// Writes the buffer as PCM16, saturating out-of-range samples.
pub fn write_wav(buffer: &AudioBuffer, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let spec = hound::WavSpec {
        channels: buffer.num_channels() as u16,
        sample_rate: buffer.sample_rate_hz(),
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let unwritable = |e: hound::Error| match e {
        hound::Error::IoError(source) => Error::Unwritable {
            path: path.to_path_buf(),
            source,
        },
        other => Error::Unwritable {
            path: path.to_path_buf(),
            source: std::io::Error::other(other.to_string()),
        },
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(unwritable)?;
    for i in 0..buffer.len() {
        for ch in buffer.channels() {
            writer.write_sample(to_pcm16(ch[i])).map_err(unwritable)?;
        }
    }
    writer.finalize().map_err(unwritable)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseSource {
    Speech,
    Nonspeech,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Room {
    Additive,
    Reverb,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseMeta {
    pub source: NoiseSource,
    pub snr_db: f64,
    pub room: Room,
}

/// One utterance of a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub audio_path: String,
    pub speaker_id: String,
    pub transcript: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub keyphrase_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise_meta: Option<NoiseMeta>,
}

/// Reads a JSON-lines file, one record per line; blank lines are skipped.
pub fn read_json_lines<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let file = File::open(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut records = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line).map_err(|e| Error::MalformedLine {
            path: path.to_path_buf(),
            line: idx + 1,
            reason: e.to_string(),
        })?;
        records.push(record);
    }
    Ok(records)
}

pub fn write_json_lines<T: Serialize>(records: &[T], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let unwritable = |source| Error::Unwritable {
        path: path.to_path_buf(),
        source,
    };
    let mut out = BufWriter::new(File::create(path).map_err(unwritable)?);
    for record in records {
        let line = serde_json::to_string(record).map_err(|e| Error::Unwritable {
            path: path.to_path_buf(),
            source: std::io::Error::new(std::io::ErrorKind::InvalidData, e),
        })?;
        writeln!(out, "{line}").map_err(unwritable)?;
    }
    out.flush().map_err(unwritable)
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    read_json_lines(path)
}

pub fn write_manifest(entries: &[ManifestEntry], path: impl AsRef<Path>) -> Result<()> {
    write_json_lines(entries, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pcm16_silence_reads_as_zeros() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("silence.wav");
        let buf = AudioBuffer::mono(vec![0.0; 16000], 16000).unwrap();
        write_wav(&buf, &path).unwrap();
        let back = read_wav(&path).unwrap();
        assert_eq!(back.num_channels(), 1);
        assert_eq!(back.len(), 16000);
        assert!(back.channel(0).unwrap().iter().all(|&s| s == 0.0));
    }

    #[test]
    fn full_scale_square_wave() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("square.wav");
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: 16000,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(&path, spec).unwrap();
        for i in 0..64 {
            w.write_sample(if i % 2 == 0 { 32767i16 } else { -32767 }).unwrap();
        }
        w.finalize().unwrap();
        let back = read_wav(&path).unwrap();
        for (i, &s) in back.channel(0).unwrap().iter().enumerate() {
            let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
            assert_eq!(s, sign * 32767.0 / 32768.0);
        }
    }

    #[test]
    fn stereo_and_float32() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("stereo.wav");
        let spec = hound::WavSpec {
            channels: 2,
            sample_rate: 16000,
            bits_per_sample: 32,
            sample_format: hound::SampleFormat::Float,
        };
        let mut w = hound::WavWriter::create(&path, spec).unwrap();
        for i in 0..100 {
            w.write_sample(i as f32 / 100.0).unwrap();
            w.write_sample(-0.25f32).unwrap();
        }
        w.finalize().unwrap();
        let back = read_wav(&path).unwrap();
        assert_eq!(back.num_channels(), 2);
        assert_eq!(back.channel(0).unwrap().len(), back.channel(1).unwrap().len());
        assert_eq!(back.channel(0).unwrap()[50], f64::from(0.5f32));
        assert_eq!(back.channel(1).unwrap()[3], -0.25);
    }

    #[test]
    fn distinct_read_errors() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            read_wav(dir.path().join("nope.wav")),
            Err(Error::MissingFile(_))
        ));

        let junk = dir.path().join("junk.wav");
        std::fs::write(&junk, b"this is not a riff file at all").unwrap();
        assert!(matches!(read_wav(&junk), Err(Error::MalformedHeader { .. })));

        let pcm24 = dir.path().join("pcm24.wav");
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: 16000,
            bits_per_sample: 24,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(&pcm24, spec).unwrap();
        w.write_sample(1000i32).unwrap();
        w.finalize().unwrap();
        assert!(matches!(
            read_wav(&pcm24),
            Err(Error::UnsupportedEncoding { .. })
        ));
    }

    #[test]
    fn clipping_saturates() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("clip.wav");
        let buf = AudioBuffer::mono(vec![1.5, -2.0, 1.0, -1.0], 16000).unwrap();
        write_wav(&buf, &path).unwrap();
        let back = read_wav(&path).unwrap();
        assert_eq!(
            back.channel(0).unwrap(),
            &[32767.0 / 32768.0, -1.0, 32767.0 / 32768.0, -1.0]
        );
    }

    #[test]
    fn unwritable_path() {
        let buf = AudioBuffer::mono(vec![0.0; 4], 16000).unwrap();
        let err = write_wav(&buf, "/nonexistent-dir/x/y.wav").unwrap_err();
        assert!(matches!(err, Error::Unwritable { .. }));
    }

    #[test]
    fn buffer_invariants() {
        assert!(AudioBuffer::new(vec![vec![0.0; 3], vec![0.0; 2]], 16000).is_err());
        assert!(AudioBuffer::mono(vec![0.0], 0).is_err());
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        std::fs::write(&path, "").unwrap();
        assert!(read_manifest(&path).unwrap().is_empty());

        let entries = vec![
            ManifestEntry {
                audio_path: "a.wav".into(),
                speaker_id: "spk0".into(),
                transcript: "turn off the lights".into(),
                keyphrase_id: Some("lights_off".into()),
                noise_meta: None,
            },
            ManifestEntry {
                audio_path: "b.wav".into(),
                speaker_id: "spk1".into(),
                transcript: "set a timer".into(),
                keyphrase_id: None,
                noise_meta: Some(NoiseMeta {
                    source: NoiseSource::Speech,
                    snr_db: 0.0,
                    room: Room::Reverb,
                }),
            },
        ];
        write_manifest(&entries, &path).unwrap();
        assert_eq!(read_manifest(&path).unwrap(), entries);
    }

    #[test]
    fn manifest_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        std::fs::write(
            &path,
            "{\"audio_path\":\"a\",\"speaker_id\":\"s\",\"transcript\":\"t\"}\n\n{oops\n",
        )
        .unwrap();
        match read_manifest(&path) {
            Err(Error::MalformedLine { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }
}
