//! RIFF/WAVE reading and writing for pipeline fixtures.

use super::{Waveform, SAMPLE_RATE};
use crate::error::{Error, Result};
use std::path::Path;

/// Load a mono 32 kHz WAV file (16-bit PCM or 32-bit float) and normalize
/// samples to [-1, 1].
pub fn load_pcm(path: impl AsRef<Path>) -> Result<Waveform> {
    let path = path.as_ref();
    let mut reader = hound::WavReader::open(path)
        .map_err(|e| Error::audio(format!("cannot read {}: {}", path.display(), e)))?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::audio(format!(
            "mono required, file has {} channels",
            spec.channels
        )));
    }
    if spec.sample_rate != SAMPLE_RATE {
        return Err(Error::audio(format!(
            "expected {} Hz, got {}",
            SAMPLE_RATE, spec.sample_rate
        )));
    }
    let samples: Vec<f32> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .map(|s| s.map(|v| v as f32 / 32768.0))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::audio(format!("decode error: {}", e)))?,
        (hound::SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::audio(format!("decode error: {}", e)))?,
        (fmt, bits) => {
            return Err(Error::audio(format!(
                "unsupported sample format {:?}/{} bits (need 16-bit PCM or 32-bit float)",
                fmt, bits
            )))
        }
    };
    Waveform::new(samples, spec.sample_rate)
}

/// Write a waveform as 16-bit PCM, clamping to [-1, 1].
pub fn save_wav(path: impl AsRef<Path>, w: &Waveform) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate(),
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path.as_ref(), spec)
        .map_err(|e| Error::audio(format!("cannot write wav: {}", e)))?;
    for &s in w.samples() {
        let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        writer
            .write_sample(v)
            .map_err(|e| Error::audio(format!("wav write error: {}", e)))?;
    }
    writer
        .finalize()
        .map_err(|e| Error::audio(format!("wav finalize error: {}", e)))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn ten_second_file_round_trips() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("tone.wav");
        let samples: Vec<f32> = (0..320_000)
            .map(|i| (i as f32 * 0.01).sin() * 0.5)
            .collect();
        let w = Waveform::new(samples, SAMPLE_RATE).unwrap();
        save_wav(&path, &w).unwrap();
        let back = load_pcm(&path).unwrap();
        assert_eq!(back.len(), 320_000);
        assert_eq!(back.sample_rate(), SAMPLE_RATE);
        // 16-bit quantization error bound
        for (a, b) in w.samples().iter().zip(back.samples()).take(1000) {
            assert!((a - b).abs() < 1.0 / 32000.0);
        }
    }

    #[test]
    fn rejects_stereo() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("stereo.wav");
        let spec = hound::WavSpec {
            channels: 2,
            sample_rate: SAMPLE_RATE,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut writer = hound::WavWriter::create(&path, spec).unwrap();
        for _ in 0..64 {
            writer.write_sample(0i16).unwrap();
            writer.write_sample(0i16).unwrap();
        }
        writer.finalize().unwrap();
        let err = load_pcm(&path).unwrap_err();
        assert!(err.to_string().contains("mono required"), "{err}");
    }

    #[test]
    fn rejects_wrong_rate() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("cd.wav");
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: 44_100,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut writer = hound::WavWriter::create(&path, spec).unwrap();
        for _ in 0..64 {
            writer.write_sample(0i16).unwrap();
        }
        writer.finalize().unwrap();
        let err = load_pcm(&path).unwrap_err();
        assert!(err.to_string().contains("expected 32000 Hz"), "{err}");
    }

    #[test]
    fn reads_float32_files() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("f32.wav");
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: SAMPLE_RATE,
            bits_per_sample: 32,
            sample_format: hound::SampleFormat::Float,
        };
        let mut writer = hound::WavWriter::create(&path, spec).unwrap();
        for i in 0..64 {
            writer.write_sample(i as f32 / 100.0).unwrap();
        }
        writer.finalize().unwrap();
        let w = load_pcm(&path).unwrap();
        assert_eq!(w.len(), 64);
        assert!((w.samples()[10] - 0.1).abs() < 1e-7);
    }

    #[test]
    fn missing_file_errors() {
        assert!(load_pcm("/nonexistent/file.wav").is_err());
    }
}
