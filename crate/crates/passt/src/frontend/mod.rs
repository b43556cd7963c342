//! Audio frontend: waveforms, log-mel spectrograms, waveform augmentations.
//!
//! The pipeline expects mono 32 kHz input. Mel extraction uses a 25 ms
//! window (800 samples) with a 10 ms hop (320 samples) and 128 mel bands,
//! so a clip of `n` samples yields `1 + floor(n / 320)` frames.

mod mel;
pub mod wav;

pub use mel::{mel_spectrogram, HOP_SAMPLES, LOG_FLOOR, N_FFT, N_MELS, WIN_SAMPLES};
pub use wav::{load_pcm, save_wav};

use crate::error::{Error, Result};
use crate::linalg::Mat;

pub const SAMPLE_RATE: u32 = 32_000;

/// Mono audio at the pipeline sample rate.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    samples: Vec<f32>,
    sample_rate: u32,
}

impl Waveform {
    /// Inputs at rates other than 32 kHz are rejected; resampling is out of
    /// scope for this crate.
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if sample_rate != SAMPLE_RATE {
            return Err(Error::audio(format!(
                "expected {} Hz, got {}",
                SAMPLE_RATE, sample_rate
            )));
        }
        if samples.is_empty() {
            return Err(Error::audio("empty waveform"));
        }
        Ok(Waveform {
            samples,
            sample_rate,
        })
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// F x T grid of log-mel energies.
///
/// Pipeline spectrograms always have `F = 128` rows; synthetic test
/// spectrograms may be built with other row counts via [`MelSpectrogram::from_values`].
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram {
    values: Mat<f32>,
}

impl MelSpectrogram {
    pub fn from_values(values: Mat<f32>) -> Result<Self> {
        if values.rows() == 0 || values.cols() == 0 {
            return Err(Error::shape("empty spectrogram"));
        }
        if !values.is_finite() {
            return Err(Error::numeric("spectrogram contains non-finite values"));
        }
        Ok(MelSpectrogram { values })
    }

    pub fn values(&self) -> &Mat<f32> {
        &self.values
    }

    /// Number of mel bands (rows).
    pub fn n_mels(&self) -> usize {
        self.values.rows()
    }

    /// Number of frames (columns).
    pub fn frames(&self) -> usize {
        self.values.cols()
    }

    /// Fixed affine normalization `(x - mean) / (2 * std)` applied before the
    /// spectrogram enters the network.
    pub fn normalize(&self, mean: f32, std: f32) -> MelSpectrogram {
        let denom = 2.0 * std;
        MelSpectrogram {
            values: self.values.map(|v| (v - mean) / denom),
        }
    }
}

/// Circularly shift a waveform by `shift` samples (negative shifts allowed;
/// the shift is reduced modulo the length).
pub fn roll_waveform(w: &Waveform, shift: i64) -> Waveform {
    let n = w.samples.len() as i64;
    let s = shift.rem_euclid(n) as usize;
    if s == 0 {
        return w.clone();
    }
    let mut out = Vec::with_capacity(w.samples.len());
    out.extend_from_slice(&w.samples[w.samples.len() - s..]);
    out.extend_from_slice(&w.samples[..w.samples.len() - s]);
    Waveform {
        samples: out,
        sample_rate: w.sample_rate,
    }
}

/// Scale every sample by `10^(gain_db / 20)`.
pub fn random_gain(w: &Waveform, gain_db: f32) -> Waveform {
    let scale = 10f32.powf(gain_db / 20.0);
    Waveform {
        samples: w.samples.iter().map(|&s| s * scale).collect(),
        sample_rate: w.sample_rate,
    }
}

/// Convex combination `lambda * a + (1 - lambda) * b` of two equal-length
/// waveforms. Callers mix label vectors with the same lambda.
pub fn mixup_waveform(a: &Waveform, b: &Waveform, lambda: f32) -> Result<Waveform> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::config(format!(
            "mixup lambda {} outside [0, 1]",
            lambda
        )));
    }
    if a.samples.len() != b.samples.len() {
        return Err(Error::shape(format!(
            "mixup length mismatch: {} vs {}",
            a.samples.len(),
            b.samples.len()
        )));
    }
    if a.sample_rate != b.sample_rate {
        return Err(Error::audio("mixup sample rate mismatch"));
    }
    let samples = a
        .samples
        .iter()
        .zip(&b.samples)
        .map(|(&x, &y)| lambda * x + (1.0 - lambda) * y)
        .collect();
    Ok(Waveform {
        samples,
        sample_rate: a.sample_rate,
    })
}
