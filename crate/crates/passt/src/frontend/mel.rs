//! Log-mel spectrogram extraction.
//!
//! STFT: 800-sample (25 ms) Hann window zero-padded to a 1024-point FFT,
//! 320-sample (10 ms) hop, centered frames with reflection padding. The
//! power spectrum is pooled through 128 triangular mel filters (Slaney
//! scale and normalization, 0 Hz to 16 kHz) and compressed with
//! `ln(x + 1e-5)`.

use super::{MelSpectrogram, Waveform};
use crate::error::{Error, Result};
use crate::linalg::Mat;
use rustfft::{num_complex::Complex, FftPlanner};

pub const WIN_SAMPLES: usize = 800;
pub const HOP_SAMPLES: usize = 320;
pub const N_FFT: usize = 1024;
pub const N_MELS: usize = 128;
pub const LOG_FLOOR: f32 = 1e-5;

const FMIN: f64 = 0.0;
const FMAX: f64 = 16_000.0;
const N_BINS: usize = N_FFT / 2 + 1;

fn hz_to_mel(hz: f64) -> f64 {
    let f_sp = 200.0 / 3.0;
    let min_log_hz = 1000.0;
    let min_log_mel = min_log_hz / f_sp;
    let logstep = (6.4f64).ln() / 27.0;
    if hz >= min_log_hz {
        min_log_mel + (hz / min_log_hz).ln() / logstep
    } else {
        hz / f_sp
    }
}

fn mel_to_hz(mel: f64) -> f64 {
    let f_sp = 200.0 / 3.0;
    let min_log_hz = 1000.0;
    let min_log_mel = min_log_hz / f_sp;
    let logstep = (6.4f64).ln() / 27.0;
    if mel >= min_log_mel {
        min_log_hz * ((mel - min_log_mel) * logstep).exp()
    } else {
        mel * f_sp
    }
}

/// Triangular filterbank, `N_MELS x N_BINS`, Slaney area normalization.
fn mel_filterbank(sample_rate: u32) -> Mat<f32> {
    let mel_lo = hz_to_mel(FMIN);
    let mel_hi = hz_to_mel(FMAX);
    let n_points = N_MELS + 2;
    let hz_points: Vec<f64> = (0..n_points)
        .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (n_points - 1) as f64))
        .collect();
    let bin_hz: Vec<f64> = (0..N_BINS)
        .map(|k| k as f64 * sample_rate as f64 / N_FFT as f64)
        .collect();

    let mut fb = Mat::zeros(N_MELS, N_BINS);
    for m in 0..N_MELS {
        let (lo, center, hi) = (hz_points[m], hz_points[m + 1], hz_points[m + 2]);
        let norm = 2.0 / (hi - lo);
        for (k, &f) in bin_hz.iter().enumerate() {
            let rising = (f - lo) / (center - lo);
            let falling = (hi - f) / (hi - center);
            let w = rising.min(falling).max(0.0);
            if w > 0.0 {
                fb.set(m, k, (w * norm) as f32);
            }
        }
    }
    fb
}

fn hann_window() -> Vec<f32> {
    (0..WIN_SAMPLES)
        .map(|i| {
            let x = 2.0 * std::f64::consts::PI * i as f64 / WIN_SAMPLES as f64;
            (0.5 - 0.5 * x.cos()) as f32
        })
        .collect()
}

/// Reflection-pad by half a window on each side so frames are centered.
fn reflect_pad(samples: &[f32], pad: usize) -> Vec<f32> {
    let n = samples.len();
    let mut out = Vec::with_capacity(n + 2 * pad);
    for i in (1..=pad).rev() {
        out.push(samples[i.min(n - 1)]);
    }
    out.extend_from_slice(samples);
    for i in 0..pad {
        let idx = n.saturating_sub(2 + i);
        out.push(samples[idx]);
    }
    out
}

/// Convert a waveform into a 128-band log-mel spectrogram with
/// `1 + floor(n / 320)` frames.
pub fn mel_spectrogram(w: &Waveform) -> Result<MelSpectrogram> {
    let samples = w.samples();
    if samples.len() < WIN_SAMPLES {
        return Err(Error::audio(format!(
            "waveform of {} samples is shorter than one {}-sample analysis window",
            samples.len(),
            WIN_SAMPLES
        )));
    }
    let frames = 1 + samples.len() / HOP_SAMPLES;
    let pad = WIN_SAMPLES / 2;
    let padded = reflect_pad(samples, pad);
    let window = hann_window();
    let fb = mel_filterbank(w.sample_rate());

    let mut planner = FftPlanner::<f32>::new();
    let fft = planner.plan_fft_forward(N_FFT);
    let mut buf = vec![Complex::new(0.0f32, 0.0); N_FFT];
    let mut power = vec![0.0f32; N_BINS];

    let mut values = Mat::zeros(N_MELS, frames);
    for t in 0..frames {
        let start = t * HOP_SAMPLES;
        for (i, c) in buf.iter_mut().enumerate() {
            *c = if i < WIN_SAMPLES {
                Complex::new(padded[start + i] * window[i], 0.0)
            } else {
                Complex::new(0.0, 0.0)
            };
        }
        fft.process(&mut buf);
        for (k, p) in power.iter_mut().enumerate() {
            *p = buf[k].norm_sqr();
        }
        for m in 0..N_MELS {
            let mut acc = 0.0f32;
            for (k, &p) in power.iter().enumerate() {
                acc += fb.get(m, k) * p;
            }
            values.set(m, t, (acc + LOG_FLOOR).ln());
        }
    }
    MelSpectrogram::from_values(values)
}
