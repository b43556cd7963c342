//! Spectrogram-level augmentations: stripe masking and mixup.
//! Waveform-level counterparts (roll, gain, mixup) live in the frontend.

use crate::error::{Error, Result};
use crate::frontend::MelSpectrogram;
use crate::rng::Rng;
use rand::Rng as _;
use rand_distr::{Beta, Distribution};

pub const MAX_FREQ_MASK: usize = 48;
pub const MAX_TIME_MASK: usize = 192;
/*  Mixup strength; the Beta(0.3, 0.3) lambda hugs 0 and 1, so most mixes
are gentle. */
pub const MIXUP_ALPHA: f64 = 0.3;

/// Zeroes one frequency stripe up to `max_f` bins wide and one time stripe
/// up to `max_t` frames wide. Width 0 (a third of the time for small
/// maxima) leaves that axis untouched. Zero is the post-normalization
/// neutral value.
pub fn specaugment(
    spec: &MelSpectrogram,
    max_f: usize,
    max_t: usize,
    r: &mut Rng,
) -> MelSpectrogram {
    let (n_mels, frames) = (spec.n_mels(), spec.frames());
    let mut values = spec.values().clone();

    let f_width = r.random_range(0..=max_f.min(n_mels));
    if f_width > 0 {
        let f0 = r.random_range(0..=n_mels - f_width);
        for m in f0..f0 + f_width {
            values.row_mut(m).fill(0.0);
        }
    }
    let t_width = r.random_range(0..=max_t.min(frames));
    if t_width > 0 {
        let t0 = r.random_range(0..=frames - t_width);
        for m in 0..n_mels {
            values.row_mut(m)[t0..t0 + t_width].fill(0.0);
        }
    }
    MelSpectrogram::from_values(values).expect("shape preserved")
}

/// Elementwise `lambda * a + (1 - lambda) * b`. The caller mixes the label
/// vectors with the same lambda.
pub fn mixup_spectrogram(
    a: &MelSpectrogram,
    b: &MelSpectrogram,
    lambda: f32,
) -> Result<MelSpectrogram> {
    if a.n_mels() != b.n_mels() || a.frames() != b.frames() {
        return Err(Error::shape(format!(
            "cannot mix {}x{} with {}x{}",
            a.n_mels(),
            a.frames(),
            b.n_mels(),
            b.frames()
        )));
    }
    let mut values = a.values().clone();
    for (v, &bv) in values.data_mut().iter_mut().zip(b.values().data()) {
        *v = lambda * *v + (1.0 - lambda) * bv;
    }
    MelSpectrogram::from_values(values)
}

/// Draws the mixup coefficient from Beta(0.3, 0.3).
pub fn sample_mixup_lambda(r: &mut Rng) -> f32 {
    let beta = Beta::new(MIXUP_ALPHA, MIXUP_ALPHA).expect("static alpha");
    beta.sample(r) as f32
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Mat;
    use crate::rng;

    fn spec(n_mels: usize, frames: usize) -> MelSpectrogram {
        MelSpectrogram::from_values(Mat::from_fn(n_mels, frames, |i, j| {
            1.0 + (i * frames + j) as f32 * 0.01
        }))
        .unwrap()
    }

    #[test]
    fn zero_widths_are_the_identity() {
        let s = spec(8, 12);
        let mut r = rng::seeded(1);
        let out = specaugment(&s, 0, 0, &mut r);
        assert_eq!(out.values().data(), s.values().data());
    }

    #[test]
    fn stripes_zero_exact_rectangles_and_nothing_else() {
        // Every input cell is nonzero, so zeros identify the stripes.
        let s = spec(32, 64);
        for seed in 0..50 {
            let mut r = rng::seeded(seed);
            let out = specaugment(&s, 8, 16, &mut r);
            let zero_rows: Vec<usize> = (0..32)
                .filter(|&m| out.values().row(m).iter().all(|&v| v == 0.0))
                .collect();
            // Zeroed columns outside the zeroed rows:
            let probe_row = (0..32).find(|m| !zero_rows.contains(m));
            let zero_cols: Vec<usize> = match probe_row {
                Some(m) => (0..64).filter(|&t| out.values().get(m, t) == 0.0).collect(),
                None => vec![],
            };
            // Stripes are contiguous and within bounds.
            assert!(zero_rows.len() <= 8);
            assert!(zero_cols.len() <= 16);
            if let (Some(&first), Some(&last)) = (zero_rows.first(), zero_rows.last()) {
                assert_eq!(last - first + 1, zero_rows.len(), "contiguous rows");
            }
            if let (Some(&first), Some(&last)) = (zero_cols.first(), zero_cols.last()) {
                assert_eq!(last - first + 1, zero_cols.len(), "contiguous cols");
            }
            // Every untouched cell is bit-identical.
            for m in 0..32 {
                for t in 0..64 {
                    if zero_rows.contains(&m) || zero_cols.contains(&t) {
                        assert_eq!(out.values().get(m, t), 0.0);
                    } else {
                        assert_eq!(out.values().get(m, t), s.values().get(m, t));
                    }
                }
            }
            // Zeroed area is width_f * frames + width_t * mels - overlap.
            let zeros = out.values().data().iter().filter(|&&v| v == 0.0).count();
            let (fw, tw) = (zero_rows.len(), zero_cols.len());
            assert_eq!(zeros, fw * 64 + tw * 32 - fw * tw);
        }
    }

    #[test]
    fn masking_is_deterministic_per_rng_state() {
        let s = spec(16, 40);
        let a = specaugment(&s, 6, 10, &mut rng::seeded(9));
        let b = specaugment(&s, 6, 10, &mut rng::seeded(9));
        assert_eq!(a.values().data(), b.values().data());
    }

    #[test]
    fn widths_are_clamped_to_the_spectrogram() {
        let s = spec(4, 6);
        for seed in 0..20 {
            let out = specaugment(&s, 100, 100, &mut rng::seeded(seed));
            assert_eq!(out.n_mels(), 4);
            assert_eq!(out.frames(), 6);
        }
    }

    #[test]
    fn mixup_endpoints_and_midpoint() {
        let a = spec(4, 4);
        let b = MelSpectrogram::from_values(a.values().map(|v| v + 2.0)).unwrap();
        assert_eq!(
            mixup_spectrogram(&a, &b, 1.0).unwrap().values().data(),
            a.values().data()
        );
        assert_eq!(
            mixup_spectrogram(&a, &b, 0.0).unwrap().values().data(),
            b.values().data()
        );
        let mid = mixup_spectrogram(&a, &b, 0.5).unwrap();
        for ((&m, &x), &y) in mid
            .values()
            .data()
            .iter()
            .zip(a.values().data())
            .zip(b.values().data())
        {
            assert!((m - 0.5 * (x + y)).abs() < 1e-6);
        }
        assert!(mixup_spectrogram(&a, &spec(4, 5), 0.5).is_err());
    }

    #[test]
    fn lambda_lives_in_the_unit_interval_and_hugs_the_ends() {
        let mut r = rng::seeded(4);
        let mut extreme = 0;
        for _ in 0..1000 {
            let l = sample_mixup_lambda(&mut r);
            assert!((0.0..=1.0).contains(&l));
            if !(0.1..=0.9).contains(&l) {
                extreme += 1;
            }
        }
        // Beta(0.3, 0.3) piles mass near 0 and 1: roughly 55% of draws sit
        // outside [0.1, 0.9], against 20% for a uniform lambda.
        assert!(extreme > 450, "only {extreme}/1000 extreme draws");
    }
}
