//! The end-to-end training recipe: importance-weighted epoch sampling,
//! waveform and spectrogram augmentation, BCE on raw logits, AdamW under
//! the hold/decay/fine-tune schedule.
//!
//! Every random choice is derived from one master seed via per-purpose
//! streams (sampling, augmentation, Patchout), so a run is reproducible
//! from its config alone — including when batch assembly is parallelized.

pub mod augment;
pub mod loss;
pub mod optim;
pub mod sampler;

pub use augment::{
    mixup_spectrogram, sample_mixup_lambda, specaugment, MAX_FREQ_MASK, MAX_TIME_MASK,
};
pub use loss::{bce_backward, bce_loss, sigmoid};
pub use optim::{adamw_step, lr_at, AdamwState, ScheduleConfig};
pub use sampler::{
    epoch_sample, label_frequencies, load_manifest, sample_weights, LabeledExample, SamplerState,
    WaveformRef, COUNT_SMOOTHING,
};

use crate::error::{Error, Result};
use crate::eval::{mean_ap, PredictionSet};
use crate::frontend::{
    mel_spectrogram, mixup_waveform, random_gain, roll_waveform, MelSpectrogram, Waveform,
    SAMPLE_RATE,
};
use crate::linalg::{Mat, Scalar as _};
use crate::net::{model_backward, model_forward, model_forward_cached, ModelConfig, ModelParams};
use crate::rng;
use crate::tokenizer::{PatchoutMode, PatchoutSpec};
use rand::Rng as _;
use std::io::Write;

/// Mel normalization defaults: (x - mean) / (2 * std).
pub const NORM_MEAN: f32 = -4.5;
pub const NORM_STD: f32 = 5.0;
/// Random gain range in dB.
pub const GAIN_DB: f32 = 7.0;
/// Maximum circular time shift, in samples (a quarter second).
pub const ROLL_MAX: i64 = SAMPLE_RATE as i64 / 4;

// Stream tags for deriving per-purpose seeds from the master seed.
const STREAM_INIT: u64 = 1;
const STREAM_SAMPLER: u64 = 2;
const STREAM_EXAMPLE: u64 = 3;
const STREAM_BATCH: u64 = 4;
const STREAM_PATCHOUT: u64 = 5;

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// Total optimizer steps; the epoch schedule is compressed onto them.
    pub steps: usize,
    /// Clips are zero-padded or front-cropped to exactly this many samples.
    pub clip_samples: usize,
    /// Examples drawn per epoch; `None` uses the whole dataset.
    pub epoch_size: Option<usize>,
    pub patchout: PatchoutMode,
    pub augment: bool,
    pub seed: u64,
    pub norm_mean: f32,
    pub norm_std: f32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 4,
            steps: 200,
            clip_samples: 10 * SAMPLE_RATE as usize,
            epoch_size: None,
            patchout: PatchoutMode::None,
            augment: true,
            seed: 0,
            norm_mean: NORM_MEAN,
            norm_std: NORM_STD,
        }
    }
}

/// One metrics-log line. `train_map` is the most recent whole-training-set
/// mAP (measured at epoch boundaries; 0 before the first).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub train_map: f64,
}

pub const METRICS_HEADER: &str = "epoch,step,loss,lr,train_map";

pub fn write_metrics_csv(rows: &[MetricsRow], out: &mut impl Write) -> Result<()> {
    let emit = |e: std::io::Error| Error::io(format!("metrics log: {e}"));
    writeln!(out, "{METRICS_HEADER}").map_err(emit)?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{}",
            r.epoch, r.step, r.loss, r.lr, r.train_map
        )
        .map_err(emit)?;
    }
    Ok(())
}

pub struct TrainOutcome {
    pub params: ModelParams<f32>,
    pub metrics: Vec<MetricsRow>,
    /// Training-set mAP after the final step.
    pub final_map: f64,
}

/// Zero-pads at the end or keeps the leading samples so every clip is
/// exactly `n` samples.
fn fit_clip(w: &Waveform, n: usize) -> Waveform {
    let mut samples = w.samples().to_vec();
    samples.resize(n, 0.0);
    Waveform::new(samples, SAMPLE_RATE).expect("rate preserved")
}

fn binary_targets(ex: &LabeledExample, n_classes: usize) -> Vec<f32> {
    let mut t = vec![0.0f32; n_classes];
    for &c in &ex.labels {
        t[c] = 1.0;
    }
    t
}

fn add_scaled(acc: &mut ModelParams<f32>, g: &ModelParams<f32>, scale: f32) {
    let g_tensors = g.named_tensors();
    for (ti, at) in acc.named_tensors_mut().iter_mut().enumerate() {
        for (a, &gv) in at.data.iter_mut().zip(g_tensors[ti].data) {
            *a += gv * scale;
        }
    }
}

/// Inference logits for every example (clean clips, Patchout off), scored
/// as mAP against the binary labels.
fn training_set_map(
    specs: &[MelSpectrogram],
    targets: &[Vec<f32>],
    params: &ModelParams<f32>,
    model_config: &ModelConfig,
) -> Result<f64> {
    let m = specs.len();
    let c = model_config.n_classes;
    let mut logits = Mat::zeros(m, c);
    let mut truth = Mat::zeros(m, c);
    for i in 0..m {
        let z = model_forward(
            &specs[i],
            params,
            model_config,
            &PatchoutSpec::none(),
            false,
        )?;
        for j in 0..c {
            logits.set(i, j, z[j] as f64);
            truth.set(i, j, targets[i][j] as f64);
        }
    }
    mean_ap(&PredictionSet::new(logits, truth)?)
}

/// Runs the full recipe for `config.steps` optimizer steps and returns the
/// trained weights plus the per-step metrics log.
pub fn train_loop(
    dataset: &[LabeledExample],
    model_config: &ModelConfig,
    config: &TrainConfig,
    schedule: &ScheduleConfig,
) -> Result<TrainOutcome> {
    schedule.validate()?;
    if dataset.is_empty() {
        return Err(Error::config("empty dataset"));
    }
    if config.batch_size == 0 || config.steps == 0 {
        return Err(Error::config("batch_size and steps must be positive"));
    }
    for ex in dataset {
        if let Some(&c) = ex.labels.iter().find(|&&c| c >= model_config.n_classes) {
            return Err(Error::config(format!(
                "example {} has label {} but the model has {} classes",
                ex.id, c, model_config.n_classes
            )));
        }
    }
    let epoch_size = config.epoch_size.unwrap_or(dataset.len());

    let counts = label_frequencies(dataset, model_config.n_classes);
    let weights = sample_weights(dataset, &counts, COUNT_SMOOTHING);

    let mut params =
        ModelParams::<f32>::init(model_config, rng::derive(config.seed, &[STREAM_INIT]));
    // The classifier starts silent: every class at logit 0, so the first
    // gradients are purely label-driven.
    params.head_w = Mat::zeros(model_config.embed_dim, model_config.n_classes);
    let mut opt = AdamwState::new(model_config);

    // Clean, length-fitted clips; reused for evaluation and, when
    // augmentation is off, for every training step.
    let clips: Vec<Waveform> = dataset
        .iter()
        .map(|ex| Ok(fit_clip(&ex.load_waveform()?, config.clip_samples)))
        .collect::<Result<_>>()?;
    let normalize = |spec: MelSpectrogram| spec.normalize(config.norm_mean, config.norm_std);
    let clean_specs: Vec<MelSpectrogram> = clips
        .iter()
        .map(|w| Ok(normalize(mel_spectrogram(w)?)))
        .collect::<Result<_>>()?;
    let targets: Vec<Vec<f32>> = dataset
        .iter()
        .map(|ex| binary_targets(ex, model_config.n_classes))
        .collect();

    let mut metrics = Vec::with_capacity(config.steps);
    let mut last_map = 0.0;
    let mut step = 0usize;
    let mut epoch = 0usize;
    'training: loop {
        let sampler = SamplerState::new(
            weights.clone(),
            epoch_size,
            rng::derive(config.seed, &[STREAM_SAMPLER, epoch as u64]),
        )?;
        let order = epoch_sample(&sampler);
        for (batch_idx, batch) in order.chunks(config.batch_size).enumerate() {
            if step == config.steps {
                break 'training;
            }
            let mut batch_rng = rng::seeded(rng::derive(
                config.seed,
                &[STREAM_BATCH, epoch as u64, batch_idx as u64],
            ));

            // Assemble (spectrogram, target) pairs, augmented or clean.
            let mut specs: Vec<MelSpectrogram>;
            let mut tgts: Vec<Vec<f32>>;
            if config.augment {
                let mut waves: Vec<Waveform> = Vec::with_capacity(batch.len());
                tgts = Vec::with_capacity(batch.len());
                for &i in batch {
                    let mut r = rng::seeded(rng::derive(
                        config.seed,
                        &[
                            STREAM_EXAMPLE,
                            epoch as u64,
                            rng::fnv1a64(dataset[i].id.as_bytes()),
                        ],
                    ));
                    let w = roll_waveform(&clips[i], r.random_range(-ROLL_MAX..=ROLL_MAX));
                    waves.push(random_gain(&w, r.random_range(-GAIN_DB..=GAIN_DB)));
                    tgts.push(targets[i].clone());
                }
                // Waveform-level mixup: half of all batches, one lambda,
                // partners by batch reversal.
                if batch.len() > 1 && batch_rng.random::<bool>() {
                    let lambda = sample_mixup_lambda(&mut batch_rng);
                    let (mixed_w, mixed_t): (Vec<_>, Vec<_>) = (0..batch.len())
                        .map(|j| {
                            let k = batch.len() - 1 - j;
                            let w = mixup_waveform(&waves[j], &waves[k], lambda)
                                .expect("equal fitted lengths");
                            let t: Vec<f32> = tgts[j]
                                .iter()
                                .zip(&tgts[k])
                                .map(|(&a, &b)| lambda * a + (1.0 - lambda) * b)
                                .collect();
                            (w, t)
                        })
                        .unzip();
                    waves = mixed_w;
                    tgts = mixed_t;
                }
                specs = Vec::with_capacity(batch.len());
                for (j, w) in waves.iter().enumerate() {
                    let mut r = rng::seeded(rng::derive(
                        config.seed,
                        &[
                            STREAM_EXAMPLE,
                            epoch as u64,
                            rng::fnv1a64(dataset[batch[j]].id.as_bytes()),
                            1,
                        ],
                    ));
                    let spec = normalize(mel_spectrogram(w)?);
                    specs.push(specaugment(&spec, MAX_FREQ_MASK, MAX_TIME_MASK, &mut r));
                }
                // Spectrogram-level mixup, independently of the first level.
                if batch.len() > 1 && batch_rng.random::<bool>() {
                    let lambda = sample_mixup_lambda(&mut batch_rng);
                    let (mixed_s, mixed_t): (Vec<_>, Vec<_>) = (0..batch.len())
                        .map(|j| {
                            let k = batch.len() - 1 - j;
                            let s = mixup_spectrogram(&specs[j], &specs[k], lambda)
                                .expect("equal shapes");
                            let t: Vec<f32> = tgts[j]
                                .iter()
                                .zip(&tgts[k])
                                .map(|(&a, &b)| lambda * a + (1.0 - lambda) * b)
                                .collect();
                            (s, t)
                        })
                        .unzip();
                    specs = mixed_s;
                    tgts = mixed_t;
                }
            } else {
                specs = batch.iter().map(|&i| clean_specs[i].clone()).collect();
                tgts = batch.iter().map(|&i| targets[i].clone()).collect();
            }

            // Accumulate gradients one clip at a time.
            let mut grads = ModelParams::<f32>::zeros(model_config);
            let mut batch_loss = 0.0f64;
            let inv = 1.0 / batch.len() as f32;
            for (j, (spec, tgt)) in specs.iter().zip(&tgts).enumerate() {
                let patchout = PatchoutSpec {
                    mode: config.patchout,
                    seed: rng::derive(config.seed, &[STREAM_PATCHOUT, step as u64, j as u64]),
                };
                let (logits, cache) =
                    model_forward_cached(spec, &params, model_config, &patchout, true)?;
                batch_loss += bce_loss(&logits, tgt)?.to_f64_() / batch.len() as f64;
                let d_logits = bce_backward(&logits, tgt)?;
                let g = model_backward(&d_logits, &cache, &params, model_config)?;
                add_scaled(&mut grads, &g, inv);
            }
            if !batch_loss.is_finite() {
                return Err(Error::numeric(format!(
                    "epoch {epoch} step {step}: loss became non-finite"
                )));
            }

            // Compress the epoch schedule onto the step budget.
            let epoch_f = schedule.total_epochs() * step as f64 / config.steps as f64;
            let lr = lr_at(epoch_f, schedule)?;
            adamw_step(&mut params, &grads, &mut opt, lr, schedule.weight_decay)?;
            metrics.push(MetricsRow {
                epoch,
                step,
                loss: batch_loss,
                lr,
                train_map: last_map,
            });
            step += 1;
        }
        last_map = training_set_map(&clean_specs, &targets, &params, model_config)?;
        epoch += 1;
    }

    let final_map = training_set_map(&clean_specs, &targets, &params, model_config)?;
    Ok(TrainOutcome {
        params,
        metrics,
        final_map,
    })
}

/// Ten synthetic tone clips over four classes: class k is a sine at a
/// distinct frequency, and each clip sums the tones of its labels.
pub fn synthetic_tone_dataset(n_samples: usize) -> Vec<LabeledExample> {
    let tones = [220.0f32, 1000.0, 4000.0, 9000.0];
    let label_sets: [&[usize]; 10] = [
        &[0],
        &[0],
        &[1],
        &[1],
        &[2],
        &[2],
        &[3],
        &[3],
        &[0, 2],
        &[1, 3],
    ];
    label_sets
        .iter()
        .enumerate()
        .map(|(i, labels)| {
            let samples: Vec<f32> = (0..n_samples)
                .map(|t| {
                    let time = t as f32 / SAMPLE_RATE as f32;
                    labels
                        .iter()
                        .map(|&c| (2.0 * std::f32::consts::PI * tones[c] * time).sin() * 0.4)
                        .sum()
                })
                .collect();
            LabeledExample::new(
                format!("tone-{i}"),
                WaveformRef::Inline(Waveform::new(samples, SAMPLE_RATE).unwrap()),
                labels.to_vec(),
            )
            .unwrap()
        })
        .collect()
}
