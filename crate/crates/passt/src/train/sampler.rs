//! Importance sampling over a multi-label dataset: rare labels make an
//! example more likely to be drawn. Each epoch takes `epoch_size` distinct
//! examples, weighted without replacement via the exponential-keys trick
//! (key = -ln(u)/w, keep the smallest keys).

use crate::error::{Error, Result};
use crate::frontend::{wav, Waveform};
use crate::rng;
use serde::Deserialize;
use std::io::BufRead;
use std::path::{Path, PathBuf};

/// Additive count smoothing in the weight denominator.
pub const COUNT_SMOOTHING: f64 = 100.0;

/// Where an example's audio lives: on disk, or already decoded (synthetic
/// and test data).
#[derive(Clone, Debug)]
pub enum WaveformRef {
    File(PathBuf),
    Inline(Waveform),
}

#[derive(Clone, Debug)]
pub struct LabeledExample {
    pub id: String,
    pub waveform: WaveformRef,
    /// Class indices; multi-label, possibly empty.
    pub labels: Vec<usize>,
}

impl LabeledExample {
    pub fn new(
        id: impl Into<String>,
        waveform: WaveformRef,
        mut labels: Vec<usize>,
    ) -> Result<Self> {
        let id = id.into();
        if id.is_empty() {
            return Err(Error::config("example id must be non-empty"));
        }
        labels.sort_unstable();
        labels.dedup();
        Ok(LabeledExample {
            id,
            waveform,
            labels,
        })
    }

    pub fn load_waveform(&self) -> Result<Waveform> {
        match &self.waveform {
            WaveformRef::File(path) => wav::load_pcm(path),
            WaveformRef::Inline(w) => Ok(w.clone()),
        }
    }
}

#[derive(Deserialize)]
struct ManifestRow {
    id: String,
    wav: PathBuf,
    labels: Vec<usize>,
}

/// Reads a JSON-lines manifest: one `{"id", "wav", "labels"}` object per
/// line. Relative wav paths resolve against the manifest's directory.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Vec<LabeledExample>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path)
        .map_err(|e| Error::io(format!("open {}: {e}", path.display())))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut out = Vec::new();
    for (lineno, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(format!("read {}: {e}", path.display())))?;
        if line.trim().is_empty() {
            continue;
        }
        let row: ManifestRow = serde_json::from_str(&line)
            .map_err(|e| Error::format(format!("{}:{}: {e}", path.display(), lineno + 1)))?;
        let wav = if row.wav.is_absolute() {
            row.wav
        } else {
            base.join(row.wav)
        };
        out.push(LabeledExample::new(
            row.id,
            WaveformRef::File(wav),
            row.labels,
        )?);
    }
    if out.is_empty() {
        return Err(Error::format(format!("{}: no examples", path.display())));
    }
    Ok(out)
}

/// Per-class example counts: `counts[c]` = how many examples carry label c.
pub fn label_frequencies(dataset: &[LabeledExample], n_classes: usize) -> Vec<usize> {
    let mut counts = vec![0usize; n_classes];
    for ex in dataset {
        for &c in &ex.labels {
            if c < n_classes {
                counts[c] += 1;
            }
        }
    }
    counts
}

/// Sampling weight per example: the sum over its labels of
/// `1 / (count + smoothing)`. Label-free examples get the dataset's
/// smallest positive weight so they stay reachable.
pub fn sample_weights(dataset: &[LabeledExample], counts: &[usize], smoothing: f64) -> Vec<f64> {
    let mut weights: Vec<f64> = dataset
        .iter()
        .map(|ex| {
            ex.labels
                .iter()
                .map(|&c| 1.0 / (counts[c] as f64 + smoothing))
                .sum()
        })
        .collect();
    let min_positive = weights
        .iter()
        .copied()
        .filter(|&w| w > 0.0)
        .fold(f64::INFINITY, f64::min);
    let fallback = if min_positive.is_finite() {
        min_positive
    } else {
        1.0
    };
    for w in &mut weights {
        if *w == 0.0 {
            *w = fallback;
        }
    }
    weights
}

#[derive(Clone, Debug)]
pub struct SamplerState {
    weights: Vec<f64>,
    epoch_size: usize,
    seed: u64,
}

impl SamplerState {
    pub fn new(weights: Vec<f64>, epoch_size: usize, seed: u64) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::config("sampler needs a non-empty dataset"));
        }
        if epoch_size == 0 || epoch_size > weights.len() {
            return Err(Error::config(format!(
                "epoch size {} outside 1..={} examples",
                epoch_size,
                weights.len()
            )));
        }
        if weights.iter().any(|&w| !w.is_finite() || w <= 0.0) {
            return Err(Error::config(
                "sampling weights must be positive and finite",
            ));
        }
        Ok(SamplerState {
            weights,
            epoch_size,
            seed,
        })
    }

    pub fn epoch_size(&self) -> usize {
        self.epoch_size
    }
}

/// Draws `epoch_size` distinct example indices, weighted without
/// replacement, fully determined by the state's seed.
pub fn epoch_sample(state: &SamplerState) -> Vec<usize> {
    let mut r = rng::seeded(state.seed);
    let mut keyed: Vec<(f64, usize)> = state
        .weights
        .iter()
        .enumerate()
        .map(|(i, &w)| {
            // u in (0, 1]: never take ln(0).
            let u = 1.0 - rand::Rng::random::<f64>(&mut r);
            (-u.ln() / w, i)
        })
        .collect();
    keyed.sort_by(|a, b| a.partial_cmp(b).expect("finite keys"));
    keyed.truncate(state.epoch_size);
    keyed.into_iter().map(|(_, i)| i).collect()
}
