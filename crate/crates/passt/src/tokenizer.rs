//! Spectrogram-to-token pipeline: patch extraction, linear projection,
//! frequency/time positional encodings, Patchout, and special tokens.
//!
//! Patches are square 16x16 windows over the mel/time plane, traversed
//! frequency-major (all time offsets for the lowest band first). During
//! training, Patchout drops patch tokens — either a fixed count chosen
//! uniformly, or whole frequency rows and time columns — before the
//! classification/distillation tokens are appended at positions 0 and 1.
//! At inference the full sequence passes through untouched.

use crate::error::{Error, Result};
use crate::frontend::MelSpectrogram;
use crate::linalg::{Mat, Scalar};
use crate::rng;

/// Patch edge length in spectrogram cells (mel bands and frames).
pub const PATCH_SIZE: usize = 16;
/// Flattened patch length: `PATCH_SIZE * PATCH_SIZE`.
pub const PATCH_DIM: usize = PATCH_SIZE * PATCH_SIZE;

/// Placement of the 16x16 patch grid over an `n_mels x frames` spectrogram.
///
/// Strides at or below the patch size give overlapping or abutting patches;
/// cells past the last full patch are discarded.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchGeometry {
    pub stride_f: usize,
    pub stride_t: usize,
    /// Patch count along frequency: `(n_mels - 16) / stride_f + 1`.
    pub f_p: usize,
    /// Patch count along time: `(frames - 16) / stride_t + 1`.
    pub t_p: usize,
}

impl PatchGeometry {
    pub fn new(n_mels: usize, frames: usize, stride_f: usize, stride_t: usize) -> Result<Self> {
        for (axis, s) in [("frequency", stride_f), ("time", stride_t)] {
            if s == 0 || s > PATCH_SIZE {
                return Err(Error::config(format!(
                    "{} stride must be in 1..={}, got {}",
                    axis, PATCH_SIZE, s
                )));
            }
        }
        if n_mels < PATCH_SIZE || frames < PATCH_SIZE {
            return Err(Error::shape(format!(
                "spectrogram {}x{} is smaller than one {}x{} patch",
                n_mels, frames, PATCH_SIZE, PATCH_SIZE
            )));
        }
        Ok(PatchGeometry {
            stride_f,
            stride_t,
            f_p: (n_mels - PATCH_SIZE) / stride_f + 1,
            t_p: (frames - PATCH_SIZE) / stride_t + 1,
        })
    }

    /// Square stride on both axes.
    pub fn square(n_mels: usize, frames: usize, stride: usize) -> Result<Self> {
        Self::new(n_mels, frames, stride, stride)
    }

    pub fn n_patches(&self) -> usize {
        self.f_p * self.t_p
    }
}

/// What a token row stands for.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TokenTag {
    /// Patch at grid cell (f, t).
    Patch { f: usize, t: usize },
    /// Classification token.
    Class,
    /// Distillation token.
    Dist,
}

impl TokenTag {
    pub fn is_special(&self) -> bool {
        !matches!(self, TokenTag::Patch { .. })
    }
}

/// A sequence of token embeddings with per-row tags recording where each
/// token came from. Special tokens, when present, sit at rows 0 (class)
/// and 1 (distillation).
#[derive(Clone, Debug)]
pub struct TokenSequence<T: Scalar = f32> {
    embeddings: Mat<T>,
    tags: Vec<TokenTag>,
}

impl<T: Scalar> TokenSequence<T> {
    pub fn new(embeddings: Mat<T>, tags: Vec<TokenTag>) -> Result<Self> {
        if embeddings.rows() != tags.len() {
            return Err(Error::shape(format!(
                "{} embedding rows but {} tags",
                embeddings.rows(),
                tags.len()
            )));
        }
        let n_special = tags.iter().filter(|t| t.is_special()).count();
        match n_special {
            0 => {}
            1 if tags[0] == TokenTag::Class => {}
            2 if tags[0] == TokenTag::Class && tags[1] == TokenTag::Dist => {}
            _ => {
                return Err(Error::shape(
                    "special tokens must be class at row 0, then optional distillation at row 1",
                ))
            }
        }
        let mut seen = std::collections::HashSet::new();
        for tag in &tags {
            if let TokenTag::Patch { f, t } = tag {
                if !seen.insert((*f, *t)) {
                    return Err(Error::shape(format!("duplicate patch tag ({}, {})", f, t)));
                }
            }
        }
        Ok(TokenSequence { embeddings, tags })
    }

    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }

    /// Embedding width E.
    pub fn dim(&self) -> usize {
        self.embeddings.cols()
    }

    pub fn embeddings(&self) -> &Mat<T> {
        &self.embeddings
    }

    pub fn embeddings_mut(&mut self) -> &mut Mat<T> {
        &mut self.embeddings
    }

    pub fn tags(&self) -> &[TokenTag] {
        &self.tags
    }

    pub fn has_special(&self) -> bool {
        self.tags.iter().any(|t| t.is_special())
    }
}

/// How many patch tokens to drop during training.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PatchoutMode {
    None,
    /// Drop exactly `k` patch tokens, chosen uniformly without replacement.
    Unstructured {
        k: usize,
    },
    /// Drop `f_drop` whole frequency rows and `t_drop` whole time columns.
    Structured {
        f_drop: usize,
        t_drop: usize,
    },
}

/// Patchout configuration plus the seed that makes a draw reproducible.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchoutSpec {
    pub mode: PatchoutMode,
    pub seed: u64,
}

impl PatchoutSpec {
    pub fn none() -> Self {
        PatchoutSpec {
            mode: PatchoutMode::None,
            seed: 0,
        }
    }

    pub fn unstructured(k: usize, seed: u64) -> Self {
        PatchoutSpec {
            mode: PatchoutMode::Unstructured { k },
            seed,
        }
    }

    pub fn structured(f_drop: usize, t_drop: usize, seed: u64) -> Self {
        PatchoutSpec {
            mode: PatchoutMode::Structured { f_drop, t_drop },
            seed,
        }
    }
}

/// Trainable positional encodings: one row per frequency index and one per
/// time index. A patch token receives the sum of its two rows, so frequency
/// and time are encoded independently.
#[derive(Clone, Debug)]
pub struct PositionalTables<T: Scalar = f32> {
    pub freq_table: Mat<T>,
    pub time_table: Mat<T>,
}

impl<T: Scalar> PositionalTables<T> {
    pub fn zeros(f_p: usize, t_p: usize, dim: usize) -> Self {
        PositionalTables {
            freq_table: Mat::zeros(f_p, dim),
            time_table: Mat::zeros(t_p, dim),
        }
    }
}

/// Cut the spectrogram into flattened patches: one row per patch,
/// frequency-major order, each row the 16x16 window in row-major layout
/// (mel rows outer, frames inner).
pub fn extract_patch_grid<T: Scalar>(
    spec: &MelSpectrogram,
    geom: &PatchGeometry,
) -> Result<Mat<T>> {
    let last_f = (geom.f_p - 1) * geom.stride_f + PATCH_SIZE;
    let last_t = (geom.t_p - 1) * geom.stride_t + PATCH_SIZE;
    if last_f > spec.n_mels() || last_t > spec.frames() {
        return Err(Error::shape(format!(
            "geometry needs a {}x{} spectrogram but got {}x{}",
            last_f,
            last_t,
            spec.n_mels(),
            spec.frames()
        )));
    }
    let mut grid = Mat::zeros(geom.n_patches(), PATCH_DIM);
    for f in 0..geom.f_p {
        for t in 0..geom.t_p {
            let row = grid.row_mut(f * geom.t_p + t);
            for r in 0..PATCH_SIZE {
                for c in 0..PATCH_SIZE {
                    row[r * PATCH_SIZE + c] = T::from_f32(
                        spec.values()
                            .get(f * geom.stride_f + r, t * geom.stride_t + c),
                    );
                }
            }
        }
    }
    Ok(grid)
}

/// Project each flattened patch through `proj` (256xE) plus `bias`, tagging
/// every token with its grid cell.
pub fn project_patches<T: Scalar>(
    grid: &Mat<T>,
    geom: &PatchGeometry,
    proj: &Mat<T>,
    bias: &[T],
) -> Result<TokenSequence<T>> {
    if grid.rows() != geom.n_patches() {
        return Err(Error::shape(format!(
            "grid has {} rows but geometry expects {}",
            grid.rows(),
            geom.n_patches()
        )));
    }
    if grid.cols() != proj.rows() || proj.cols() != bias.len() {
        return Err(Error::shape(format!(
            "projection mismatch: {}-dim patches, {}x{} matrix, {}-dim bias",
            grid.cols(),
            proj.rows(),
            proj.cols(),
            bias.len()
        )));
    }
    if grid.rows() == 0 {
        return Err(Error::shape("empty patch grid"));
    }
    let mut embeddings = grid.matmul(proj);
    for i in 0..embeddings.rows() {
        for (v, b) in embeddings.row_mut(i).iter_mut().zip(bias) {
            *v = *v + *b;
        }
    }
    let tags = (0..geom.f_p)
        .flat_map(|f| (0..geom.t_p).map(move |t| TokenTag::Patch { f, t }))
        .collect();
    TokenSequence::new(embeddings, tags)
}

/// Add `freq_table[f] + time_table[t]` to every patch token. Special tokens
/// carry their own trainable embeddings and pass through unchanged.
pub fn add_positional<T: Scalar>(
    tokens: &TokenSequence<T>,
    tables: &PositionalTables<T>,
) -> Result<TokenSequence<T>> {
    if tables.freq_table.cols() != tokens.dim() || tables.time_table.cols() != tokens.dim() {
        return Err(Error::shape(format!(
            "positional tables are {}-dim but tokens are {}-dim",
            tables.freq_table.cols(),
            tokens.dim()
        )));
    }
    let mut out = tokens.clone();
    for i in 0..out.len() {
        if let TokenTag::Patch { f, t } = out.tags[i] {
            if f >= tables.freq_table.rows() || t >= tables.time_table.rows() {
                return Err(Error::shape(format!(
                    "patch ({}, {}) outside {}x{} positional tables",
                    f,
                    t,
                    tables.freq_table.rows(),
                    tables.time_table.rows()
                )));
            }
            let row = out.embeddings.row_mut(i);
            for (j, v) in row.iter_mut().enumerate() {
                *v = *v + tables.freq_table.get(f, j) + tables.time_table.get(t, j);
            }
        }
    }
    Ok(out)
}

/// Keep only the first `new_t_p` rows of the time table, so a model trained
/// on long clips can run on shorter ones. The frequency table is untouched.
pub fn crop_time_table<T: Scalar>(
    tables: &PositionalTables<T>,
    new_t_p: usize,
) -> Result<PositionalTables<T>> {
    let t_p = tables.time_table.rows();
    if new_t_p == 0 || new_t_p > t_p {
        return Err(Error::config(format!(
            "cannot crop time table from {} to {} rows",
            t_p, new_t_p
        )));
    }
    let dim = tables.time_table.cols();
    let cropped = Mat::from_fn(new_t_p, dim, |i, j| tables.time_table.get(i, j));
    Ok(PositionalTables {
        freq_table: tables.freq_table.clone(),
        time_table: cropped,
    })
}

/// Drop patch tokens for training. Identity when `training` is false.
///
/// Unstructured mode removes exactly `k` tokens chosen uniformly without
/// replacement; structured mode removes every token in `f_drop` uniformly
/// chosen frequency rows or `t_drop` time columns. Survivors keep their
/// relative order, and the same seed always drops the same set.
pub fn apply_patchout<T: Scalar>(
    tokens: &TokenSequence<T>,
    spec: &PatchoutSpec,
    training: bool,
) -> Result<TokenSequence<T>> {
    if tokens.has_special() {
        return Err(Error::shape(
            "patchout applies before special tokens are appended",
        ));
    }
    if !training || spec.mode == PatchoutMode::None {
        return Ok(tokens.clone());
    }
    let n = tokens.len();
    let mut rng = rng::seeded(spec.seed);
    let keep: Vec<bool> = match spec.mode {
        PatchoutMode::None => unreachable!(),
        PatchoutMode::Unstructured { k } => {
            if k >= n {
                return Err(Error::config(format!(
                    "cannot drop {} of {} patch tokens",
                    k, n
                )));
            }
            let mut keep = vec![true; n];
            for idx in rand::seq::index::sample(&mut rng, n, k) {
                keep[idx] = false;
            }
            keep
        }
        PatchoutMode::Structured { f_drop, t_drop } => {
            let (mut f_p, mut t_p) = (0, 0);
            for tag in &tokens.tags {
                if let TokenTag::Patch { f, t } = tag {
                    f_p = f_p.max(f + 1);
                    t_p = t_p.max(t + 1);
                }
            }
            if f_drop >= f_p || t_drop >= t_p {
                return Err(Error::config(format!(
                    "structured patchout ({}, {}) must leave at least one row and column of a {}x{} grid",
                    f_drop, t_drop, f_p, t_p
                )));
            }
            let f_dropped: std::collections::HashSet<usize> =
                rand::seq::index::sample(&mut rng, f_p, f_drop)
                    .into_iter()
                    .collect();
            let t_dropped: std::collections::HashSet<usize> =
                rand::seq::index::sample(&mut rng, t_p, t_drop)
                    .into_iter()
                    .collect();
            tokens
                .tags
                .iter()
                .map(|tag| match tag {
                    TokenTag::Patch { f, t } => !f_dropped.contains(f) && !t_dropped.contains(t),
                    _ => unreachable!(),
                })
                .collect()
        }
    };
    let survivors: Vec<usize> = (0..n).filter(|&i| keep[i]).collect();
    let mut embeddings = Mat::zeros(survivors.len(), tokens.dim());
    let mut tags = Vec::with_capacity(survivors.len());
    for (out_row, &i) in survivors.iter().enumerate() {
        embeddings
            .row_mut(out_row)
            .copy_from_slice(tokens.embeddings.row(i));
        tags.push(tokens.tags[i]);
    }
    TokenSequence::new(embeddings, tags)
}

/// Prepend the classification token (and optional distillation token) so the
/// sequence reads [class, dist?, patches...].
pub fn append_special<T: Scalar>(
    tokens: &TokenSequence<T>,
    c_embed: &[T],
    d_embed: Option<&[T]>,
) -> Result<TokenSequence<T>> {
    if tokens.has_special() {
        return Err(Error::shape("special tokens already present"));
    }
    let dim = tokens.dim();
    if c_embed.len() != dim || d_embed.is_some_and(|d| d.len() != dim) {
        return Err(Error::shape(format!(
            "special embeddings must be {}-dim",
            dim
        )));
    }
    let n_special = 1 + d_embed.is_some() as usize;
    let mut embeddings = Mat::zeros(tokens.len() + n_special, dim);
    let mut tags = Vec::with_capacity(tokens.len() + n_special);
    embeddings.row_mut(0).copy_from_slice(c_embed);
    tags.push(TokenTag::Class);
    if let Some(d) = d_embed {
        embeddings.row_mut(1).copy_from_slice(d);
        tags.push(TokenTag::Dist);
    }
    for i in 0..tokens.len() {
        embeddings
            .row_mut(n_special + i)
            .copy_from_slice(tokens.embeddings.row(i));
        tags.push(tokens.tags[i]);
    }
    TokenSequence::new(embeddings, tags)
}
