//! The transformer: patch tokens through `depth` pre-norm attention blocks,
//! a final layer norm, and a linear classifier that reads the mean of the
//! transformed class and distillation tokens.
//!
//! Forward passes come in two flavors: a lean one for inference and
//! benchmarking (optionally recording per-layer attention cost), and a
//! caching one whose saved intermediates feed the hand-written backward.

pub mod block;
pub mod ops;
pub mod params;

pub use block::{
    block_backward, block_forward, block_forward_cached, mha_backward, mha_forward,
    mha_forward_cached, BlockCache, MhaCache,
};
pub use params::{BlockParams, ModelParams, NamedTensor, NamedTensorMut};

use crate::error::{Error, Result};
use crate::frontend::MelSpectrogram;
use crate::linalg::{Mat, Scalar};
use crate::tokenizer::{
    add_positional, append_special, apply_patchout, extract_patch_grid, project_patches,
    PatchGeometry, PatchoutSpec, TokenTag, PATCH_DIM,
};
use ops::{layernorm, layernorm_backward, LnCache};

/// Model hyperparameters. Positional-table sizes come from `geometry`,
/// which describes the longest clip the model is built for.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub n_heads: usize,
    pub depth: usize,
    pub n_classes: usize,
    pub mlp_ratio: usize,
    pub geometry: PatchGeometry,
    pub has_dist_token: bool,
}

impl ModelConfig {
    pub fn new(
        embed_dim: usize,
        n_heads: usize,
        depth: usize,
        n_classes: usize,
        mlp_ratio: usize,
        geometry: PatchGeometry,
        has_dist_token: bool,
    ) -> Result<Self> {
        if n_heads == 0 || !embed_dim.is_multiple_of(n_heads) {
            return Err(Error::config(format!(
                "embedding dim {} does not split into {} heads",
                embed_dim, n_heads
            )));
        }
        if depth == 0 {
            return Err(Error::config("depth must be at least 1"));
        }
        if n_classes == 0 {
            return Err(Error::config("need at least one output class"));
        }
        if mlp_ratio == 0 {
            return Err(Error::config("mlp_ratio must be at least 1"));
        }
        Ok(ModelConfig {
            embed_dim,
            n_heads,
            depth,
            n_classes,
            mlp_ratio,
            geometry,
            has_dist_token,
        })
    }

    /// The full-size configuration: 768-dim embeddings, 12 heads, 12 blocks,
    /// 527 classes, positional tables for a 10 s clip patched at stride 10.
    pub fn base() -> Self {
        let geometry = PatchGeometry::square(128, 1001, 10).expect("static geometry");
        ModelConfig::new(768, 12, 12, 527, 4, geometry, true).expect("static config")
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.n_heads
    }

    fn n_special(&self) -> usize {
        1 + self.has_dist_token as usize
    }
}

/// Per-layer attention cost record.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerTrace {
    /// Sequence length seen by the layer.
    pub n: usize,
    /// Multiply-adds in the Q K^T products, counted as 2 n^2 E.
    pub qk_flops: u64,
    /// Multiply-adds in the A V products, counted as 2 n^2 E.
    pub av_flops: u64,
    /// Entries in the attention matrices: heads * n^2 (one clip at a time).
    pub attn_matrix_elems: u64,
    /// Bytes held by attention activations: the score matrices plus the
    /// Q/K/V/output buffers.
    pub activation_bytes: u64,
}

impl LayerTrace {
    pub fn for_attention<T: Scalar>(n: usize, n_heads: usize, embed_dim: usize) -> Self {
        let (n64, e64) = (n as u64, embed_dim as u64);
        let elems = n_heads as u64 * n64 * n64;
        let scalar = std::mem::size_of::<T>() as u64;
        LayerTrace {
            n,
            qk_flops: 2 * n64 * n64 * e64,
            av_flops: 2 * n64 * n64 * e64,
            attn_matrix_elems: elems,
            activation_bytes: (elems + 4 * n64 * e64) * scalar,
        }
    }
}

/// Attention cost records, one per block, in forward order.
#[derive(Clone, Debug, Default)]
pub struct AttentionTrace {
    pub layers: Vec<LayerTrace>,
}

impl AttentionTrace {
    pub fn total_attn_elems(&self) -> u64 {
        self.layers.iter().map(|l| l.attn_matrix_elems).sum()
    }

    pub fn total_flops(&self) -> u64 {
        self.layers.iter().map(|l| l.qk_flops + l.av_flops).sum()
    }
}

/// Forward intermediates needed by [`model_backward`].
pub struct ModelCache<T: Scalar> {
    /// Flattened patches that survived Patchout, one row per kept token.
    survivor_grid: Mat<T>,
    /// Tags of the final sequence (specials first).
    tags: Vec<TokenTag>,
    n_special: usize,
    blocks: Vec<BlockCache<T>>,
    final_ln: LnCache<T>,
    pooled: Vec<T>,
}

impl<T: Scalar> ModelCache<T> {
    /// Sequence length the blocks ran at.
    pub fn seq_len(&self) -> usize {
        self.tags.len()
    }
}

fn check_params_match<T: Scalar>(params: &ModelParams<T>, config: &ModelConfig) -> Result<()> {
    if params.patch_proj.rows() != PATCH_DIM || params.patch_proj.cols() != config.embed_dim {
        return Err(Error::shape(format!(
            "patch projection is {}x{}, config expects {}x{}",
            params.patch_proj.rows(),
            params.patch_proj.cols(),
            PATCH_DIM,
            config.embed_dim
        )));
    }
    if params.d_embed.is_some() != config.has_dist_token {
        return Err(Error::config(
            "distillation-token embedding does not match config",
        ));
    }
    if params.blocks.len() != config.depth {
        return Err(Error::shape(format!(
            "{} blocks in params, config expects {}",
            params.blocks.len(),
            config.depth
        )));
    }
    Ok(())
}

/// Patch geometry for an actual clip, checked against the model's tables:
/// the frequency axis must match exactly, the time axis may be shorter.
fn clip_geometry(spec: &MelSpectrogram, config: &ModelConfig) -> Result<PatchGeometry> {
    let geom = PatchGeometry::new(
        spec.n_mels(),
        spec.frames(),
        config.geometry.stride_f,
        config.geometry.stride_t,
    )?;
    if geom.f_p != config.geometry.f_p {
        return Err(Error::shape(format!(
            "spectrogram yields {} frequency patch rows, model tables hold {}",
            geom.f_p, config.geometry.f_p
        )));
    }
    if geom.t_p > config.geometry.t_p {
        return Err(Error::shape(format!(
            "clip needs {} time positions, model tables hold only {}",
            geom.t_p, config.geometry.t_p
        )));
    }
    Ok(geom)
}

fn forward_inner<T: Scalar>(
    spec: &MelSpectrogram,
    params: &ModelParams<T>,
    config: &ModelConfig,
    patchout: &PatchoutSpec,
    training: bool,
    mut trace: Option<&mut AttentionTrace>,
    want_cache: bool,
) -> Result<(Vec<T>, Option<ModelCache<T>>)> {
    check_params_match(params, config)?;
    let geom = clip_geometry(spec, config)?;
    let grid = extract_patch_grid::<T>(spec, &geom)?;
    let tokens = project_patches(&grid, &geom, &params.patch_proj, &params.patch_bias)?;
    let tokens = add_positional(&tokens, &params.tables)?;
    let kept = apply_patchout(&tokens, patchout, training)?;
    let seq = append_special(&kept, &params.c_embed, params.d_embed.as_deref())?;

    let mut x = seq.embeddings().clone();
    let mut caches = Vec::new();
    for bp in &params.blocks {
        if want_cache {
            let (next, cache) = block_forward_cached(&x, bp, config.n_heads)?;
            x = next;
            caches.push(cache);
        } else {
            x = block_forward(&x, bp, config.n_heads, trace.as_deref_mut())?;
        }
    }

    let (z, final_ln) = layernorm(&x, &params.final_gamma, &params.final_beta);
    let s = config.n_special();
    let inv_s = T::from_f64(1.0 / s as f64);
    let e = config.embed_dim;
    let mut pooled = vec![T::zero(); e];
    for r in 0..s {
        for (j, p) in pooled.iter_mut().enumerate() {
            *p = *p + z.get(r, j) * inv_s;
        }
    }
    let pooled_mat = Mat::from_vec(1, e, pooled.clone())?;
    let logits = ops::linear(&pooled_mat, &params.head_w, &params.head_b);
    let logits = logits.row(0).to_vec();

    let cache = want_cache.then(|| {
        // Map each surviving patch tag back to its row in the full grid.
        let mut survivor_grid = Mat::zeros(kept.len(), PATCH_DIM);
        for (i, tag) in kept.tags().iter().enumerate() {
            if let TokenTag::Patch { f, t } = tag {
                survivor_grid
                    .row_mut(i)
                    .copy_from_slice(grid.row(f * geom.t_p + t));
            }
        }
        ModelCache {
            survivor_grid,
            tags: seq.tags().to_vec(),
            n_special: s,
            blocks: caches,
            final_ln,
            pooled,
        }
    });
    Ok((logits, cache))
}

/// Full pipeline to raw logits (no sigmoid). Inference ignores Patchout.
pub fn model_forward<T: Scalar>(
    spec: &MelSpectrogram,
    params: &ModelParams<T>,
    config: &ModelConfig,
    patchout: &PatchoutSpec,
    training: bool,
) -> Result<Vec<T>> {
    forward_inner(spec, params, config, patchout, training, None, false).map(|(l, _)| l)
}

/// [`model_forward`] that also appends one attention-cost record per block
/// to `trace`.
pub fn model_forward_traced<T: Scalar>(
    spec: &MelSpectrogram,
    params: &ModelParams<T>,
    config: &ModelConfig,
    patchout: &PatchoutSpec,
    training: bool,
    trace: &mut AttentionTrace,
) -> Result<Vec<T>> {
    forward_inner(spec, params, config, patchout, training, Some(trace), false).map(|(l, _)| l)
}

/// Forward pass that keeps every intermediate [`model_backward`] needs.
pub fn model_forward_cached<T: Scalar>(
    spec: &MelSpectrogram,
    params: &ModelParams<T>,
    config: &ModelConfig,
    patchout: &PatchoutSpec,
    training: bool,
) -> Result<(Vec<T>, ModelCache<T>)> {
    forward_inner(spec, params, config, patchout, training, None, true)
        .map(|(l, c)| (l, c.expect("cache requested")))
}

/// Reverse-mode gradients for every parameter tensor, given the gradient of
/// the loss w.r.t. the logits.
pub fn model_backward<T: Scalar>(
    d_logits: &[T],
    cache: &ModelCache<T>,
    params: &ModelParams<T>,
    config: &ModelConfig,
) -> Result<ModelParams<T>> {
    if d_logits.len() != config.n_classes {
        return Err(Error::shape(format!(
            "{} logit gradients for {} classes",
            d_logits.len(),
            config.n_classes
        )));
    }
    let e = config.embed_dim;
    let n = cache.tags.len();
    let s = cache.n_special;
    let mut grads = ModelParams::<T>::zeros(config);

    // Head: logits = pooled W + b.
    let pooled_mat = Mat::from_vec(1, e, cache.pooled.clone())?;
    let d_logits_mat = Mat::from_vec(1, config.n_classes, d_logits.to_vec())?;
    grads.head_w = pooled_mat.matmul_tn(&d_logits_mat);
    grads.head_b = d_logits.to_vec();
    let d_pooled = d_logits_mat.matmul_nt(&params.head_w);

    // Pooling: each of the first `s` rows contributed 1/s of the mean.
    let inv_s = T::from_f64(1.0 / s as f64);
    let mut d_z = Mat::zeros(n, e);
    for r in 0..s {
        for j in 0..e {
            d_z.set(r, j, d_pooled.get(0, j) * inv_s);
        }
    }
    let (mut d_x, d_gamma, d_beta) = layernorm_backward(&d_z, &cache.final_ln, &params.final_gamma);
    grads.final_gamma = d_gamma;
    grads.final_beta = d_beta;

    for i in (0..config.depth).rev() {
        d_x = block_backward(
            &d_x,
            &cache.blocks[i],
            &params.blocks[i],
            config.n_heads,
            &mut grads.blocks[i],
        );
    }

    // Split the input-sequence gradient back into its sources.
    grads.c_embed.copy_from_slice(d_x.row(0));
    if let Some(d) = grads.d_embed.as_mut() {
        d.copy_from_slice(d_x.row(1));
    }
    let kept_n = n - s;
    let mut d_emb = Mat::zeros(kept_n, e);
    for i in 0..kept_n {
        let row = d_x.row(s + i);
        d_emb.row_mut(i).copy_from_slice(row);
        match cache.tags[s + i] {
            TokenTag::Patch { f, t } => {
                for (j, &rv) in row.iter().enumerate() {
                    let fv = grads.tables.freq_table.get(f, j) + rv;
                    grads.tables.freq_table.set(f, j, fv);
                    let tv = grads.tables.time_table.get(t, j) + rv;
                    grads.tables.time_table.set(t, j, tv);
                }
            }
            _ => unreachable!("specials sit at the front"),
        }
    }
    grads.patch_proj = cache.survivor_grid.matmul_tn(&d_emb);
    grads.patch_bias = d_emb.col_sums();

    if !grads.all_finite() {
        return Err(Error::numeric("non-finite gradient"));
    }
    Ok(grads)
}

/// Which of the twelve blocks survive depth reduction: every even-indexed
/// block plus the last, preserving residual continuity while landing on
/// seven blocks.
pub const REDUCED_BLOCK_INDICES: [usize; 7] = [0, 2, 4, 6, 8, 10, 11];

/// Shrink a 12-block model to 7 blocks by dropping every other block (the
/// final block stays). Retained tensors are copied bit-exactly; everything
/// outside the blocks is untouched.
pub fn reduce_depth<T: Scalar>(
    params: &ModelParams<T>,
    config: &ModelConfig,
) -> Result<(ModelParams<T>, ModelConfig)> {
    if config.depth != 12 {
        return Err(Error::config(format!(
            "depth reduction expects 12 blocks, got {}",
            config.depth
        )));
    }
    let mut new_config = *config;
    new_config.depth = REDUCED_BLOCK_INDICES.len();
    let mut new_params = params.clone();
    new_params.blocks = REDUCED_BLOCK_INDICES
        .iter()
        .map(|&i| params.blocks[i].clone())
        .collect();
    Ok((new_params, new_config))
}

/// Closed-form parameter count:
///
/// ```text
/// 256E + E                                  patch projection
/// E (1 + dist)                              special tokens
/// (F_p + T_p) E                             positional tables
/// d [ 4E + 4(E^2 + E) + 2RE + R + E ]       blocks (R = mlp_ratio * E)
/// 2E                                        final norm
/// E C + C                                   head
/// ```
pub fn param_count(config: &ModelConfig) -> usize {
    let e = config.embed_dim;
    let r = config.mlp_ratio * e;
    let c = config.n_classes;
    let patch = PATCH_DIM * e + e;
    let specials = e * (1 + config.has_dist_token as usize);
    let tables = (config.geometry.f_p + config.geometry.t_p) * e;
    let block = 4 * e + 4 * (e * e + e) + 2 * r * e + r + e;
    patch + specials + tables + config.depth * block + 2 * e + (e * c + c)
}
